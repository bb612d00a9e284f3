use ndarray::Array2;
use proptest::prelude::*;

use m2ds::nn::Linear;
use m2ds::objectives::{
    align_teacher, loss_m2d, normalized_mse, reassemble_frame_order, split_frame_grad, standardize_target,
};
use m2ds::model::ema_update;
use m2ds::patching::sample_mask;
use m2ds::training::{lr_schedule, steps_per_epoch};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn nonzero_rows(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    matrix(rows, cols).prop_filter("rows need some norm", |m| m.rows().into_iter().all(|r| r.dot(&r) > 1e-3))
}

proptest! {
    #[test]
    fn loss_is_bounded_and_scale_invariant(
        (a, b) in (1usize..6, 1usize..20).prop_flat_map(|(r, c)| (nonzero_rows(r, c), nonzero_rows(r, c))),
        sa in 1e-2f64..1e2, sb in 1e-2f64..1e2,
    ) {
        let l = loss_m2d(&a, &b, 1e-12).unwrap();
        prop_assert!((-1e-12..=4.0 + 1e-12).contains(&l));
        let scaled = loss_m2d(&(&a * sa), &(&b * sb), 1e-12).unwrap();
        prop_assert!((l - scaled).abs() < 1e-9);
        prop_assert!(loss_m2d(&a, &a, 1e-12).unwrap().abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_is_orthogonal_to_prediction(
        (a, b) in (1usize..5, 2usize..12).prop_flat_map(|(r, c)| (nonzero_rows(r, c), nonzero_rows(r, c))),
    ) {
        // scale invariance implies ⟨∂L/∂a_i, a_i⟩ = 0 row by row
        let (_, g) = normalized_mse(&a, &b, 1e-12).unwrap();
        for (gr, ar) in g.rows().into_iter().zip(a.rows()) {
            prop_assert!(gr.dot(&ar).abs() < 1e-9 * (1.0 + ar.dot(&ar)));
        }
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance(z in (1usize..8, 4usize..40).prop_flat_map(|(r, c)| matrix(r, c))) {
        let out = standardize_target(&z, 1e-6);
        for (row, src) in out.rows().into_iter().zip(z.rows()) {
            let n = row.len() as f64;
            let m = row.sum() / n;
            prop_assert!(m.abs() < 1e-9);
            let src_mean = src.sum() / n;
            let src_var = src.iter().map(|v| (v - src_mean).powi(2)).sum::<f64>() / n;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            prop_assert!((var - src_var / (src_var + 1e-6)).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_reassembly_and_split_are_adjoint(
        nf in 1usize..4, nt in 2usize..8, d in 1usize..5, seed in any::<u64>(),
        vals in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 7 * 4),
    ) {
        let n = nf * nt;
        let plan = sample_mask(n, 0.6, seed).unwrap();
        let take = |k: usize, off: usize| Array2::from_shape_fn((k, d), |(i, j)| vals[(off + i * d + j) % vals.len()]);
        let z_v = take(plan.visible_idx.len(), 0);
        let z_m = take(plan.masked_idx.len(), 7);
        let frames = reassemble_frame_order(&z_v, &z_m, &plan, nf, nt).unwrap();
        prop_assert_eq!(frames.dim(), (nt, nf * d));
        // the split routes every frame entry back to where it came from
        let (dv, dm) = split_frame_grad(&frames, &plan, nf).unwrap();
        prop_assert_eq!(dv, z_v);
        prop_assert_eq!(dm, z_m);
    }

    #[test]
    fn pooled_alignment_preserves_the_mean(h in (1usize..30, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c)), k in 1usize..5) {
        let out = align_teacher(&h, 10.0 * k as f64, 10.0).unwrap();
        let n = h.nrows() / k;
        prop_assert_eq!(out.nrows(), n);
        if n > 0 {
            let covered = h.slice(ndarray::s![..n * k, ..]).sum();
            prop_assert!((out.sum() * k as f64 - covered).abs() < 1e-9 * (1.0 + covered.abs()));
        }
        let up = align_teacher(&h, 10.0, 10.0 * k as f64).unwrap();
        prop_assert_eq!(up.nrows(), h.nrows() * k);
        let back = align_teacher(&up, 10.0 * k as f64, 10.0).unwrap();
        prop_assert!(back.iter().zip(&h).all(|(x, y)| (x - y).abs() < 1e-12 * (1.0 + y.abs())));
    }

    #[test]
    fn ema_is_a_convex_combination(tau in 0.0f64..=1.0, a in matrix(3, 4), b in matrix(3, 4)) {
        let mut target = Linear { w: a.clone(), b: Array2::zeros((1, 3)) };
        let online = Linear { w: b.clone(), b: Array2::ones((1, 3)) };
        ema_update(&mut target, &online, tau).unwrap();
        for ((t, x), y) in target.w.iter().zip(&a).zip(&b) {
            prop_assert!(t >= &(x.min(*y) - 1e-12) && t <= &(x.max(*y) + 1e-12));
            prop_assert!((t - (tau * x + (1.0 - tau) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_stays_within_bounds(n in 1usize..500, b in 1usize..64, epochs in 1usize..20, warm in 0usize..5, lr in 1e-5f64..1e-2) {
        let spe = steps_per_epoch(n, b);
        prop_assert_eq!(spe, n.div_ceil(b));
        let total = epochs * spe;
        let warmup = warm.min(epochs - 1) * spe;
        let mut peak: f64 = 0.0;
        for s in 1..=total {
            let v = lr_schedule(s, warmup, total, lr);
            prop_assert!((0.0..=lr * (1.0 + 1e-12)).contains(&v));
            if s > warmup && s < total {
                prop_assert!(lr_schedule(s + 1, warmup, total, lr) <= v + 1e-18);
            }
            peak = peak.max(v);
        }
        prop_assert!(lr_schedule(total, warmup, total, lr) <= 1e-8 * lr);
        if total > 1 {
            prop_assert!((peak - lr).abs() < lr * 0.5 || warmup == 0);
        }
    }
}
