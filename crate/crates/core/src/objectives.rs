//! Masked-prediction and offline-distillation losses.
//!
//! Both losses use the same per-row form, the squared distance between
//! l2-normalised vectors, `2 − 2·cos(a, b)`, averaged over rows. Gradients
//! are returned for the prediction side only; targets are treated as
//! constants.

use ndarray::{s, Array2, Axis};

use crate::error::{M2dsError, Result};
use crate::patching::MaskPlan;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_m2d: f64,
    pub lambda_off: f64,
    pub standardize_eps: f64,
    pub l2_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { lambda_m2d: 1.0, lambda_off: 1.0, standardize_eps: 1e-6, l2_eps: 1e-12 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_m2d) || !ok(self.lambda_off) {
            return Err(M2dsError::config("loss weights must be finite and >= 0"));
        }
        if self.lambda_m2d == 0.0 && self.lambda_off == 0.0 {
            return Err(M2dsError::config("lambda_m2d and lambda_off cannot both be zero"));
        }
        if !(self.standardize_eps > 0.0) || !(self.l2_eps > 0.0) {
            return Err(M2dsError::config("epsilons must be positive"));
        }
        Ok(())
    }
}

/// Per-row zero mean / unit variance over the feature axis (population
/// variance, eps inside the square root, no affine).
pub fn standardize_target(z_m: &Array2<f64>, eps: f64) -> Array2<f64> {
    let d = z_m.ncols() as f64;
    let mut out = z_m.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        row /= (var + eps).sqrt();
    }
    out
}

fn check_aligned(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(M2dsError::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(M2dsError::invalid("loss over zero rows"));
    }
    Ok(())
}

/// `2 − 2·⟨a, b⟩ / (‖a‖·‖b‖)` for one pair; a zero vector counts as
/// orthogonal to everything.
pub fn pair_loss(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    2.0 - 2.0 * dot / (na * nb)
}

/// Mean pair loss over rows and its gradient with respect to `pred`.
pub fn normalized_mse(pred: &Array2<f64>, target: &Array2<f64>, eps: f64) -> Result<(f64, Array2<f64>)> {
    check_aligned(pred, target)?;
    let n = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for ((a, b), mut g) in pred.rows().into_iter().zip(target.rows()).zip(grad.rows_mut()) {
        let na_raw = a.dot(&a).sqrt();
        let na = na_raw.max(eps);
        let nb = b.dot(&b).sqrt().max(eps);
        let cos = a.dot(&b) / (na * nb);
        total += 2.0 - 2.0 * cos;
        if na_raw > eps {
            // -2/|a| * (b̂ − cos·â)
            let scale = -2.0 / (na * n);
            g.zip_mut_with(&a, |gi, &ai| *gi = scale * (-cos * ai / na));
            g.zip_mut_with(&b, |gi, &bi| *gi += scale * bi / nb);
        } else {
            g.zip_mut_with(&b, |gi, &bi| *gi = -2.0 * bi / (nb * eps * n));
        }
    }
    Ok((total / n, grad))
}

pub fn loss_m2d(z_hat_m: &Array2<f64>, z_tilde_m: &Array2<f64>, eps: f64) -> Result<f64> {
    normalized_mse(z_hat_m, z_tilde_m, eps).map(|(l, _)| l)
}

pub fn loss_off(h: &Array2<f64>, h_hat: &Array2<f64>, eps: f64) -> Result<f64> {
    normalized_mse(h_hat, h, eps).map(|(l, _)| l)
}

/// Online predictions against standardised target outputs, rows aligned by
/// masked index order.
#[derive(Debug, Clone)]
pub struct MaskedPredictionBatch {
    pub z_hat_m: Array2<f64>,
    pub z_m: Array2<f64>,
    pub z_tilde_m: Array2<f64>,
}

impl MaskedPredictionBatch {
    pub fn new(z_hat_m: Array2<f64>, z_m: Array2<f64>, standardize_eps: f64) -> Result<Self> {
        check_aligned(&z_hat_m, &z_m)?;
        let z_tilde_m = standardize_target(&z_m, standardize_eps);
        Ok(Self { z_hat_m, z_m, z_tilde_m })
    }

    pub fn loss_and_grad(&self, l2_eps: f64) -> Result<(f64, Array2<f64>)> {
        normalized_mse(&self.z_hat_m, &self.z_tilde_m, l2_eps)
    }
}

/// Teacher features and projected student predictions cut to their common
/// frame count.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub h: Array2<f64>,
    pub h_hat: Array2<f64>,
}

impl FrameFeatures {
    pub fn aligned(h: &Array2<f64>, h_hat: &Array2<f64>) -> Result<Self> {
        if h.ncols() != h_hat.ncols() {
            return Err(M2dsError::shape(format!(
                "teacher width {} vs projection width {}",
                h.ncols(),
                h_hat.ncols()
            )));
        }
        let n = h.nrows().min(h_hat.nrows());
        if n == 0 {
            return Err(M2dsError::invalid("no overlapping frames between teacher and student"));
        }
        Ok(Self { h: h.slice(s![..n, ..]).to_owned(), h_hat: h_hat.slice(s![..n, ..]).to_owned() })
    }

    pub fn loss_and_grad(&self, l2_eps: f64) -> Result<(f64, Array2<f64>)> {
        normalized_mse(&self.h_hat, &self.h, l2_eps)
    }
}

/// Rebuilds the full token sequence (visible rows from `z_v`, masked rows
/// from `z_hat_m`) and concatenates the `n_freq` band vectors of each time
/// step: output row `t` is `[feat(f0, t), feat(f1, t), …]`.
pub fn reassemble_frame_order(
    z_v: &Array2<f64>,
    z_hat_m: &Array2<f64>,
    plan: &MaskPlan,
    n_freq: usize,
    n_time: usize,
) -> Result<Array2<f64>> {
    if z_v.nrows() + z_hat_m.nrows() != n_freq * n_time || plan.n_patches() != n_freq * n_time {
        return Err(M2dsError::shape(format!(
            "{} visible + {} masked rows vs a {n_freq}×{n_time} grid",
            z_v.nrows(),
            z_hat_m.nrows()
        )));
    }
    let full = crate::patching::reassemble(z_v, z_hat_m, plan)?;
    let d = full.ncols();
    full.into_shape_with_order((n_time, n_freq * d))
        .map_err(|e| M2dsError::shape(e.to_string()))
}

/// Adjoint of [`reassemble_frame_order`]: routes per-frame gradients back
/// to the visible and masked rows.
pub fn split_frame_grad(
    d_frames: &Array2<f64>,
    plan: &MaskPlan,
    n_freq: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n_time = d_frames.nrows();
    if !d_frames.ncols().is_multiple_of(n_freq) || n_freq * n_time != plan.n_patches() {
        return Err(M2dsError::shape("frame gradient does not match the grid"));
    }
    let d = d_frames.ncols() / n_freq;
    let full = d_frames.to_owned().into_shape_with_order((n_time * n_freq, d)).map_err(|e| M2dsError::shape(e.to_string()))?;
    Ok((full.select(Axis(0), &plan.visible_idx), full.select(Axis(0), &plan.masked_idx)))
}

/// Brings teacher frames onto the patch frame rate: block means when patch
/// frames are `k` teacher frames long, repetition when teacher frames are
/// `k` patch frames long. Trailing teacher frames that do not fill a block
/// are dropped.
pub fn align_teacher(h: &Array2<f64>, patch_stride_ms: f64, teacher_stride_ms: f64) -> Result<Array2<f64>> {
    if !(patch_stride_ms > 0.0 && teacher_stride_ms > 0.0) {
        return Err(M2dsError::invalid("strides must be positive"));
    }
    let as_int = |r: f64| {
        let k = r.round();
        if k >= 1.0 && (r - k).abs() < 1e-9 {
            Some(k as usize)
        } else {
            None
        }
    };
    let ratio = patch_stride_ms / teacher_stride_ms;
    if let Some(k) = as_int(ratio) {
        let n = h.nrows() / k;
        let mut out = Array2::zeros((n, h.ncols()));
        for t in 0..n {
            out.row_mut(t).assign(&h.slice(s![t * k..(t + 1) * k, ..]).mean_axis(Axis(0)).expect("k >= 1"));
        }
        return Ok(out);
    }
    if let Some(k) = as_int(1.0 / ratio) {
        let mut out = Array2::zeros((h.nrows() * k, h.ncols()));
        for (t, row) in h.rows().into_iter().enumerate() {
            for j in 0..k {
                out.row_mut(t * k + j).assign(&row);
            }
        }
        return Ok(out);
    }
    Err(M2dsError::invalid(format!(
        "patch stride {patch_stride_ms} ms and teacher stride {teacher_stride_ms} ms are not integer multiples"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_m2d: f64,
    pub l_off: f64,
    pub l_total: f64,
    pub lambda_m2d: f64,
    pub lambda_off: f64,
}

pub fn loss_total(cfg: &ObjectiveConfig, l_m2d: f64, l_off: f64) -> LossBreakdown {
    LossBreakdown {
        l_m2d,
        l_off,
        l_total: cfg.lambda_m2d * l_m2d + cfg.lambda_off * l_off,
        lambda_m2d: cfg.lambda_m2d,
        lambda_off: cfg.lambda_off,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn standardize_examples() {
        let z = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let s = standardize_target(&z, 1e-6);
        for (got, want) in s.iter().zip([-1.224_744_871, 0.0, 1.224_744_871]) {
            assert!((got - want).abs() < 1e-4);
        }
        let c = Array2::from_elem((2, 5), 0.1);
        assert!(standardize_target(&c, 1e-6).iter().all(|v| v.abs() < 1e-9));
        // rows with exactly zero mean and unit population variance
        let r = 2f64.sqrt();
        let fixed = Array2::from_shape_vec((2, 4), vec![-1.0, 1.0, -1.0, 1.0, -r, 0.0, r, 0.0]).unwrap();
        let again = standardize_target(&fixed, 1e-6);
        assert!((&fixed - &again).iter().all(|d| d.abs() < 1e-6));
        let rnd = standardize_target(&rand_mat(3, 16, 1), 1e-6);
        for row in rnd.rows() {
            let m = row.mean().unwrap();
            assert!(m.abs() < 1e-6);
            assert!((row.mapv(|v| (v - m).powi(2)).mean().unwrap() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn loss_reference_values() {
        let a = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        assert!(loss_m2d(&a, &a, 1e-12).unwrap().abs() < 1e-12);
        assert!((loss_m2d(&a, &(-&a), 1e-12).unwrap() - 4.0).abs() < 1e-12);
        let x = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let y = Array2::from_shape_vec((1, 2), vec![0.0, 3.0]).unwrap();
        assert!((loss_m2d(&x, &y, 1e-12).unwrap() - 2.0).abs() < 1e-12);
        let zero = Array2::zeros((1, 2));
        assert!((loss_m2d(&zero, &y, 1e-12).unwrap() - 2.0).abs() < 1e-12);
        assert!(loss_m2d(&x, &Array2::zeros((2, 2)), 1e-12).is_err());
    }

    #[test]
    fn loss_off_scale_invariant_and_cosine_oracle() {
        let h = rand_mat(6, 10, 2);
        assert!(loss_off(&h, &h, 1e-12).unwrap().abs() < 1e-12);
        assert!(loss_off(&h, &(&h * 3.7), 1e-12).unwrap().abs() < 1e-12);
        let h_hat = rand_mat(6, 10, 3);
        let mut expect = 0.0;
        for i in 0..6 {
            let (a, b) = (h_hat.row(i), h.row(i));
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in 0..10 {
                dot += a[j] * b[j];
                na += a[j] * a[j];
                nb += b[j] * b[j];
            }
            expect += 2.0 - 2.0 * dot / (na.sqrt() * nb.sqrt());
        }
        assert!((loss_off(&h, &h_hat, 1e-12).unwrap() - expect / 6.0).abs() < 1e-6);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = rand_mat(4, 5, 4);
        let t = rand_mat(4, 5, 5);
        let (_, g) = normalized_mse(&p, &t, 1e-12).unwrap();
        let eps = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.as_slice_mut().unwrap()[i] += eps;
            pm.as_slice_mut().unwrap()[i] -= eps;
            let num = (normalized_mse(&pp, &t, 1e-12).unwrap().0 - normalized_mse(&pm, &t, 1e-12).unwrap().0) / (2.0 * eps);
            assert!((g.as_slice().unwrap()[i] - num).abs() < 1e-7);
        }
    }

    #[test]
    fn reassembly_nf1_is_a_reorder() {
        let plan = MaskPlan::from_indices(4, vec![1, 3], vec![0, 2]).unwrap();
        let zv = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let zm = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let out = reassemble_frame_order(&zv, &zm, &plan, 1, 4).unwrap();
        assert_eq!(out.dim(), (4, 2));
        for t in 0..4 {
            assert_eq!(out.row(t).to_vec(), vec![t as f64; 2]);
        }
        assert!(reassemble_frame_order(&zv, &zm, &plan, 1, 5).is_err());
    }

    #[test]
    fn reassembly_concatenates_frequency_bands() {
        // nF = 2, d = 3: token (f, t) = row t*2 + f, value 10*t + f
        let plan = MaskPlan::from_indices(6, vec![0, 3, 4], vec![1, 2, 5]).unwrap();
        let tok = |i: usize| {
            let (t, f) = (i / 2, i % 2);
            vec![(10 * t + f) as f64; 3]
        };
        let zv = Array2::from_shape_vec((3, 3), [0, 3, 4].iter().flat_map(|&i| tok(i)).collect()).unwrap();
        let zm = Array2::from_shape_vec((3, 3), [1, 2, 5].iter().flat_map(|&i| tok(i)).collect()).unwrap();
        let out = reassemble_frame_order(&zv, &zm, &plan, 2, 3).unwrap();
        assert_eq!(out.dim(), (3, 6));
        for t in 0..3 {
            let mut want = tok(2 * t);
            want.extend(tok(2 * t + 1));
            assert_eq!(out.row(t).to_vec(), want);
        }
        let (dv, dm) = split_frame_grad(&out, &plan, 2).unwrap();
        assert_eq!(dv, zv);
        assert_eq!(dm, zm);
    }

    #[test]
    fn align_examples() {
        let h = Array2::from_shape_vec((4, 1), vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(align_teacher(&h, 20.0, 20.0).unwrap(), h);
        let pooled = align_teacher(&h, 40.0, 20.0).unwrap();
        assert_eq!(pooled.column(0).to_vec(), vec![1.0, 5.0]);
        let up = align_teacher(&h, 10.0, 20.0).unwrap();
        assert_eq!(up.column(0).to_vec(), vec![0.0, 0.0, 2.0, 2.0, 4.0, 4.0, 6.0, 6.0]);
        assert!(align_teacher(&h, 30.0, 20.0).is_err());
        assert!(align_teacher(&h, 0.0, 20.0).is_err());
    }

    #[test]
    fn objective_config_rules() {
        assert!(ObjectiveConfig { lambda_m2d: 0.0, lambda_off: 0.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { lambda_m2d: -1.0, ..Default::default() }.validate().is_err());
        let cfg = ObjectiveConfig { lambda_m2d: 1.0, lambda_off: 0.5, ..Default::default() };
        let b = loss_total(&cfg, 0.8, 1.2);
        assert!((b.l_total - 1.4).abs() < 1e-12);
        assert_eq!((b.lambda_m2d, b.lambda_off), (1.0, 0.5));
    }
}
