//! Per-sample forward and backward pass of the joint objective.
//!
//! The noisy input feeds the online encoder, the predictor and the target
//! encoder; the clean input only reaches the teacher. Gradients flow into
//! the online parameters alone.

use ndarray::{Array2, Axis};

use crate::error::{M2dsError, Result};
use crate::frontend::LogMelSpectrogram;
use crate::model::{ModelParams, ModelState, Predictor};
use crate::nn::{MlpCache, Params, TransformerCache};
use crate::objectives::{
    align_teacher, loss_total, reassemble_frame_order, split_frame_grad, FrameFeatures, LossBreakdown,
    MaskedPredictionBatch, ObjectiveConfig,
};
use crate::patching::{patchify, MaskPlan, PositionalEncoding};

enum PredCache {
    Transformer(TransformerCache),
    Mlp(MlpCache),
}

pub struct SampleResult {
    pub losses: LossBreakdown,
    pub grad: ModelParams,
    pub teacher_invoked: bool,
}

fn scatter_rows(dst: &mut Array2<f64>, idx: &[usize], rows: &Array2<f64>) {
    for (r, &i) in idx.iter().enumerate() {
        dst.row_mut(i).assign(&rows.row(r));
    }
}

/// Forward and backward for one (noisy, clean) pair under a mask plan.
/// `grad` holds the gradient of the weighted total loss.
pub fn forward_backward(
    state: &ModelState,
    noisy: &LogMelSpectrogram,
    clean: &LogMelSpectrogram,
    plan: &MaskPlan,
    obj: &ObjectiveConfig,
) -> Result<SampleResult> {
    if noisy.values().dim() != clean.values().dim() {
        return Err(M2dsError::shape("noisy and clean inputs differ in shape"));
    }
    let grid = patchify(noisy, &state.patch_cfg)?;
    let (n_freq, n_time) = (grid.n_freq_patches, grid.n_time_patches);
    if plan.n_patches() != grid.len() {
        return Err(M2dsError::shape(format!("mask plan over {} patches, input has {}", plan.n_patches(), grid.len())));
    }
    let online = &state.online;
    let d = online.encoder.embed_dim();
    let pos = PositionalEncoding::new(n_freq, n_time, d)?;
    let (vis, msk) = (&plan.visible_idx, &plan.masked_idx);

    // online encoder on visible tokens
    let patches_v = grid.patches.select(Axis(0), vis);
    let x_v = online.encoder.patch_embed.forward(&patches_v) + &pos.rows(vis);
    let (z_v, _, enc_cache) = online.encoder.body.forward(&x_v, false);

    // predictor over the full sequence
    let mut seq = Array2::zeros((grid.len(), d));
    scatter_rows(&mut seq, vis, &z_v);
    for &i in msk {
        seq.row_mut(i).assign(&online.mask_token.row(0));
    }
    seq += &pos.table;
    let (pred_hidden, pred_out, pred_cache) = match &online.predictor {
        Predictor::Transformer { body, head } => {
            let (y, _, c) = body.forward(&seq, false);
            let out = head.forward(&y);
            (y, out, PredCache::Transformer(c))
        }
        Predictor::Mlp { mlp, head } => {
            let (y, c) = mlp.forward(&seq);
            let out = head.forward(&y);
            (y, out, PredCache::Mlp(c))
        }
    };
    let z_hat_m = pred_out.select(Axis(0), msk);

    // target encoder on masked patches of the same noisy input
    let x_m = state.target.patch_embed.forward(&grid.patches.select(Axis(0), msk)) + &pos.rows(msk);
    let (z_m, _, _) = state.target.body.forward(&x_m, false);
    let batch = MaskedPredictionBatch::new(z_hat_m, z_m, obj.standardize_eps)?;
    let (l_m2d, d_zhat_m2d) = batch.loss_and_grad(obj.l2_eps)?;

    let mut grad = online.zeros_like();
    let mut d_zhat_m = d_zhat_m2d * obj.lambda_m2d;
    let mut d_z_v = Array2::zeros(z_v.dim());
    let mut l_off = 0.0;
    let mut teacher_invoked = false;

    if obj.lambda_off > 0.0 {
        let teacher = state
            .teacher
            .as_ref()
            .ok_or_else(|| M2dsError::config("lambda_off > 0 requires a teacher"))?;
        teacher_invoked = true;
        let frames = reassemble_frame_order(&z_v, &batch.z_hat_m, plan, n_freq, n_time)?;
        let h_hat = online.proj.forward(&frames);
        let h = teacher.forward(clean)?;
        let patch_stride_ms = state.patch_cfg.patch_time as f64 * noisy.config().hop_ms;
        let h = align_teacher(&h, patch_stride_ms, teacher.frame_stride_ms())?;
        let ff = FrameFeatures::aligned(&h, &h_hat)?;
        let (loss, d_cut) = ff.loss_and_grad(obj.l2_eps)?;
        l_off = loss;
        let mut d_h_hat = Array2::zeros(h_hat.dim());
        d_h_hat.slice_mut(ndarray::s![..d_cut.nrows(), ..]).assign(&(d_cut * obj.lambda_off));
        let d_frames = online.proj.backward(&frames, &d_h_hat, &mut grad.proj);
        let (dv, dm) = split_frame_grad(&d_frames, plan, n_freq)?;
        d_z_v += &dv;
        d_zhat_m += &dm;
    }

    // predictor backward
    let mut d_out = Array2::zeros(pred_out.dim());
    scatter_rows(&mut d_out, msk, &d_zhat_m);
    let d_seq = match (&online.predictor, &mut grad.predictor, &pred_cache) {
        (Predictor::Transformer { body, head }, Predictor::Transformer { body: gb, head: gh }, PredCache::Transformer(c)) => {
            let dy = head.backward(&pred_hidden, &d_out, gh);
            body.backward(c, &dy, gb)
        }
        (Predictor::Mlp { mlp, head }, Predictor::Mlp { mlp: gm, head: gh }, PredCache::Mlp(c)) => {
            let dy = head.backward(&pred_hidden, &d_out, gh);
            mlp.backward(c, &dy, gm)
        }
        _ => unreachable!("gradient and cache mirror the parameter layout"),
    };
    d_z_v += &d_seq.select(Axis(0), vis);
    grad.mask_token += &d_seq.select(Axis(0), msk).sum_axis(Axis(0)).insert_axis(Axis(0));

    // encoder backward
    let d_x_v = online.encoder.body.backward(&enc_cache, &d_z_v, &mut grad.encoder.body);
    online.encoder.patch_embed.backward(&patches_v, &d_x_v, &mut grad.encoder.patch_embed);

    Ok(SampleResult { losses: loss_total(obj, l_m2d, l_off), grad, teacher_invoked })
}

/// Online-encoder forward on every patch of a clip, returning the layer
/// stack (embedding output first).
pub fn encode_all_layers(params: &ModelParams, state: &ModelState, spec: &LogMelSpectrogram) -> Result<Vec<Array2<f64>>> {
    let grid = patchify(spec, &state.patch_cfg)?;
    let pos = PositionalEncoding::new(grid.n_freq_patches, grid.n_time_patches, params.encoder.embed_dim())?;
    let tokens = params.encoder.embed(&grid, &pos)?;
    Ok(params.encoder.forward(&tokens, true)?.layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use crate::model::{init_model, EncoderConfig, PredictorKind};
    use crate::patching::{sample_mask, PatchConfig};
    use crate::teacher::{MeanPoolTeacher, TeacherSpec};
    use rand::{Rng, SeedableRng};

    fn spec(n_mels: usize, frames: usize, seed: u64) -> LogMelSpectrogram {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = FrontendConfig { n_mels, ..FrontendConfig::default() };
        LogMelSpectrogram::new(Array2::from_shape_simple_fn((n_mels, frames), || rng.gen_range(-1.0..1.0)), cfg).unwrap()
    }

    /// 16 mels, 8×2 patches, 8 frames: a 2×4 grid of 8 tokens.
    fn setup(kind: PredictorKind) -> ModelState {
        let enc = EncoderConfig { predictor: kind, ..EncoderConfig::tiny() };
        let patch = PatchConfig { patch_freq: 8, patch_time: 2, embed_dim: enc.embed_dim };
        let teacher = MeanPoolTeacher::new(2, 10.0, 16);
        let mut state =
            init_model(&enc, &patch, 16, Some((TeacherSpec::MeanPool { k: 2 }, Box::new(teacher))), 5).unwrap();
        // push weights away from the tiny init so every path matters
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for (_, p) in state.online.params_mut() {
            p.mapv_inplace(|v| v * 5.0 + rng.gen_range(-0.05..0.05));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        for (_, p) in state.target.params_mut() {
            p.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
        }
        state
    }

    fn check_gradients(kind: PredictorKind) {
        let mut state = setup(kind);
        let noisy = spec(16, 8, 1);
        let clean = spec(16, 8, 2);
        let plan = sample_mask(8, 0.6, 3).unwrap();
        let obj = ObjectiveConfig { lambda_m2d: 1.0, lambda_off: 0.7, ..Default::default() };
        let res = forward_backward(&state, &noisy, &clean, &plan, &obj).unwrap();
        let analytic: Vec<(String, Array2<f64>)> =
            res.grad.params().into_iter().map(|(n, g)| (n, g.clone())).collect();
        let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let eps = 1e-5;
        for (pi, name) in names.iter().enumerate() {
            let g = &analytic[pi].1;
            let len = g.len();
            let picks: Vec<usize> = (0..6.min(len)).map(|_| rng.gen_range(0..len)).collect();
            let (mut num_sq, mut diff_sq) = (0.0, 0.0);
            for &k in &picks {
                let eval = |state: &mut ModelState, delta: f64| {
                    state.online.params_mut()[pi].1.as_slice_mut().unwrap()[k] += delta;
                    let l = forward_backward(state, &noisy, &clean, &plan, &obj).unwrap().losses.l_total;
                    state.online.params_mut()[pi].1.as_slice_mut().unwrap()[k] -= delta;
                    l
                };
                let num = (eval(&mut state, eps) - eval(&mut state, -eps)) / (2.0 * eps);
                let ana = g.as_slice().unwrap()[k];
                num_sq += num * num;
                diff_sq += (num - ana).powi(2);
            }
            let rel = diff_sq.sqrt() / num_sq.sqrt().max(1e-8);
            assert!(rel <= 1e-4 || diff_sq.sqrt() < 1e-9, "{name}: relative error {rel:e}");
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        check_gradients(PredictorKind::Transformer);
    }

    #[test]
    fn joint_gradients_match_finite_differences_mlp_predictor() {
        check_gradients(PredictorKind::Mlp);
    }

    #[test]
    fn projection_gets_no_gradient_without_distillation() {
        let state = setup(PredictorKind::Transformer);
        let noisy = spec(16, 8, 1);
        let plan = sample_mask(8, 0.6, 3).unwrap();
        let obj = ObjectiveConfig { lambda_m2d: 1.0, lambda_off: 0.0, ..Default::default() };
        let res = forward_backward(&state, &noisy, &noisy, &plan, &obj).unwrap();
        assert!(!res.teacher_invoked);
        assert_eq!(res.losses.l_off, 0.0);
        assert!(res.grad.proj.w.iter().all(|&v| v == 0.0));
        let with = ObjectiveConfig { lambda_off: 1.0, ..obj };
        let res = forward_backward(&state, &noisy, &noisy, &plan, &with).unwrap();
        assert!(res.teacher_invoked);
        assert!(res.grad.proj.w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn distillation_without_teacher_is_an_error() {
        let enc = EncoderConfig::tiny();
        let patch = PatchConfig { patch_freq: 8, patch_time: 2, embed_dim: 64 };
        let state = init_model(&enc, &patch, 16, None, 1).unwrap();
        let x = spec(16, 8, 1);
        let plan = sample_mask(8, 0.6, 3).unwrap();
        assert!(forward_backward(&state, &x, &x, &plan, &ObjectiveConfig::default()).is_err());
        let m2d_only = ObjectiveConfig { lambda_off: 0.0, ..Default::default() };
        assert!(forward_backward(&state, &x, &x, &plan, &m2d_only).is_ok());
    }
}
