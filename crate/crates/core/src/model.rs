//! Online encoder + predictor (θ), EMA target encoder (ξ) and the frozen
//! offline teacher.

use ndarray::{Array2, Axis};

use crate::error::{M2dsError, Result};
use crate::nn::{join, trunc_normal, Linear, Mlp, Params, Transformer, INIT_STD};
use crate::patching::{MaskPlan, PatchConfig, PatchGrid, PositionalEncoding};
use crate::seeding;
use crate::teacher::{Teacher, TeacherSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    Transformer,
    Mlp,
}

impl PredictorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictorKind::Transformer => "transformer",
            PredictorKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(PredictorKind::Transformer),
            "mlp" => Ok(PredictorKind::Mlp),
            other => Err(M2dsError::config(format!("unknown predictor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub predictor: PredictorKind,
    pub predictor_depth: usize,
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        Self {
            depth: 4,
            embed_dim: 64,
            n_heads: 4,
            mlp_ratio: 4.0,
            predictor: PredictorKind::Transformer,
            predictor_depth: 2,
        }
    }

    /// ViT-Base sized encoder.
    pub fn base() -> Self {
        Self { depth: 12, embed_dim: 768, n_heads: 12, ..Self::tiny() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            other => Err(M2dsError::config(format!("unknown encoder preset `{other}`"))),
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(M2dsError::config("encoder depth must be >= 1"));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(M2dsError::config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(M2dsError::config("embed_dim must be divisible by 4 for 2D sin-cos positions"));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(M2dsError::config("mlp_ratio must be positive"));
        }
        if self.predictor == PredictorKind::Transformer && self.predictor_depth == 0 {
            return Err(M2dsError::config("transformer predictor needs depth >= 1"));
        }
        Ok(())
    }
}

/// Encoder f: patch embedding followed by a transformer stack. Positional
/// rows are added outside, when tokens are built.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub body: Transformer,
}

pub struct EncoderOutput {
    pub output: Array2<f64>,
    /// Input tokens, then one entry per block; the last is the normed output.
    pub layers: Vec<Array2<f64>>,
}

impl Encoder {
    pub fn init<R: rand::Rng + ?Sized>(cfg: &EncoderConfig, patch_len: usize, rng: &mut R) -> Self {
        Self {
            patch_embed: Linear::init(patch_len, cfg.embed_dim, rng),
            body: Transformer::init(cfg.depth, cfg.embed_dim, cfg.n_heads, cfg.mlp_hidden(), rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.patch_embed.out_dim()
    }

    pub fn depth(&self) -> usize {
        self.body.blocks.len()
    }

    pub fn embed(&self, grid: &PatchGrid, pos: &PositionalEncoding) -> Result<Array2<f64>> {
        crate::patching::embed_patches(grid, &self.patch_embed, pos)
    }

    pub fn forward(&self, tokens: &Array2<f64>, want_all_layers: bool) -> Result<EncoderOutput> {
        if tokens.ncols() != self.embed_dim() {
            return Err(M2dsError::shape(format!(
                "token width {} vs encoder width {}",
                tokens.ncols(),
                self.embed_dim()
            )));
        }
        let (output, layers, _) = self.body.forward(tokens, want_all_layers);
        Ok(EncoderOutput { output, layers })
    }
}

impl Params for Encoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        self.body.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        self.body.collect_mut(prefix, out);
    }
}

/// Predictor g. The transformer form sees the whole sequence; the MLP form
/// maps each position independently.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Transformer { body: Transformer, head: Linear },
    Mlp { mlp: Mlp, head: Linear },
}

impl Predictor {
    pub fn init<R: rand::Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        match cfg.predictor {
            PredictorKind::Transformer => Predictor::Transformer {
                body: Transformer::init(cfg.predictor_depth, d, cfg.n_heads, cfg.mlp_hidden(), rng),
                head: Linear::init(d, d, rng),
            },
            PredictorKind::Mlp => Predictor::Mlp { mlp: Mlp::init(d, cfg.mlp_hidden(), rng), head: Linear::init(d, d, rng) },
        }
    }
}

impl Params for Predictor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        match self {
            Predictor::Transformer { body, head } => {
                body.collect(prefix, out);
                head.collect(&join(prefix, "head"), out);
            }
            Predictor::Mlp { mlp, head } => {
                mlp.collect(&join(prefix, "mlp"), out);
                head.collect(&join(prefix, "head"), out);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        match self {
            Predictor::Transformer { body, head } => {
                body.collect_mut(prefix, out);
                head.collect_mut(&join(prefix, "head"), out);
            }
            Predictor::Mlp { mlp, head } => {
                mlp.collect_mut(&join(prefix, "mlp"), out);
                head.collect_mut(&join(prefix, "head"), out);
            }
        }
    }
}

/// θ: everything updated by gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub predictor: Predictor,
    /// `1 × d` learnable mask token.
    pub mask_token: Array2<f64>,
    /// Per-frame projection from `n_freq_patches · d` to the teacher width.
    pub proj: Linear,
}

impl Params for ModelParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.predictor.collect(&join(prefix, "predictor"), out);
        out.push((join(prefix, "mask_token"), &self.mask_token));
        self.proj.collect(&join(prefix, "proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.predictor.collect_mut(&join(prefix, "predictor"), out);
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        self.proj.collect_mut(&join(prefix, "proj"), out);
    }
}

/// `ẑ_m = g(concat(z_v, m) + p)` restricted to masked positions, rows in
/// `plan.masked_idx` order.
pub fn predictor_forward(
    params: &ModelParams,
    z_v: &Array2<f64>,
    plan: &MaskPlan,
    pos: &PositionalEncoding,
) -> Result<Array2<f64>> {
    if z_v.nrows() != plan.visible_idx.len() || pos.len() != plan.n_patches() {
        return Err(M2dsError::shape(format!(
            "{} visible rows, plan has {} visible of {}, positional table has {} rows",
            z_v.nrows(),
            plan.visible_idx.len(),
            plan.n_patches(),
            pos.len()
        )));
    }
    let d = params.mask_token.ncols();
    if z_v.ncols() != d || pos.table.ncols() != d {
        return Err(M2dsError::shape("predictor input width mismatch"));
    }
    let mut seq = pos.table.clone();
    for (r, &i) in plan.visible_idx.iter().enumerate() {
        seq.row_mut(i).zip_mut_with(&z_v.row(r), |s, &z| *s += z);
    }
    for &i in &plan.masked_idx {
        seq.row_mut(i).zip_mut_with(&params.mask_token.row(0), |s, &m| *s += m);
    }
    let out = match &params.predictor {
        Predictor::Transformer { body, head } => head.forward(&body.forward(&seq, false).0),
        Predictor::Mlp { mlp, head } => head.forward(&mlp.forward(&seq).0),
    };
    Ok(out.select(Axis(0), &plan.masked_idx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub tau: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { tau: 0.996 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(M2dsError::config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// `ξ ← τ·ξ + (1 − τ)·θ` over every tensor; θ is only read.
pub fn ema_update<P: Params>(target: &mut P, online: &P, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(M2dsError::config(format!("tau {tau} outside [0, 1]")));
    }
    let online = online.params();
    let mut target = target.params_mut();
    if online.len() != target.len() {
        return Err(M2dsError::shape("target and online have different tensor counts"));
    }
    for ((tn, t), (on, o)) in target.iter().zip(&online) {
        if tn != on || t.dim() != o.dim() {
            return Err(M2dsError::shape(format!("{tn} {:?} vs {on} {:?}", t.dim(), o.dim())));
        }
    }
    for ((_, t), (_, o)) in target.iter_mut().zip(&online) {
        t.zip_mut_with(o, |x, &y| *x = tau * *x + (1.0 - tau) * y);
    }
    Ok(())
}

pub struct ModelState {
    pub enc_cfg: EncoderConfig,
    pub patch_cfg: PatchConfig,
    pub n_mels: usize,
    pub online: ModelParams,
    /// ξ: encoder only.
    pub target: Encoder,
    pub teacher: Option<Box<dyn Teacher>>,
    pub teacher_spec: Option<TeacherSpec>,
    pub step: usize,
}

impl std::fmt::Debug for ModelState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelState")
            .field("enc_cfg", &self.enc_cfg)
            .field("patch_cfg", &self.patch_cfg)
            .field("teacher", &self.teacher_spec)
            .field("step", &self.step)
            .finish()
    }
}

impl ModelState {
    pub fn n_freq_patches(&self) -> usize {
        self.n_mels / self.patch_cfg.patch_freq
    }

    pub fn teacher_dim(&self) -> usize {
        self.online.proj.out_dim()
    }
}

/// Builds θ from truncated-normal weights (std 0.02, zero biases) and
/// copies its encoder into ξ.
pub fn init_model(
    enc_cfg: &EncoderConfig,
    patch_cfg: &PatchConfig,
    n_mels: usize,
    teacher: Option<(TeacherSpec, Box<dyn Teacher>)>,
    seed: u64,
) -> Result<ModelState> {
    enc_cfg.validate()?;
    patch_cfg.validate(n_mels)?;
    if patch_cfg.embed_dim != enc_cfg.embed_dim {
        return Err(M2dsError::config(format!(
            "patch embed_dim {} vs encoder embed_dim {}",
            patch_cfg.embed_dim, enc_cfg.embed_dim
        )));
    }
    let n_freq = n_mels / patch_cfg.patch_freq;
    let d = enc_cfg.embed_dim;
    let teacher_dim = match &teacher {
        Some((_, t)) => {
            if t.feature_dim() == 0 || !(t.frame_stride_ms() > 0.0) {
                return Err(M2dsError::config("teacher must declare a positive feature width and stride"));
            }
            t.feature_dim()
        }
        None => d,
    };
    let mut rng = seeding::rng_for(seed, &[seeding::STREAM_INIT]);
    let encoder = Encoder::init(enc_cfg, patch_cfg.patch_len(), &mut rng);
    let predictor = Predictor::init(enc_cfg, &mut rng);
    let mask_token = trunc_normal(1, d, INIT_STD, &mut rng);
    let proj = Linear::init(n_freq * d, teacher_dim, &mut rng);
    let target = encoder.clone();
    let (teacher_spec, teacher) = match teacher {
        Some((s, t)) => (Some(s), Some(t)),
        None => (None, None),
    };
    Ok(ModelState {
        enc_cfg: enc_cfg.clone(),
        patch_cfg: *patch_cfg,
        n_mels,
        online: ModelParams { encoder, predictor, mask_token, proj },
        target,
        teacher,
        teacher_spec,
        step: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::MeanPoolTeacher;
    use rand::{Rng, SeedableRng};

    fn tiny_state(seed: u64) -> ModelState {
        let patch = PatchConfig { patch_freq: 80, patch_time: 4, embed_dim: 64 };
        let t = MeanPoolTeacher::new(2, 10.0, 80);
        init_model(&EncoderConfig::tiny(), &patch, 80, Some((TeacherSpec::MeanPool { k: 2 }, Box::new(t))), seed)
            .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_target_copies_encoder() {
        let a = tiny_state(3);
        let b = tiny_state(3);
        assert_eq!(a.online, b.online);
        assert_eq!(a.target, a.online.encoder);
        assert_ne!(tiny_state(4).online, a.online);
    }

    #[test]
    fn tiny_parameter_count_matches_closed_form() {
        let s = tiny_state(0);
        let (d, h, depth, pd, patch_len, nf, dt) = (64usize, 256usize, 4usize, 2usize, 320usize, 1usize, 80usize);
        let block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        let encoder = patch_len * d + d + depth * block + 2 * d;
        let predictor = pd * block + 2 * d + d * d + d;
        let total = encoder + predictor + d + nf * d * dt + dt;
        assert_eq!(s.online.num_params(), total);
        assert_eq!(s.target.num_params(), encoder);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let patch = PatchConfig { patch_freq: 80, patch_time: 4, embed_dim: 64 };
        let zero_depth = EncoderConfig { depth: 0, ..EncoderConfig::tiny() };
        assert!(init_model(&zero_depth, &patch, 80, None, 0).is_err());
        let bad_heads = EncoderConfig { n_heads: 5, ..EncoderConfig::tiny() };
        assert!(init_model(&bad_heads, &patch, 80, None, 0).is_err());
        let bad_patch = PatchConfig { patch_freq: 30, ..patch };
        assert!(init_model(&EncoderConfig::tiny(), &bad_patch, 80, None, 0).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let s = tiny_state(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let tokens = Array2::from_shape_simple_fn((4, 64), || rng.gen_range(-1.0..1.0));
        let perm = [2usize, 0, 3, 1];
        let permuted = tokens.select(ndarray::Axis(0), &perm);
        let out = s.online.encoder.forward(&tokens, false).unwrap().output;
        let out_p = s.online.encoder.forward(&permuted, false).unwrap().output;
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..64 {
                assert!((out_p[[i, j]] - out[[p, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn encoder_smoke_and_layer_stack() {
        let s = tiny_state(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let one = Array2::from_shape_simple_fn((1, 64), || rng.gen_range(-1.0..1.0));
        let out = s.online.encoder.forward(&one, true).unwrap();
        assert!(out.output.iter().all(|v| v.is_finite()));
        // LayerNorm output with unit gamma has norm sqrt(d) at most
        assert!(out.output.iter().map(|v| v * v).sum::<f64>().sqrt() <= 8.0 + 1e-9);
        assert_eq!(out.layers.len(), s.enc_cfg.depth + 1);
        assert!(s.online.encoder.forward(&Array2::zeros((2, 32)), false).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let s = tiny_state(7);
        let theta = tiny_state(8).online.encoder;
        let mut xi = s.target.clone();
        ema_update(&mut xi, &theta, 1.0).unwrap();
        assert_eq!(xi, s.target);
        ema_update(&mut xi, &theta, 0.0).unwrap();
        assert_eq!(xi, theta);

        let mut x = Linear { w: Array2::ones((1, 1)), b: Array2::zeros((1, 1)) };
        let zero = Linear::zeros(1, 1);
        ema_update(&mut x, &zero, 0.99).unwrap();
        assert!((x.w[[0, 0]] - 0.99).abs() < 1e-15);
        assert!(ema_update(&mut x, &Linear::zeros(2, 1), 0.5).is_err());
        assert!(ema_update(&mut x, &zero, 1.5).is_err());
    }

    #[test]
    fn ema_contracts_geometrically() {
        let theta = Linear { w: Array2::from_elem((1, 1), 3.0), b: Array2::zeros((1, 1)) };
        let mut xi = Linear { w: Array2::from_elem((1, 1), -1.0), b: Array2::zeros((1, 1)) };
        let tau: f64 = 0.9;
        for n in 1..=50 {
            ema_update(&mut xi, &theta, tau).unwrap();
            let gap = (xi.w[[0, 0]] - 3.0).abs();
            assert!((gap - 4.0 * tau.powi(n)).abs() < 1e-12);
        }
    }

    #[test]
    fn predictor_rows_follow_masked_indices() {
        let s = tiny_state(9);
        // 80x4 patches on 32 frames: 8 tokens
        let pos = PositionalEncoding::new(1, 8, 64).unwrap();
        let plan = MaskPlan::from_indices(8, vec![0, 2, 5], vec![1, 3, 4, 6, 7]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let z_v = Array2::from_shape_simple_fn((3, 64), || rng.gen_range(-1.0..1.0));
        let z_hat = predictor_forward(&s.online, &z_v, &plan, &pos).unwrap();
        assert_eq!(z_hat.nrows(), 5);
        // identical mask-token inputs still give distinct outputs
        for i in 0..5 {
            for j in i + 1..5 {
                let diff: f64 = (&z_hat.row(i) - &z_hat.row(j)).iter().map(|v| v.abs()).sum();
                assert!(diff > 1e-6);
            }
        }
        let shuffled = MaskPlan { masked_idx: vec![7, 1, 4, 3, 6], ..plan.clone() };
        let again = predictor_forward(&s.online, &z_v, &shuffled, &pos).unwrap();
        for (r, &i) in shuffled.masked_idx.iter().enumerate() {
            let k = plan.masked_idx.iter().position(|&x| x == i).unwrap();
            assert_eq!(again.row(r), z_hat.row(k));
        }
        assert!(predictor_forward(&s.online, &z_v.slice(ndarray::s![..2, ..]).to_owned(), &plan, &pos).is_err());
    }
}
