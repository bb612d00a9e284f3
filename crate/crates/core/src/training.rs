//! Joint pre-training loop.
//!
//! Batches are a pure function of `(seed, epoch, step)`, per-item work runs
//! in parallel and is reduced in item order, and every parameter update is
//! serialized, so runs (and resumed runs) are bit-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_key_values, write_key_values};
use crate::error::{M2dsError, Result};
use crate::frontend::{mix_noisy, normalize, sample_noise_segment, FrontendConfig, LogMelSpectrogram, NormStats, StatsAccumulator};
use crate::joint::forward_backward;
use crate::model::{ema_update, init_model, EmaConfig, EncoderConfig, ModelParams, ModelState, PredictorKind};
use crate::nn::Params;
use crate::objectives::{LossBreakdown, ObjectiveConfig};
use crate::patching::{sample_mask, PatchConfig, DEFAULT_MASK_RATIO};
use crate::seeding::{child_seed, rng_for, STREAM_BATCH, STREAM_MASK, STREAM_STATS};
use crate::teacher::TeacherSpec;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub tau: EmaConfig,
    pub input_duration_s: f64,
    pub alpha: f64,
    pub mask_ratio: f64,
    pub objective: ObjectiveConfig,
    pub seed: u64,
    /// Gradient-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop (and checkpoint) after this global step, as if interrupted.
    /// Does not change the schedule.
    pub stop_after_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            warmup_epochs: 3,
            batch_size: 16,
            base_lr: 3e-4,
            weight_decay: 0.05,
            tau: EmaConfig::default(),
            input_duration_s: 2.08,
            alpha: 0.2,
            mask_ratio: DEFAULT_MASK_RATIO,
            objective: ObjectiveConfig::default(),
            seed: 0,
            grad_clip: Some(3.0),
            checkpoint_every: 1,
            stop_after_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, frontend: &FrontendConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(M2dsError::config("epochs and batch_size must be >= 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(M2dsError::config(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(M2dsError::config("base_lr must be > 0 and weight_decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(M2dsError::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(M2dsError::config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(M2dsError::config("grad_clip must be > 0"));
            }
        }
        self.tau.validate()?;
        self.objective.validate()?;
        frontend.frames_for_duration(self.input_duration_s)?;
        Ok(())
    }
}

/// Everything needed to reproduce a pre-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub frontend: FrontendConfig,
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub teacher: Option<TeacherSpec>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::tiny();
        Self {
            frontend: FrontendConfig::default(),
            patch: PatchConfig { patch_freq: 80, patch_time: 4, embed_dim: encoder.embed_dim },
            encoder,
            train: TrainConfig::default(),
            teacher: Some(TeacherSpec::MeanPool { k: 2 }),
        }
    }
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *slot = v.trim().parse().map_err(|_| M2dsError::config(format!("`{key}`: cannot parse `{v}`")))?;
        }
        Ok(())
    }

    fn take_opt<T: std::str::FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            let v = v.trim();
            *slot = if v == "none" {
                None
            } else {
                Some(v.parse().map_err(|_| M2dsError::config(format!("`{key}`: cannot parse `{v}`")))?)
            };
        }
        Ok(())
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.patch.validate(self.frontend.n_mels)?;
        if self.patch.embed_dim != self.encoder.embed_dim {
            return Err(M2dsError::config("patch embed_dim must equal encoder embed_dim"));
        }
        self.train.validate(&self.frontend)?;
        let frames = self.frontend.frames_for_duration(self.train.input_duration_s)?;
        let (nf, nt) = self.patch.grid_dims(self.frontend.n_mels, frames)?;
        if nf * nt < 2 {
            return Err(M2dsError::config("input yields fewer than two patches"));
        }
        if self.train.objective.lambda_off > 0.0 && self.teacher.is_none() {
            return Err(M2dsError::config("lambda_off > 0 requires a teacher"));
        }
        Ok(())
    }

    pub fn input_frames(&self) -> Result<usize> {
        self.frontend.frames_for_duration(self.train.input_duration_s)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let f = &self.frontend;
        let e = &self.encoder;
        let t = &self.train;
        let o = &t.objective;
        let pairs: Vec<(&str, String)> = vec![
            ("frontend.sample_rate", f.sample_rate.to_string()),
            ("frontend.window_ms", f.window_ms.to_string()),
            ("frontend.hop_ms", f.hop_ms.to_string()),
            ("frontend.n_mels", f.n_mels.to_string()),
            ("frontend.fmin", f.fmin.to_string()),
            ("frontend.fmax", f.fmax.to_string()),
            ("frontend.log_floor", f.log_floor.to_string()),
            ("patch.freq", self.patch.patch_freq.to_string()),
            ("patch.time", self.patch.patch_time.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.embed_dim", e.embed_dim.to_string()),
            ("encoder.n_heads", e.n_heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.predictor", e.predictor.as_str().to_string()),
            ("encoder.predictor_depth", e.predictor_depth.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.tau", t.tau.tau.to_string()),
            ("train.duration", t.input_duration_s.to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.mask_ratio", t.mask_ratio.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.grad_clip", opt_to_string(&t.grad_clip)),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.stop_after_steps", opt_to_string(&t.stop_after_steps)),
            ("objective.lambda_m2d", o.lambda_m2d.to_string()),
            ("objective.lambda_off", o.lambda_off.to_string()),
            ("objective.standardize_eps", o.standardize_eps.to_string()),
            ("objective.l2_eps", o.l2_eps.to_string()),
            ("teacher", opt_to_string(&self.teacher)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let pairs = self.to_pairs();
        write_key_values(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    /// Applies `key=value` settings on top of `self`. Unknown keys are an
    /// error.
    pub fn apply(&mut self, settings: &BTreeMap<String, String>) -> Result<()> {
        let mut fl = Fields { map: settings.clone() };
        for (alias, key) in [("patch_freq", "patch.freq"), ("patch_time", "patch.time")] {
            if let Some(v) = fl.map.remove(alias) {
                fl.map.insert(key.to_string(), v);
            }
        }
        if let Some(name) = fl.map.remove("encoder.preset") {
            self.encoder = EncoderConfig::preset(&name)?;
        }
        let f = &mut self.frontend;
        fl.take("frontend.sample_rate", &mut f.sample_rate)?;
        fl.take("frontend.window_ms", &mut f.window_ms)?;
        fl.take("frontend.hop_ms", &mut f.hop_ms)?;
        fl.take("frontend.n_mels", &mut f.n_mels)?;
        fl.take("frontend.fmin", &mut f.fmin)?;
        fl.take("frontend.fmax", &mut f.fmax)?;
        fl.take("frontend.log_floor", &mut f.log_floor)?;
        fl.take("patch.freq", &mut self.patch.patch_freq)?;
        fl.take("patch.time", &mut self.patch.patch_time)?;
        let e = &mut self.encoder;
        fl.take("encoder.depth", &mut e.depth)?;
        fl.take("encoder.embed_dim", &mut e.embed_dim)?;
        fl.take("encoder.n_heads", &mut e.n_heads)?;
        fl.take("encoder.mlp_ratio", &mut e.mlp_ratio)?;
        if let Some(p) = fl.map.remove("encoder.predictor") {
            e.predictor = PredictorKind::parse(&p)?;
        }
        fl.take("encoder.predictor_depth", &mut e.predictor_depth)?;
        self.patch.embed_dim = e.embed_dim;
        let t = &mut self.train;
        fl.take("train.epochs", &mut t.epochs)?;
        fl.take("train.warmup_epochs", &mut t.warmup_epochs)?;
        fl.take("train.batch_size", &mut t.batch_size)?;
        fl.take("train.base_lr", &mut t.base_lr)?;
        fl.take("train.weight_decay", &mut t.weight_decay)?;
        fl.take("train.tau", &mut t.tau.tau)?;
        fl.take("train.duration", &mut t.input_duration_s)?;
        fl.take("train.alpha", &mut t.alpha)?;
        fl.take("train.mask_ratio", &mut t.mask_ratio)?;
        fl.take("train.seed", &mut t.seed)?;
        fl.take_opt("train.grad_clip", &mut t.grad_clip)?;
        fl.take("train.checkpoint_every", &mut t.checkpoint_every)?;
        fl.take_opt("train.stop_after_steps", &mut t.stop_after_steps)?;
        let o = &mut t.objective;
        fl.take("objective.lambda_m2d", &mut o.lambda_m2d)?;
        fl.take("objective.lambda_off", &mut o.lambda_off)?;
        fl.take("objective.standardize_eps", &mut o.standardize_eps)?;
        fl.take("objective.l2_eps", &mut o.l2_eps)?;
        if let Some(v) = fl.map.remove("teacher") {
            self.teacher = match v.trim() {
                "none" => None,
                s => Some(TeacherSpec::parse(s)?),
            };
        }
        if let Some(k) = fl.map.keys().next() {
            return Err(M2dsError::config(format!("unknown config key `{k}`")));
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_key_values(text)?)?;
        Ok(cfg)
    }
}

/// One training example: index-aligned noisy and clean crops, normalized
/// with the same statistics, plus the seed of its mask plan.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub noisy: LogMelSpectrogram,
    pub clean: LogMelSpectrogram,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStepRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

impl TrainStepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{} {:e} {:e} {:e} {:e} {:e}",
            self.step, self.losses.l_m2d, self.losses.l_off, self.losses.l_total, self.lr, self.grad_norm
        )
    }
}

pub const LOG_HEADER: &str = "step l_m2d l_off l_total lr grad_norm";

pub fn steps_per_epoch(n_clips: usize, batch_size: usize) -> usize {
    n_clips.div_ceil(batch_size)
}

/// Learning rate for the `step`-th update (1-based): linear warmup to
/// `base_lr` over `warmup_steps`, then half-cosine decay to zero at
/// `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    if step <= warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn random_crop<R: Rng + ?Sized>(clip: &LogMelSpectrogram, frames: usize, rng: &mut R) -> Result<LogMelSpectrogram> {
    if clip.n_frames() < frames {
        let id = clip.origin.as_ref().map_or("?", |o| o.clip_id.as_str());
        return Err(M2dsError::invalid(format!(
            "speech clip `{id}` has {} frames, input needs {frames}",
            clip.n_frames()
        )));
    }
    let offset = rng.gen_range(0..=clip.n_frames() - frames);
    clip.crop(offset, frames)
}

fn noisy_crop<R: Rng + ?Sized>(
    clip: &LogMelSpectrogram,
    noise: &[LogMelSpectrogram],
    frames: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<(LogMelSpectrogram, LogMelSpectrogram)> {
    let clean = random_crop(clip, frames, rng)?;
    if alpha == 0.0 {
        return Ok((clean.clone(), clean));
    }
    let n = sample_noise_segment(noise, frames, rng)?;
    Ok((mix_noisy(&clean, &n, alpha)?, clean))
}

/// Normalization statistics from one deterministic noisy crop per speech
/// clip, i.e. from the distribution the online network actually sees.
pub fn compute_training_stats(
    speech: &[LogMelSpectrogram],
    noise: &[LogMelSpectrogram],
    cfg: &TrainConfig,
    frames: usize,
) -> Result<NormStats> {
    if speech.is_empty() {
        return Err(M2dsError::invalid("speech corpus is empty"));
    }
    let mut acc = StatsAccumulator::default();
    for (i, clip) in speech.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, &[STREAM_STATS, i as u64]);
        let (noisy, _) = noisy_crop(clip, noise, frames, cfg.alpha, &mut rng)?;
        acc.push(&noisy);
    }
    acc.finish(format!("train-seed{}-alpha{}", cfg.seed, cfg.alpha))
}

fn epoch_order(n_clips: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_clips).collect();
    order.shuffle(&mut rng_for(seed, &[STREAM_BATCH, epoch as u64]));
    order
}

/// Items for `(epoch, step)`: a fresh speech crop and noise segment per
/// item; the batch is a pure function of the seed and position.
pub fn build_batch(
    speech: &[LogMelSpectrogram],
    noise: &[LogMelSpectrogram],
    cfg: &TrainConfig,
    stats: &NormStats,
    frames: usize,
    epoch: usize,
    step: usize,
) -> Result<Vec<TrainItem>> {
    if speech.is_empty() {
        return Err(M2dsError::invalid("speech corpus is empty"));
    }
    if cfg.alpha > 0.0 && noise.is_empty() {
        return Err(M2dsError::invalid("alpha > 0 needs a non-empty noise corpus"));
    }
    let order = epoch_order(speech.len(), cfg.seed, epoch);
    let start = step * cfg.batch_size;
    if start >= order.len() {
        return Err(M2dsError::invalid(format!("step {step} is past the end of epoch {epoch}")));
    }
    let end = (start + cfg.batch_size).min(order.len());
    order[start..end]
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let path = [STREAM_BATCH, epoch as u64, step as u64, j as u64];
            let mut rng = rng_for(cfg.seed, &path);
            let (noisy, clean) = noisy_crop(&speech[c], noise, frames, cfg.alpha, &mut rng)?;
            Ok(TrainItem {
                noisy: normalize(&noisy, stats)?,
                clean: normalize(&clean, stats)?,
                mask_seed: child_seed(cfg.seed, &[STREAM_MASK, epoch as u64, step as u64, j as u64]),
            })
        })
        .collect()
}

/// Decoupled-weight-decay Adam. Decay applies to weight matrices only
/// (names ending in `.w`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: usize,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let grads = grad.params();
        let mut ms = self.m.params_mut();
        let mut vs = self.v.params_mut();
        for (i, (name, p)) in params.params_mut().into_iter().enumerate() {
            let g = grads[i].1;
            let m = &mut ms[i].1;
            let v = &mut vs[i].1;
            let decay = if name.ends_with(".w") { weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(&mut **m).and(&mut **v).and(g).for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}

/// One optimizer step on a batch: mean loss over items, backprop into θ,
/// optional gradient clipping, AdamW, then the EMA update of ξ.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut AdamW,
    batch: &[TrainItem],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<TrainStepRecord> {
    if batch.is_empty() {
        return Err(M2dsError::invalid("empty batch"));
    }
    let step = state.step + 1;
    let (n_mels, frames) = (batch[0].noisy.n_mels(), batch[0].noisy.n_frames());
    let (nf, nt) = state.patch_cfg.grid_dims(n_mels, frames)?;
    let shared: &ModelState = state;
    let results = batch
        .par_iter()
        .map(|item| {
            let plan = sample_mask(nf * nt, cfg.mask_ratio, item.mask_seed)?;
            forward_backward(shared, &item.noisy, &item.clean, &plan, &cfg.objective)
        })
        .collect::<Vec<_>>();

    let scale = 1.0 / batch.len() as f64;
    let mut grad = state.online.zeros_like();
    let (mut l_m2d, mut l_off) = (0.0, 0.0);
    for r in results {
        let r = r?;
        l_m2d += r.losses.l_m2d * scale;
        l_off += r.losses.l_off * scale;
        grad.add_scaled(&r.grad, scale);
    }
    let losses = crate::objectives::loss_total(&cfg.objective, l_m2d, l_off);
    let grad_norm = grad.params().iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    let record = TrainStepRecord { step, losses, lr, grad_norm };
    if !(losses.l_total.is_finite() && grad_norm.is_finite()) {
        return Err(M2dsError::NonFinite { step, detail: record.log_line() });
    }
    if let Some(c) = cfg.grad_clip {
        if grad_norm > c {
            let s = c / grad_norm;
            for (_, g) in grad.params_mut() {
                g.mapv_inplace(|v| v * s);
            }
        }
    }
    opt.step(&mut state.online, &grad, lr, cfg.weight_decay);
    ema_update(&mut state.target, &state.online.encoder, cfg.tau.tau)?;
    state.step = step;
    Ok(record)
}

pub struct PretrainOutcome {
    pub state: ModelState,
    pub optimizer: AdamW,
    pub stats: NormStats,
    pub records: Vec<TrainStepRecord>,
    /// Checkpoint written when the run ended (final or interrupted).
    pub checkpoint: PathBuf,
    pub finished: bool,
}

pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "model.safetensors";

pub fn epoch_checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.safetensors"))
}

pub fn step_checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:07}.safetensors"))
}

fn without_stop(cfg: &PretrainConfig) -> PretrainConfig {
    let mut c = cfg.clone();
    c.train.stop_after_steps = None;
    c
}

/// Runs (or resumes) pre-training, writing `train.log` and checkpoints
/// under `out_dir`.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    speech: &[LogMelSpectrogram],
    noise: &[LogMelSpectrogram],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let frames = cfg.input_frames()?;
    let tc = &cfg.train;
    fs::create_dir_all(out_dir)?;

    let (mut state, mut opt, stats, mut log) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if without_stop(&ck.config) != without_stop(cfg) {
                return Err(M2dsError::config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            let log_path = out_dir.join(LOG_FILE);
            let mut log = format!("{LOG_HEADER}\n");
            if let Ok(text) = fs::read_to_string(&log_path) {
                for line in text.lines().skip(1) {
                    match line.split_whitespace().next().and_then(|s| s.parse::<usize>().ok()) {
                        Some(s) if s <= ck.state.step => {
                            log.push_str(line);
                            log.push('\n');
                        }
                        _ => {}
                    }
                }
            }
            (ck.state, ck.optimizer, ck.stats, log)
        }
        None => {
            let teacher = match &cfg.teacher {
                Some(spec) => Some((spec.clone(), spec.build(&cfg.frontend)?)),
                None => None,
            };
            let state = init_model(&cfg.encoder, &cfg.patch, cfg.frontend.n_mels, teacher, tc.seed)?;
            let opt = AdamW::new(&state.online);
            let stats = compute_training_stats(speech, noise, tc, frames)?;
            (state, opt, stats, format!("{LOG_HEADER}\n"))
        }
    };

    let spe = steps_per_epoch(speech.len(), tc.batch_size);
    let total = tc.epochs * spe;
    let warmup = tc.warmup_epochs * spe;
    let mut records = Vec::new();
    let log_path = out_dir.join(LOG_FILE);
    fs::write(&log_path, &log)?;

    while state.step < total {
        let (epoch, step_in_epoch) = (state.step / spe, state.step % spe);
        let batch = build_batch(speech, noise, tc, &stats, frames, epoch, step_in_epoch)?;
        let lr = lr_schedule(state.step + 1, warmup, total, tc.base_lr);
        let rec = train_step(&mut state, &mut opt, &batch, tc, lr)?;
        writeln!(log, "{}", rec.log_line()).expect("write to string");
        records.push(rec);
        fs::write(&log_path, &log)?;

        if state.step % spe == 0 {
            let done_epochs = state.step / spe;
            if tc.checkpoint_every > 0 && done_epochs.is_multiple_of(tc.checkpoint_every) && state.step < total {
                save_checkpoint(&epoch_checkpoint_path(out_dir, done_epochs), &state, &opt, cfg, &stats)?;
            }
        }
        if tc.stop_after_steps.is_some_and(|s| state.step >= s) && state.step < total {
            let path = step_checkpoint_path(out_dir, state.step);
            save_checkpoint(&path, &state, &opt, cfg, &stats)?;
            return Ok(PretrainOutcome { state, optimizer: opt, stats, records, checkpoint: path, finished: false });
        }
    }
    let path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&path, &state, &opt, cfg, &stats)?;
    Ok(PretrainOutcome { state, optimizer: opt, stats, records, checkpoint: path, finished: true })
}
