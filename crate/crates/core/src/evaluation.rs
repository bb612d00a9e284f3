//! Synthetic corpora and frozen-encoder probes.
//!
//! The toy speech corpus is made of harmonic tone complexes. Every clip
//! carries one label per task:
//! - `pitch`: fundamental frequency class, one octave apart,
//! - `speaker`: harmonic amplitude template (timbre),
//! - `emotion`: energy and vibrato/tremolo profile.
//!
//! Labels are assigned independently per task as balanced shuffles. The
//! matching noise corpus is filtered Gaussian noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::audio::{read_wav, write_wav};
use crate::config::{parse_key_values, write_key_values};
use crate::error::{M2dsError, Result};
use crate::frontend::{FrontendConfig, LogMelFrontend, LogMelSpectrogram, Waveform};
use crate::joint::encode_all_layers;
use crate::model::ModelState;
use crate::seeding::{rng_for, STREAM_CORPUS, STREAM_PROBE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Pitch,
    Speaker,
    Emotion,
}

pub const ALL_TASKS: [Task; 3] = [Task::Pitch, Task::Speaker, Task::Emotion];

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Pitch => "pitch",
            Task::Speaker => "speaker",
            Task::Emotion => "emotion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_TASKS
            .iter()
            .copied()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| M2dsError::config(format!("unknown task `{s}` (expected pitch, speaker or emotion)")))
    }

    pub fn max_classes(&self) -> usize {
        match self {
            Task::Pitch => 4,
            Task::Speaker => SPEAKER_TEMPLATES.len(),
            Task::Emotion => EMOTION_PROFILES.len(),
        }
    }

    pub fn default_classes(&self) -> usize {
        match self {
            Task::Pitch => 2,
            Task::Speaker => 4,
            Task::Emotion => 3,
        }
    }
}

/// (spectral tilt exponent, odd-harmonic gain, even-harmonic gain); the
/// gains apply from the second harmonic up so the fundamental dominates.
const SPEAKER_TEMPLATES: [(f64, f64, f64); 6] =
    [(1.0, 1.0, 1.0), (1.0, 1.0, 0.15), (0.8, 0.4, 1.0), (1.3, 1.0, 0.6), (0.7, 0.7, 0.9), (1.2, 0.5, 0.5)];

struct EmotionProfile {
    gain: f64,
    vibrato_hz: f64,
    vibrato_depth: f64,
    tremolo_hz: f64,
    tremolo_depth: f64,
}

const EMOTION_PROFILES: [EmotionProfile; 4] = [
    EmotionProfile { gain: 1.0, vibrato_hz: 0.0, vibrato_depth: 0.0, tremolo_hz: 0.0, tremolo_depth: 0.0 },
    EmotionProfile { gain: 2.0, vibrato_hz: 6.0, vibrato_depth: 0.04, tremolo_hz: 0.0, tremolo_depth: 0.0 },
    EmotionProfile { gain: 0.5, vibrato_hz: 0.0, vibrato_depth: 0.0, tremolo_hz: 3.0, tremolo_depth: 0.8 },
    EmotionProfile { gain: 3.0, vibrato_hz: 10.0, vibrato_depth: 0.02, tremolo_hz: 8.0, tremolo_depth: 0.3 },
];

const BASE_F0_HZ: f64 = 110.0;
const N_HARMONICS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub n_clips: usize,
    pub n_noise_clips: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Task and class count, in column order.
    pub classes: Vec<(Task, usize)>,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_clips: 256,
            n_noise_clips: 32,
            duration_s: 4.08,
            sample_rate: 16_000,
            classes: ALL_TASKS.iter().map(|t| (*t, t.default_classes())).collect(),
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    /// Parses `pitch=2,speaker=4,emotion=3`.
    pub fn parse_classes(s: &str) -> Result<Vec<(Task, usize)>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|part| {
                let (name, n) = part
                    .split_once('=')
                    .ok_or_else(|| M2dsError::config(format!("class spec `{part}` is not task=count")))?;
                let n = n.trim().parse().map_err(|_| M2dsError::config(format!("class count `{n}` is not an integer")))?;
                Ok((Task::parse(name)?, n))
            })
            .collect()
    }

    pub fn classes_string(&self) -> String {
        self.classes.iter().map(|(t, n)| format!("{}={n}", t.name())).collect::<Vec<_>>().join(",")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(M2dsError::config("toy corpus needs at least one task"));
        }
        for (i, (t, n)) in self.classes.iter().enumerate() {
            if *n < 2 || *n > t.max_classes() {
                return Err(M2dsError::config(format!(
                    "task `{}` needs between 2 and {} classes, got {n}",
                    t.name(),
                    t.max_classes()
                )));
            }
            if self.classes[..i].iter().any(|(u, _)| u == t) {
                return Err(M2dsError::config(format!("task `{}` listed twice", t.name())));
            }
        }
        let max_classes = self.classes.iter().map(|(_, n)| *n).max().unwrap_or(2);
        if self.n_clips < 2 * max_classes {
            return Err(M2dsError::config(format!(
                "{} clips cannot hold two examples of each of {max_classes} classes",
                self.n_clips
            )));
        }
        if self.n_noise_clips == 0 {
            return Err(M2dsError::config("n_noise_clips must be >= 1"));
        }
        if !(self.duration_s > 0.05 && self.duration_s.is_finite()) || self.sample_rate < 8_000 {
            return Err(M2dsError::config("duration must exceed 50 ms and sample_rate be >= 8 kHz"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        write_key_values([
            ("n_clips", self.n_clips.to_string()),
            ("n_noise_clips", self.n_noise_clips.to_string()),
            ("duration_s", self.duration_s.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("classes", self.classes_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| M2dsError::config(format!("corpus spec missing `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| M2dsError::config(format!("corpus `{k}` is not a number")))
        };
        Ok(Self {
            n_clips: num("n_clips")? as usize,
            n_noise_clips: num("n_noise_clips")? as usize,
            duration_s: num("duration_s")?,
            sample_rate: num("sample_rate")? as u32,
            classes: Self::parse_classes(get("classes")?)?,
            seed: get("seed")?.parse().map_err(|_| M2dsError::config("corpus `seed` is not an integer"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyClip {
    pub id: String,
    pub wave: Waveform,
    /// One label per task, in `spec.classes` order.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub spec: ToyCorpusSpec,
    pub speech: Vec<ToyClip>,
    pub noise: Vec<(String, Waveform)>,
}

impl ToyCorpus {
    pub fn task_labels(&self, task: Task) -> Result<Vec<usize>> {
        let col = self
            .spec
            .classes
            .iter()
            .position(|(t, _)| *t == task)
            .ok_or_else(|| M2dsError::config(format!("corpus has no `{}` labels", task.name())))?;
        Ok(self.speech.iter().map(|c| c.labels[col]).collect())
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.spec.classes.iter().map(|(t, _)| *t).collect()
    }
}

fn balanced_labels<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

fn synth_clip<R: Rng + ?Sized>(
    spec: &ToyCorpusSpec,
    pitch: usize,
    speaker: usize,
    emotion: usize,
    rng: &mut R,
) -> Waveform {
    let sr = spec.sample_rate as f64;
    let n = (spec.duration_s * sr).round() as usize;
    let f0 = BASE_F0_HZ * 2f64.powi(pitch as i32) * (1.0 + rng.gen_range(-0.04..0.04));
    let glide = rng.gen_range(-0.03..0.03);
    let (tilt, odd, even) = SPEAKER_TEMPLATES[speaker];
    let prof = &EMOTION_PROFILES[emotion];
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let trem_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phases: Vec<f64> = (0..N_HARMONICS).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let amps: Vec<f64> = (1..=N_HARMONICS)
        .map(|k| {
            let g = match k {
                1 => 1.0,
                _ if k % 2 == 1 => odd,
                _ => even,
            };
            (k as f64).powf(-tilt) * g
        })
        .collect();
    let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
    let level = 0.08 * prof.gain / norm;
    let fade = (0.02 * sr) as usize;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f = f0
            * (1.0 + glide * (t / spec.duration_s - 0.5))
            * (1.0 + prof.vibrato_depth * (2.0 * PI * prof.vibrato_hz * t + vib_phase).sin());
        let env = (1.0 - prof.tremolo_depth * 0.5 * (1.0 + (2.0 * PI * prof.tremolo_hz * t + trem_phase).sin()))
            * (i.min(n - 1 - i).min(fade) as f64 / fade.max(1) as f64);
        let mut x = 0.0;
        for (k, (ph, a)) in phases.iter_mut().zip(&amps).enumerate() {
            let fk = f * (k + 1) as f64;
            *ph += 2.0 * PI * fk / sr;
            if fk < 0.45 * sr {
                x += a * ph.sin();
            }
        }
        let floor: f64 = rng.sample::<f64, _>(StandardNormal) * 1e-3;
        samples.push((level * env * x + floor).clamp(-1.0, 1.0) as f32);
    }
    Waveform { samples, sample_rate: spec.sample_rate }
}

fn synth_noise<R: Rng + ?Sized>(spec: &ToyCorpusSpec, kind: usize, rng: &mut R) -> Waveform {
    let n = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let a = rng.gen_range(0.5..0.95);
    let level = rng.gen_range(0.05..0.12);
    let (mut low, mut prev) = (0.0f64, 0.0f64);
    let samples = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            low = a * low + (1.0 - a) * w;
            let y = match kind % 3 {
                0 => low,           // lowpass
                1 => w - prev,      // highpass
                _ => low - prev * a, // rough bandpass
            };
            prev = if kind % 3 == 1 { w } else { low };
            (level * y).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform { samples, sample_rate: spec.sample_rate }
}

/// Deterministic per seed; clips are independent streams so generation
/// runs in parallel.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let labels: Vec<Vec<usize>> = spec
        .classes
        .iter()
        .enumerate()
        .map(|(ti, (_, k))| balanced_labels(spec.n_clips, *k, &mut rng_for(spec.seed, &[STREAM_CORPUS, 0, ti as u64])))
        .collect();
    let label_of = |task: Task, i: usize| {
        spec.classes.iter().position(|(t, _)| *t == task).map_or(0, |c| labels[c][i])
    };
    let speech = (0..spec.n_clips)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(spec.seed, &[STREAM_CORPUS, 1, i as u64]);
            let wave = synth_clip(
                spec,
                label_of(Task::Pitch, i),
                label_of(Task::Speaker, i),
                label_of(Task::Emotion, i),
                &mut rng,
            );
            ToyClip { id: format!("clip_{i:05}"), wave, labels: labels.iter().map(|l| l[i]).collect() }
        })
        .collect();
    let noise = (0..spec.n_noise_clips)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng_for(spec.seed, &[STREAM_CORPUS, 2, j as u64]);
            (format!("noise_{j:04}"), synth_noise(spec, j, &mut rng))
        })
        .collect();
    Ok(ToyCorpus { spec: spec.clone(), speech, noise })
}

pub const CORPUS_SPEC_FILE: &str = "corpus.txt";
pub const LABELS_FILE: &str = "labels.csv";

/// Layout: `corpus.txt`, `labels.csv`, `speech/<id>.wav`, `noise/<id>.wav`.
pub fn write_toy_corpus(corpus: &ToyCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("speech"))?;
    fs::create_dir_all(dir.join("noise"))?;
    fs::write(dir.join(CORPUS_SPEC_FILE), corpus.spec.to_text())?;
    let mut csv = String::from("clip_id");
    for (t, _) in &corpus.spec.classes {
        csv.push(',');
        csv.push_str(t.name());
    }
    csv.push('\n');
    for clip in &corpus.speech {
        csv.push_str(&clip.id);
        for l in &clip.labels {
            write!(csv, ",{l}").expect("write to string");
        }
        csv.push('\n');
        write_wav(&dir.join("speech").join(format!("{}.wav", clip.id)), &clip.wave)?;
    }
    fs::write(dir.join(LABELS_FILE), csv)?;
    for (id, wave) in &corpus.noise {
        write_wav(&dir.join("noise").join(format!("{id}.wav")), wave)?;
    }
    Ok(())
}

pub fn read_toy_corpus(dir: &Path) -> Result<ToyCorpus> {
    let spec_text = fs::read_to_string(dir.join(CORPUS_SPEC_FILE))
        .map_err(|e| M2dsError::invalid(format!("{} is not a corpus directory: {e}", dir.display())))?;
    let spec = ToyCorpusSpec::from_text(&spec_text)?;
    let csv = fs::read_to_string(dir.join(LABELS_FILE))?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let expected: Vec<&str> =
        std::iter::once("clip_id").chain(spec.classes.iter().map(|(t, _)| t.name())).collect();
    if header != expected {
        return Err(M2dsError::invalid(format!("labels header {header:?}, expected {expected:?}")));
    }
    let mut speech = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split(',');
        let id = cols.next().unwrap_or_default().to_string();
        let labels = cols
            .map(|c| c.trim().parse().map_err(|_| M2dsError::invalid(format!("bad label in `{line}`"))))
            .collect::<Result<Vec<usize>>>()?;
        if labels.len() != spec.classes.len() {
            return Err(M2dsError::invalid(format!("wrong label count in `{line}`")));
        }
        let wave = read_wav(&dir.join("speech").join(format!("{id}.wav")))?;
        speech.push(ToyClip { id, wave, labels });
    }
    let mut noise_ids: Vec<String> = fs::read_dir(dir.join("noise"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".wav")).map(str::to_string))
        .collect();
    noise_ids.sort();
    let noise = noise_ids
        .into_iter()
        .map(|id| Ok((id.clone(), read_wav(&dir.join("noise").join(format!("{id}.wav")))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyCorpus { spec, speech, noise })
}

/// Unnormalized log-mels of the speech and noise clips; speech
/// spectrograms carry their clip id as origin.
pub fn corpus_logmels(
    corpus: &ToyCorpus,
    frontend: &FrontendConfig,
) -> Result<(Vec<LogMelSpectrogram>, Vec<LogMelSpectrogram>)> {
    let fe = LogMelFrontend::new(frontend.clone())?;
    let speech = corpus
        .speech
        .par_iter()
        .map(|c| Ok(fe.compute(&c.wave)?.with_origin(c.id.clone(), 0)))
        .collect::<Result<Vec<_>>>()?;
    let noise = corpus
        .noise
        .par_iter()
        .map(|(id, w)| Ok(fe.compute(w)?.with_origin(id.clone(), 0)))
        .collect::<Result<Vec<_>>>()?;
    Ok((speech, noise))
}

/// Per clip: one row per transformer layer (embedding output excluded),
/// each the mean of that layer's token vectors over the whole clip.
/// Uses the online encoder read-only.
pub fn extract_layer_features(state: &ModelState, clips: &[LogMelSpectrogram]) -> Result<Vec<Array2<f64>>> {
    clips
        .par_iter()
        .map(|spec| {
            if spec.n_mels() != state.n_mels {
                return Err(M2dsError::config(format!(
                    "clip has {} mel bands, model was trained on {}",
                    spec.n_mels(),
                    state.n_mels
                )));
            }
            let layers = encode_all_layers(&state.online, state, spec)?;
            let d = state.online.encoder.embed_dim();
            let mut out = Array2::zeros((layers.len() - 1, d));
            for (l, layer) in layers[1..].iter().enumerate() {
                out.row_mut(l).assign(&layer.mean_axis(Axis(0)).expect("non-empty layer"));
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    WeightedSum,
    FinalLayer,
}

impl ProbeMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeMode::WeightedSum => "weighted-sum",
            ProbeMode::FinalLayer => "final-layer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "weighted-sum" => Ok(ProbeMode::WeightedSum),
            "final-layer" => Ok(ProbeMode::FinalLayer),
            _ => Err(M2dsError::config(format!("unknown probe mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Fixed layer weights for the weighted-sum classifier instead of
    /// learned ones.
    pub fixed_layer_weights: Option<Vec<f64>>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::WeightedSum,
            epochs: 300,
            lr: 0.02,
            l2: 1e-3,
            train_fraction: 0.75,
            seed: 0,
            fixed_layer_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub task: String,
    pub mode: ProbeMode,
    pub accuracy: f64,
    pub n_test: usize,
    /// Softmax-normalized, weighted-sum mode only.
    pub layer_weights: Option<Vec<f64>>,
}

/// Stratified split: each class contributes `round(fraction · count)`
/// members to the training side.
pub fn split_indices(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(M2dsError::config(format!("train fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng_for(seed, &[STREAM_PROBE, 0]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9, 0.999);
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

/// Trains a softmax-regression probe on frozen per-layer features
/// (`features[i]` is `n_layers × d`) and reports test accuracy.
pub fn train_probe(features: &[Array2<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(M2dsError::invalid("features and labels must be non-empty and aligned"));
    }
    let (n_layers, d) = features[0].dim();
    if features.iter().any(|f| f.dim() != (n_layers, d)) || n_layers == 0 {
        return Err(M2dsError::shape("clips have different feature shapes"));
    }
    let (train, test) = split_indices(labels, cfg.train_fraction, cfg.seed)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = |idx: &[usize]| {
        let mut seen: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    if distinct(&train) < 2 || test.is_empty() {
        return Err(M2dsError::invalid("probe split needs at least two classes in training and a non-empty test set"));
    }

    // z-score each layer feature with training statistics
    let mut mean = Array2::<f64>::zeros((n_layers, d));
    for &i in &train {
        mean += &features[i];
    }
    mean /= train.len() as f64;
    let mut var = Array2::<f64>::zeros((n_layers, d));
    for &i in &train {
        var += &(&features[i] - &mean).mapv(|v| v * v);
    }
    let std = (var / train.len() as f64).mapv(|v| v.sqrt() + 1e-8);
    let feats: Vec<Array2<f64>> = features.iter().map(|f| (f - &mean) / &std).collect();

    let (mut scores, learn_weights) = match (&cfg.fixed_layer_weights, cfg.mode) {
        (Some(w), _) => {
            if w.len() != n_layers || w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(M2dsError::config("fixed layer weights must be a distribution over layers"));
            }
            (w.clone(), false)
        }
        (None, ProbeMode::FinalLayer) => {
            let mut w = vec![0.0; n_layers];
            w[n_layers - 1] = 1.0;
            (w, false)
        }
        (None, ProbeMode::WeightedSum) => (vec![0.0; n_layers], true),
    };
    let weights_of = |scores: &[f64]| {
        if learn_weights {
            let mut w = scores.to_vec();
            softmax_inplace(&mut w);
            w
        } else {
            scores.to_vec()
        }
    };
    let combine = |w: &[f64], f: &Array2<f64>| -> Array1<f64> {
        let mut x = Array1::zeros(d);
        for (l, &wl) in w.iter().enumerate() {
            if wl != 0.0 {
                x.scaled_add(wl, &f.row(l));
            }
        }
        x
    };

    let mut wb = vec![0.0; d * n_classes + n_classes];
    let mut opt = Adam::new(wb.len());
    let mut opt_s = Adam::new(n_layers);
    let inv_n = 1.0 / train.len() as f64;
    for _ in 0..cfg.epochs {
        let w = weights_of(&scores);
        let mut g = vec![0.0; wb.len()];
        let mut g_w = vec![0.0; n_layers];
        for &i in &train {
            let x = combine(&w, &feats[i]);
            let mut logits: Vec<f64> =
                (0..n_classes).map(|c| wb[d * n_classes + c] + (0..d).map(|j| x[j] * wb[j * n_classes + c]).sum::<f64>()).collect();
            softmax_inplace(&mut logits);
            logits[labels[i]] -= 1.0;
            let mut dx = vec![0.0; d];
            for c in 0..n_classes {
                let e = logits[c] * inv_n;
                g[d * n_classes + c] += e;
                for j in 0..d {
                    g[j * n_classes + c] += e * x[j];
                    dx[j] += e * wb[j * n_classes + c];
                }
            }
            if learn_weights {
                for (l, gw) in g_w.iter_mut().enumerate() {
                    *gw += feats[i].row(l).iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        for (gi, p) in g[..d * n_classes].iter_mut().zip(&wb) {
            *gi += cfg.l2 * p;
        }
        opt.step(&mut wb, &g, cfg.lr);
        if learn_weights {
            let dot: f64 = g_w.iter().zip(&w).map(|(a, b)| a * b).sum();
            let g_s: Vec<f64> = w.iter().zip(&g_w).map(|(wl, gl)| wl * (gl - dot)).collect();
            opt_s.step(&mut scores, &g_s, cfg.lr);
        }
    }

    let w = weights_of(&scores);
    let correct = test
        .iter()
        .filter(|&&i| {
            let x = combine(&w, &feats[i]);
            let logits: Vec<f64> =
                (0..n_classes).map(|c| wb[d * n_classes + c] + (0..d).map(|j| x[j] * wb[j * n_classes + c]).sum::<f64>()).collect();
            let pred = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0;
            pred == labels[i]
        })
        .count();
    Ok(ProbeReport {
        task: String::new(),
        mode: cfg.mode,
        accuracy: correct as f64 / test.len() as f64,
        n_test: test.len(),
        layer_weights: (cfg.mode == ProbeMode::WeightedSum).then_some(w),
    })
}

/// Mean test accuracy of probes trained on randomly permuted labels.
pub fn shuffled_label_control(
    features: &[Array2<f64>],
    labels: &[usize],
    cfg: &ProbeConfig,
    n_permutations: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for p in 0..n_permutations {
        let mut shuffled = labels.to_vec();
        shuffled.shuffle(&mut rng_for(cfg.seed, &[STREAM_PROBE, 1, p as u64]));
        total += train_probe(features, &shuffled, cfg)?.accuracy;
    }
    Ok(total / n_permutations.max(1) as f64)
}

/// Probes every requested task in every mode, extracting features once.
pub fn run_eval_suite(
    state: &ModelState,
    clips: &[LogMelSpectrogram],
    labels: &BTreeMap<Task, Vec<usize>>,
    tasks: &[Task],
    modes: &[ProbeMode],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    if tasks.is_empty() || modes.is_empty() {
        return Ok(Vec::new());
    }
    let features = extract_layer_features(state, clips)?;
    let mut reports = Vec::new();
    for task in tasks {
        let y = labels
            .get(task)
            .ok_or_else(|| M2dsError::config(format!("no labels for task `{}`", task.name())))?;
        for &mode in modes {
            let mut r = train_probe(&features, y, &ProbeConfig { mode, ..cfg.clone() })?;
            r.task = task.name().to_string();
            reports.push(r);
        }
    }
    Ok(reports)
}

pub fn results_csv(reports: &[ProbeReport]) -> String {
    let mut s = String::from("task,mode,accuracy,n_test\n");
    for r in reports {
        writeln!(s, "{},{},{:.6},{}", r.task, r.mode.name(), r.accuracy, r.n_test).expect("write to string");
    }
    s
}

/// `task/mode: {layer_1: w1, layer_2: w2, ...}` per weighted-sum report.
pub fn layer_weights_text(reports: &[ProbeReport]) -> String {
    let mut s = String::new();
    for r in reports {
        if let Some(w) = &r.layer_weights {
            let body: Vec<String> = w.iter().enumerate().map(|(l, v)| format!("layer_{}: {v:.6}", l + 1)).collect();
            writeln!(s, "{}/{}: {{{}}}", r.task, r.mode.name(), body.join(", ")).expect("write to string");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::compute_logmel;
    use rand::SeedableRng;

    fn small_spec(seed: u64) -> ToyCorpusSpec {
        ToyCorpusSpec { n_clips: 40, n_noise_clips: 3, duration_s: 0.5, seed, ..ToyCorpusSpec::default() }
    }

    #[test]
    fn corpus_is_deterministic_and_balanced() {
        let a = generate_toy_corpus(&small_spec(7)).unwrap();
        assert_eq!(a, generate_toy_corpus(&small_spec(7)).unwrap());
        assert_ne!(a.speech[0].wave, generate_toy_corpus(&small_spec(8)).unwrap().speech[0].wave);
        for (col, (_, k)) in a.spec.classes.iter().enumerate() {
            let mut counts = vec![0usize; *k];
            for c in &a.speech {
                counts[c.labels[col]] += 1;
            }
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        assert!(a.speech.iter().all(|c| c.wave.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0)));
    }

    #[test]
    fn class_spec_validation() {
        assert_eq!(
            ToyCorpusSpec::parse_classes("pitch=2,emotion=3").unwrap(),
            vec![(Task::Pitch, 2), (Task::Emotion, 3)]
        );
        assert!(ToyCorpusSpec::parse_classes("tone=2").is_err());
        assert!(ToyCorpusSpec::parse_classes("pitch").is_err());
        for classes in [vec![(Task::Pitch, 1)], vec![(Task::Pitch, 9)], vec![(Task::Pitch, 2), (Task::Pitch, 2)], vec![]] {
            assert!(ToyCorpusSpec { classes, ..small_spec(0) }.validate().is_err());
        }
    }

    #[test]
    fn pitch_task_is_separable_by_mel_centroid() {
        let spec = ToyCorpusSpec { n_clips: 200, n_noise_clips: 1, duration_s: 1.0, seed: 3, ..ToyCorpusSpec::default() };
        let corpus = generate_toy_corpus(&spec).unwrap();
        let labels = corpus.task_labels(Task::Pitch).unwrap();
        let fe = FrontendConfig::default();
        let centroids: Vec<f64> = corpus
            .speech
            .iter()
            .map(|c| {
                let m = compute_logmel(&c.wave, &fe).unwrap();
                let e = m.values().mapv(f64::exp);
                let total = e.sum();
                e.indexed_iter().map(|((b, _), v)| b as f64 * v).sum::<f64>() / total
            })
            .collect();
        // best single threshold
        let mut sorted = centroids.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let best = sorted
            .windows(2)
            .map(|w| {
                let th = 0.5 * (w[0] + w[1]);
                centroids.iter().zip(&labels).filter(|(c, &l)| (**c > th) == (l == 1)).count()
            })
            .max()
            .unwrap();
        assert!(best as f64 / 200.0 >= 0.99, "centroid oracle accuracy {}", best as f64 / 200.0);
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_toy_corpus(&small_spec(1)).unwrap();
        write_toy_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(read_toy_corpus(dir.path()).unwrap(), corpus);
        assert!(read_toy_corpus(&dir.path().join("speech")).is_err());
    }

    fn planted(n: usize, classes: usize, layers: usize, d: usize, seed: u64) -> (Vec<Array2<f64>>, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let feats = labels
            .iter()
            .map(|&l| {
                Array2::from_shape_fn((layers, d), |(_, j)| {
                    (if j == l { 1.0 } else { 0.0 }) + 0.01 * rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        (feats, labels)
    }

    #[test]
    fn planted_features_are_learned_perfectly() {
        let (f, y) = planted(60, 3, 4, 8, 1);
        for mode in [ProbeMode::WeightedSum, ProbeMode::FinalLayer] {
            let r = train_probe(&f, &y, &ProbeConfig { mode, ..ProbeConfig::default() }).unwrap();
            assert_eq!(r.accuracy, 1.0);
            assert_eq!(r.n_test, 15);
            if let Some(w) = r.layer_weights {
                assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let f: Vec<Array2<f64>> = (0..200).map(|_| Array2::from_shape_simple_fn((3, 8), || rng.gen_range(-1.0..1.0))).collect();
        let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let acc = shuffled_label_control(&f, &y, &ProbeConfig::default(), 10).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn forced_final_layer_weights_match_final_layer_probe() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let y: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let f: Vec<Array2<f64>> = y
            .iter()
            .map(|&l| Array2::from_shape_fn((3, 6), |(r, _)| rng.gen_range(-1.0..1.0) + if r == 2 { l as f64 * 0.8 } else { 0.0 }))
            .collect();
        let fin = train_probe(&f, &y, &ProbeConfig { mode: ProbeMode::FinalLayer, ..ProbeConfig::default() }).unwrap();
        let forced = train_probe(
            &f,
            &y,
            &ProbeConfig { fixed_layer_weights: Some(vec![0.0, 0.0, 1.0]), ..ProbeConfig::default() },
        )
        .unwrap();
        assert!((fin.accuracy - forced.accuracy).abs() <= 0.02);
    }

    #[test]
    fn split_is_disjoint_and_rejects_single_class() {
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (tr, te) = split_indices(&y, 0.75, 2).unwrap();
        assert_eq!(tr.len() + te.len(), 30);
        assert!(tr.iter().all(|i| !te.contains(i)));
        let (f, _) = planted(10, 2, 1, 2, 0);
        assert!(train_probe(&f, &[0; 10], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn reports_serialize() {
        let r = ProbeReport {
            task: "pitch".into(),
            mode: ProbeMode::WeightedSum,
            accuracy: 0.9375,
            n_test: 64,
            layer_weights: Some(vec![0.25, 0.75]),
        };
        assert_eq!(results_csv(std::slice::from_ref(&r)), "task,mode,accuracy,n_test\npitch,weighted-sum,0.937500,64\n");
        assert_eq!(layer_weights_text(&[r]), "pitch/weighted-sum: {layer_1: 0.250000, layer_2: 0.750000}\n");
        assert_eq!(results_csv(&[]), "task,mode,accuracy,n_test\n");
    }
}
