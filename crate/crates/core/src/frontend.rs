//! Log-mel frontend, dataset statistics and noisy mixtures.
//!
//! Spectrograms are stored as `n_mels × n_frames` matrices of natural-log
//! mel energies: `ln(energy + log_floor)`. Mixing speech with noise reverts
//! that log exactly, mixes in the mel-energy domain and takes the log again.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{M2dsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Added to mel energies before the log.
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 80,
            fmin: 50.0,
            fmax: 8_000.0,
            log_floor: 1e-5,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(M2dsError::config("sample_rate must be positive"));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(M2dsError::config(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got fmin={} fmax={} sr={}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.n_mels == 0 {
            return Err(M2dsError::config("n_mels must be >= 1"));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.window_ms) {
            return Err(M2dsError::config(format!(
                "need 0 < hop <= window, got hop={} window={}",
                self.hop_ms, self.window_ms
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(M2dsError::config("log_floor must be positive"));
        }
        if self.window_samples() < 2 || self.hop_samples() == 0 {
            return Err(M2dsError::config("window/hop too short for the sample rate"));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames covering `seconds` of input. Fails unless the
    /// duration is a whole number of hops.
    pub fn frames_for_duration(&self, seconds: f64) -> Result<usize> {
        let frames = seconds * 1000.0 / self.hop_ms;
        let rounded = frames.round();
        if rounded < 1.0 || (frames - rounded).abs() > 1e-6 {
            return Err(M2dsError::config(format!(
                "duration {seconds}s is not a whole number of {}ms hops",
                self.hop_ms
            )));
        }
        Ok(rounded as usize)
    }
}

/// Where a cropped segment came from; used by archive-backed teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOrigin {
    pub clip_id: String,
    pub frame_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    values: Array2<f64>,
    config: FrontendConfig,
    stats_id: Option<String>,
    pub origin: Option<SegmentOrigin>,
}

impl LogMelSpectrogram {
    /// Wraps an unnormalized log-mel matrix (`n_mels × n_frames`).
    pub fn new(values: Array2<f64>, config: FrontendConfig) -> Result<Self> {
        if values.nrows() != config.n_mels {
            return Err(M2dsError::shape(format!(
                "spectrogram has {} mel rows, config says {}",
                values.nrows(),
                config.n_mels
            )));
        }
        if values.ncols() == 0 {
            return Err(M2dsError::invalid("spectrogram needs at least one frame"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(M2dsError::invalid("spectrogram contains non-finite values"));
        }
        Ok(Self { values, config, stats_id: None, origin: None })
    }

    pub fn with_origin(mut self, clip_id: impl Into<String>, frame_offset: usize) -> Self {
        self.origin = Some(SegmentOrigin { clip_id: clip_id.into(), frame_offset });
        self
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats_id.is_some()
    }

    pub fn stats_id(&self) -> Option<&str> {
        self.stats_id.as_deref()
    }

    /// Frames `offset..offset + len`. Normalization state and origin carry over.
    pub fn crop(&self, offset: usize, len: usize) -> Result<Self> {
        if len == 0 || offset + len > self.n_frames() {
            return Err(M2dsError::invalid(format!(
                "crop {offset}+{len} outside {} frames",
                self.n_frames()
            )));
        }
        let origin = self.origin.as_ref().map(|o| SegmentOrigin {
            clip_id: o.clip_id.clone(),
            frame_offset: o.frame_offset + offset,
        });
        Ok(Self {
            values: self.values.slice(s![.., offset..offset + len]).to_owned(),
            config: self.config.clone(),
            stats_id: self.stats_id.clone(),
            origin,
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank over the linear FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels × n_freqs`
    pub weights: Array2<f64>,
    pub center_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let n_freqs = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let bin_hz: Vec<f64> = (0..n_freqs)
            .map(|k| nyquist * k as f64 / (n_freqs - 1) as f64)
            .collect();
        let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((n_mels, n_freqs));
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rising = (f - lo) / (mid - lo);
                let falling = (hi - f) / (hi - mid);
                weights[[m, k]] = rising.min(falling).max(0.0);
            }
        }
        Self { weights, center_hz: edges[1..=n_mels].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Reusable STFT + mel projection for one `FrontendConfig`.
pub struct LogMelFrontend {
    config: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl LogMelFrontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        let n_fft = config.window_samples();
        // periodic Hann
        let window = (0..n_fft)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / n_fft as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let filterbank =
            MelFilterbank::new(config.n_mels, n_fft, config.sample_rate, config.fmin, config.fmax);
        Ok(Self { config, window, fft, filterbank })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Frames are centred on multiples of the hop (zero padded at the edges);
    /// a waveform of `n` samples yields `n / hop` frames.
    pub fn compute(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(M2dsError::invalid(format!(
                "sample rate {} Hz does not match frontend rate {} Hz (no resampling)",
                wave.sample_rate, self.config.sample_rate
            )));
        }
        if wave.samples.is_empty() {
            return Err(M2dsError::invalid("empty waveform"));
        }
        if wave.samples.iter().any(|s| !s.is_finite()) {
            return Err(M2dsError::invalid("waveform contains NaN or infinite samples"));
        }
        let hop = self.config.hop_samples();
        let n_frames = wave.samples.len() / hop;
        if n_frames == 0 {
            return Err(M2dsError::invalid(format!(
                "waveform of {} samples is shorter than one hop ({hop})",
                wave.samples.len()
            )));
        }
        let n_fft = self.window.len();
        let n_freqs = n_fft / 2 + 1;
        let half = (n_fft / 2) as isize;
        let mut power = Array2::<f64>::zeros((n_freqs, n_frames));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = (t * hop) as isize - half;
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = start + n as isize;
                let x = if idx >= 0 && (idx as usize) < wave.samples.len() {
                    wave.samples[idx as usize] as f64
                } else {
                    0.0
                };
                *slot = Complex::new(x * self.window[n], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_freqs {
                power[[k, t]] = buf[k].norm_sqr();
            }
        }
        let mut mel = self.filterbank.weights.dot(&power);
        let floor = self.config.log_floor;
        mel.mapv_inplace(|e| (e + floor).ln());
        LogMelSpectrogram::new(mel, self.config.clone())
    }
}

pub fn compute_logmel(wave: &Waveform, config: &FrontendConfig) -> Result<LogMelSpectrogram> {
    LogMelFrontend::new(config.clone())?.compute(wave)
}

pub const STATS_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub corpus_id: String,
    pub n_frames_seen: usize,
}

impl NormStats {
    pub fn to_text(&self) -> String {
        format!(
            "mean={:e}\nstd={:e}\ncorpus_id={}\nn_frames_seen={}\n",
            self.mean, self.std, self.corpus_id, self.n_frames_seen
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k).ok_or_else(|| M2dsError::config(format!("stats file missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| M2dsError::config(format!("stats `{k}` is not a number")))
        };
        let stats = Self {
            mean: num("mean")?,
            std: num("std")?,
            corpus_id: get("corpus_id")?.clone(),
            n_frames_seen: get("n_frames_seen")?
                .parse()
                .map_err(|_| M2dsError::config("stats `n_frames_seen` is not an integer"))?,
        };
        if !(stats.std > 0.0) || stats.n_frames_seen == 0 {
            return Err(M2dsError::config("stats need std > 0 and n_frames_seen > 0"));
        }
        Ok(stats)
    }
}

/// Streaming mean/variance over every value of every frame. Partial
/// accumulators merge exactly (Chan et al. pairwise update), so the
/// aggregate does not depend on how a corpus is split across workers.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    count: usize,
    frames: usize,
    mean: f64,
    m2: f64,
}

impl StatsAccumulator {
    pub fn push(&mut self, spec: &LogMelSpectrogram) {
        let n = spec.values.len();
        let mean = spec.values.iter().sum::<f64>() / n as f64;
        let m2 = spec.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        self.merge(&StatsAccumulator { count: n, frames: spec.n_frames(), mean, m2 });
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        if other.count == 0 {
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / total as f64;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / total as f64;
        self.count = total;
        self.frames += other.frames;
    }

    pub fn finish(&self, corpus_id: impl Into<String>) -> Result<NormStats> {
        if self.count == 0 {
            return Err(M2dsError::invalid("cannot compute statistics of an empty corpus"));
        }
        Ok(NormStats {
            mean: self.mean,
            std: (self.m2 / self.count as f64).sqrt() + STATS_EPS,
            corpus_id: corpus_id.into(),
            n_frames_seen: self.frames,
        })
    }
}

pub fn compute_dataset_stats<'a>(
    corpus: impl IntoIterator<Item = &'a LogMelSpectrogram>,
    corpus_id: &str,
) -> Result<NormStats> {
    let mut acc = StatsAccumulator::default();
    for spec in corpus {
        if spec.is_normalized() {
            return Err(M2dsError::invalid("dataset statistics need unnormalized spectrograms"));
        }
        acc.push(spec);
    }
    acc.finish(corpus_id)
}

pub fn normalize(spec: &LogMelSpectrogram, stats: &NormStats) -> Result<LogMelSpectrogram> {
    if spec.is_normalized() {
        return Err(M2dsError::invalid(format!(
            "spectrogram already normalized with `{}`",
            spec.stats_id().unwrap_or_default()
        )));
    }
    let mut out = spec.clone();
    out.values.mapv_inplace(|v| (v - stats.mean) / stats.std);
    out.stats_id = Some(stats.corpus_id.clone());
    Ok(out)
}

pub fn denormalize(spec: &LogMelSpectrogram, stats: &NormStats) -> Result<LogMelSpectrogram> {
    match spec.stats_id() {
        Some(id) if id == stats.corpus_id => {}
        Some(id) => {
            return Err(M2dsError::invalid(format!(
                "spectrogram normalized with `{id}`, not `{}`",
                stats.corpus_id
            )))
        }
        None => return Err(M2dsError::invalid("spectrogram is not normalized")),
    }
    let mut out = spec.clone();
    out.values.mapv_inplace(|v| v * stats.std + stats.mean);
    out.stats_id = None;
    Ok(out)
}

/// Picks a noise clip uniformly and crops `duration_frames` at a uniform
/// offset. Clips shorter than the request are read circularly (loop padding).
pub fn sample_noise_segment<R: Rng + ?Sized>(
    noise_corpus: &[LogMelSpectrogram],
    duration_frames: usize,
    rng: &mut R,
) -> Result<LogMelSpectrogram> {
    if noise_corpus.is_empty() {
        return Err(M2dsError::invalid("noise corpus is empty"));
    }
    if duration_frames == 0 {
        return Err(M2dsError::invalid("requested zero noise frames"));
    }
    let clip = &noise_corpus[rng.gen_range(0..noise_corpus.len())];
    let len = clip.n_frames();
    if len >= duration_frames {
        let offset = rng.gen_range(0..=len - duration_frames);
        return clip.crop(offset, duration_frames);
    }
    let offset = rng.gen_range(0..len);
    let mut values = Array2::zeros((clip.n_mels(), duration_frames));
    for t in 0..duration_frames {
        values.column_mut(t).assign(&clip.values.column((offset + t) % len));
    }
    Ok(LogMelSpectrogram {
        values,
        config: clip.config.clone(),
        stats_id: clip.stats_id.clone(),
        origin: None,
    })
}

/// `ln(alpha * exp(noise) + (1 - alpha) * exp(speech))`, elementwise.
pub fn mix_noisy(
    speech: &LogMelSpectrogram,
    noise: &LogMelSpectrogram,
    alpha: f64,
) -> Result<LogMelSpectrogram> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(M2dsError::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if speech.values.dim() != noise.values.dim() {
        return Err(M2dsError::shape(format!(
            "speech {:?} vs noise {:?}",
            speech.values.dim(),
            noise.values.dim()
        )));
    }
    if speech.is_normalized() || noise.is_normalized() {
        return Err(M2dsError::invalid("mixing must precede normalization"));
    }
    let mut out = speech.clone();
    ndarray::Zip::from(&mut out.values).and(&noise.values).for_each(|s, &n| {
        // log-sum-exp form keeps the alpha = 0 / 1 cases exact
        *s = if alpha == 0.0 {
            *s
        } else if alpha == 1.0 {
            n
        } else {
            let a = alpha.ln() + n;
            let b = (1.0 - alpha).ln() + *s;
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        };
    });
    Ok(out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn spec_from(values: Array2<f64>) -> LogMelSpectrogram {
        let cfg = FrontendConfig { n_mels: values.nrows(), ..FrontendConfig::default() };
        LogMelSpectrogram::new(values, cfg).unwrap()
    }

    proptest! {
        #[test]
        fn mixture_is_linear_in_energy(
            speech in prop::collection::vec(-15.0f64..5.0, 12),
            noise in prop::collection::vec(-15.0f64..5.0, 12),
            alpha in 0.0f64..=1.0,
        ) {
            let s = spec_from(Array2::from_shape_vec((3, 4), speech).unwrap());
            let n = spec_from(Array2::from_shape_vec((3, 4), noise).unwrap());
            let m = mix_noisy(&s, &n, alpha).unwrap();
            for ((mv, sv), nv) in m.values().iter().zip(s.values()).zip(n.values()) {
                let lin = alpha * nv.exp() + (1.0 - alpha) * sv.exp();
                prop_assert!(((mv.exp() - lin) / lin).abs() <= 1e-6);
            }
        }

        #[test]
        fn mixture_increases_with_alpha_where_noise_dominates(
            s in -10.0f64..0.0, gap in 0.01f64..5.0, a1 in 0.0f64..0.99, da in 0.005f64..0.5,
        ) {
            let a2 = (a1 + da).min(1.0);
            let sp = spec_from(Array2::from_elem((1, 1), s));
            let ns = spec_from(Array2::from_elem((1, 1), s + gap));
            let lo = mix_noisy(&sp, &ns, a1).unwrap().values()[[0, 0]];
            let hi = mix_noisy(&sp, &ns, a2).unwrap().values()[[0, 0]];
            prop_assert!(hi > lo);
        }

        #[test]
        fn normalize_round_trips(
            vals in prop::collection::vec(-20.0f64..10.0, 10),
            mean in -10.0f64..10.0,
            std in 0.01f64..10.0,
        ) {
            let s = spec_from(Array2::from_shape_vec((2, 5), vals).unwrap());
            let stats = NormStats { mean, std, corpus_id: "p".into(), n_frames_seen: 5 };
            let back = denormalize(&normalize(&s, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.values().iter().zip(s.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
