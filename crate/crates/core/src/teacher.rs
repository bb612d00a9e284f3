//! Frozen offline teachers. A teacher maps a clean spectrogram to one
//! feature vector per teacher frame; nothing here ever receives gradients.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};

use crate::archive::{save_feature_archive, ArrayArchive, FrameAxis};
use crate::error::{M2dsError, Result};
use crate::frontend::{FrontendConfig, LogMelSpectrogram};
use crate::model::{Encoder, EncoderConfig};
use crate::nn::Params;
use crate::patching::{patchify, PatchConfig, PositionalEncoding};
use crate::seeding;

pub trait Teacher: Send + Sync {
    fn frame_stride_ms(&self) -> f64;
    fn feature_dim(&self) -> usize;
    /// `n_teacher_frames × feature_dim`
    fn forward(&self, clean: &LogMelSpectrogram) -> Result<Array2<f64>>;
    /// Snapshot of any frozen weights, for freeze checks.
    fn parameters(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSpec {
    /// Mean of `k` consecutive input frames.
    MeanPool { k: usize },
    /// Frozen randomly initialised tiny encoder over `n_mels × 2` patches.
    Random { seed: u64 },
    /// Precomputed features keyed by clip id.
    Archive { path: PathBuf },
}

impl TeacherSpec {
    /// Accepts `meanpool[:K]`, `random[:SEED]` and `archive:PATH`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let bad = || M2dsError::config(format!("bad teacher spec `{s}`"));
        match (kind, arg) {
            ("meanpool", None) => Ok(TeacherSpec::MeanPool { k: 2 }),
            ("meanpool", Some(a)) => match a.parse() {
                Ok(k) if k > 0 => Ok(TeacherSpec::MeanPool { k }),
                _ => Err(bad()),
            },
            ("random", None) => Ok(TeacherSpec::Random { seed: 0 }),
            ("random", Some(a)) => a.parse().map(|seed| TeacherSpec::Random { seed }).map_err(|_| bad()),
            ("archive", Some(p)) if !p.is_empty() => Ok(TeacherSpec::Archive { path: PathBuf::from(p) }),
            _ => Err(bad()),
        }
    }

    pub fn build(&self, frontend: &FrontendConfig) -> Result<Box<dyn Teacher>> {
        Ok(match self {
            TeacherSpec::MeanPool { k } => Box::new(MeanPoolTeacher::new(*k, frontend.hop_ms, frontend.n_mels)),
            TeacherSpec::Random { seed } => Box::new(RandomEncoderTeacher::new(*seed, frontend)?),
            TeacherSpec::Archive { path } => Box::new(ArchiveTeacher::load(path, frontend.hop_ms)?),
        })
    }
}

impl fmt::Display for TeacherSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherSpec::MeanPool { k } => write!(f, "meanpool:{k}"),
            TeacherSpec::Random { seed } => write!(f, "random:{seed}"),
            TeacherSpec::Archive { path } => write!(f, "archive:{}", path.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeanPoolTeacher {
    k: usize,
    hop_ms: f64,
    n_mels: usize,
}

impl MeanPoolTeacher {
    pub fn new(k: usize, hop_ms: f64, n_mels: usize) -> Self {
        Self { k: k.max(1), hop_ms, n_mels }
    }
}

impl Teacher for MeanPoolTeacher {
    fn frame_stride_ms(&self) -> f64 {
        self.k as f64 * self.hop_ms
    }

    fn feature_dim(&self) -> usize {
        self.n_mels
    }

    fn forward(&self, clean: &LogMelSpectrogram) -> Result<Array2<f64>> {
        if clean.n_mels() != self.n_mels {
            return Err(M2dsError::shape(format!("teacher expects {} mels, got {}", self.n_mels, clean.n_mels())));
        }
        let n = clean.n_frames() / self.k;
        if n == 0 {
            return Err(M2dsError::invalid("input shorter than one teacher frame"));
        }
        let v = clean.values();
        let mut out = Array2::zeros((n, self.n_mels));
        for t in 0..n {
            let block = v.slice(s![.., t * self.k..(t + 1) * self.k]);
            out.row_mut(t).assign(&block.mean_axis(Axis(1)).expect("k >= 1"));
        }
        Ok(out)
    }
}

pub struct RandomEncoderTeacher {
    encoder: Encoder,
    patch: PatchConfig,
    hop_ms: f64,
}

impl RandomEncoderTeacher {
    pub fn new(seed: u64, frontend: &FrontendConfig) -> Result<Self> {
        let cfg = EncoderConfig::tiny();
        let patch = PatchConfig { patch_freq: frontend.n_mels, patch_time: 2, embed_dim: cfg.embed_dim };
        let mut rng = seeding::rng_for(seed, &[seeding::STREAM_TEACHER]);
        let encoder = Encoder::init(&cfg, patch.patch_len(), &mut rng);
        Ok(Self { encoder, patch, hop_ms: frontend.hop_ms })
    }
}

impl Teacher for RandomEncoderTeacher {
    fn frame_stride_ms(&self) -> f64 {
        self.patch.patch_time as f64 * self.hop_ms
    }

    fn feature_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    fn forward(&self, clean: &LogMelSpectrogram) -> Result<Array2<f64>> {
        let grid = patchify(clean, &self.patch)?;
        let pos = PositionalEncoding::new(grid.n_freq_patches, grid.n_time_patches, self.patch.embed_dim)?;
        let tokens = self.encoder.embed(&grid, &pos)?;
        Ok(self.encoder.forward(&tokens, false)?.output)
    }

    fn parameters(&self) -> Vec<f64> {
        self.encoder.params().iter().flat_map(|(_, a)| a.iter().copied()).collect()
    }
}

/// Serves precomputed features. The requested segment is located through
/// the spectrogram's origin (clip id and frame offset).
pub struct ArchiveTeacher {
    features: BTreeMap<String, Array2<f64>>,
    stride_ms: f64,
    dim: usize,
    hop_ms: f64,
}

impl ArchiveTeacher {
    pub fn load(path: &Path, hop_ms: f64) -> Result<Self> {
        let archive = ArrayArchive::load(path)?;
        let stride_ms: f64 = archive
            .header_value("frame_stride_ms")?
            .parse()
            .map_err(|_| M2dsError::Archive("frame_stride_ms is not a number".into()))?;
        Self::from_features(archive.arrays, stride_ms, hop_ms)
    }

    pub fn from_features(features: BTreeMap<String, Array2<f64>>, stride_ms: f64, hop_ms: f64) -> Result<Self> {
        let dim = features.values().next().map(|a| a.ncols()).unwrap_or(0);
        if dim == 0 || features.values().any(|a| a.ncols() != dim) {
            return Err(M2dsError::Archive("teacher archive is empty or has mixed feature widths".into()));
        }
        if !(stride_ms > 0.0) {
            return Err(M2dsError::Archive("teacher stride must be positive".into()));
        }
        Ok(Self { features, stride_ms, dim, hop_ms })
    }
}

impl Teacher for ArchiveTeacher {
    fn frame_stride_ms(&self) -> f64 {
        self.stride_ms
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, clean: &LogMelSpectrogram) -> Result<Array2<f64>> {
        let origin = clean
            .origin
            .as_ref()
            .ok_or_else(|| M2dsError::invalid("archive teacher needs the segment's clip id and offset"))?;
        let feats = self
            .features
            .get(&origin.clip_id)
            .ok_or_else(|| M2dsError::invalid(format!("clip `{}` not in teacher archive", origin.clip_id)))?;
        let ratio = self.hop_ms / self.stride_ms;
        let start = (origin.frame_offset as f64 * ratio + 1e-9).floor() as usize;
        let n = (clean.n_frames() as f64 * ratio + 1e-9).floor() as usize;
        if n == 0 || start + n > feats.nrows() {
            return Err(M2dsError::invalid(format!(
                "segment {start}+{n} outside {} teacher frames of `{}`",
                feats.nrows(),
                origin.clip_id
            )));
        }
        Ok(feats.slice(s![start..start + n, ..]).to_owned())
    }
}

/// Runs a teacher over whole clips and stores the features as an archive
/// readable by [`ArchiveTeacher`].
pub fn export_teacher_features<'a>(
    teacher: &dyn Teacher,
    clips: impl IntoIterator<Item = (&'a str, &'a LogMelSpectrogram)>,
    path: &Path,
) -> Result<()> {
    let mut feats = BTreeMap::new();
    for (id, spec) in clips {
        feats.insert(id.to_string(), teacher.forward(spec)?);
    }
    let header = BTreeMap::from([("frame_stride_ms".to_string(), format!("{}", teacher.frame_stride_ms()))]);
    save_feature_archive(path, &feats, FrameAxis::Rows, header)
}
