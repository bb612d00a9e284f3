//! Training checkpoints.
//!
//! A checkpoint is an [`ArrayArchive`] holding
//! - `online.<name>`: every θ tensor,
//! - `target.<name>`: every ξ tensor,
//! - `adam_m.<name>` / `adam_v.<name>`: optimizer moments,
//!
//! and a header with the format version, crate version, step counter,
//! seed, normalization statistics and the full run configuration
//! (`config.<key>`). Loading rebuilds the model from the stored
//! configuration and fails on any missing tensor or shape mismatch.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::archive::ArrayArchive;
use crate::error::{M2dsError, Result};
use crate::frontend::NormStats;
use crate::model::{init_model, ModelState};
use crate::nn::Params;
use crate::training::{AdamW, PretrainConfig};

pub const FORMAT: &str = "m2ds-checkpoint";
pub const FORMAT_VERSION: &str = "1";

pub struct Checkpoint {
    pub config: PretrainConfig,
    pub state: ModelState,
    pub optimizer: AdamW,
    pub stats: NormStats,
}

fn put<P: Params>(arrays: &mut BTreeMap<String, Array2<f64>>, prefix: &str, p: &P) {
    for (name, a) in p.params() {
        arrays.insert(format!("{prefix}.{name}"), a.clone());
    }
}

fn fill<P: Params>(archive: &ArrayArchive, prefix: &str, p: &mut P) -> Result<()> {
    for (name, a) in p.params_mut() {
        let key = format!("{prefix}.{name}");
        let stored = archive.get(&key)?;
        if stored.dim() != a.dim() {
            return Err(M2dsError::Archive(format!(
                "`{key}` has shape {:?}, the configured model expects {:?}",
                stored.dim(),
                a.dim()
            )));
        }
        a.assign(stored);
    }
    Ok(())
}

pub fn checkpoint_archive(
    state: &ModelState,
    opt: &AdamW,
    cfg: &PretrainConfig,
    stats: &NormStats,
) -> ArrayArchive {
    let mut header = BTreeMap::new();
    header.insert("format".to_string(), FORMAT.to_string());
    header.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    header.insert("crate_version".to_string(), env!("CARGO_PKG_VERSION").to_string());
    header.insert("step".to_string(), state.step.to_string());
    header.insert("optimizer_t".to_string(), opt.t.to_string());
    header.insert("seed".to_string(), cfg.train.seed.to_string());
    header.insert("stats.mean".to_string(), format!("{:e}", stats.mean));
    header.insert("stats.std".to_string(), format!("{:e}", stats.std));
    header.insert("stats.corpus_id".to_string(), stats.corpus_id.clone());
    header.insert("stats.n_frames_seen".to_string(), stats.n_frames_seen.to_string());
    for (k, v) in cfg.to_pairs() {
        header.insert(format!("config.{k}"), v);
    }
    let mut arrays = BTreeMap::new();
    put(&mut arrays, "online", &state.online);
    put(&mut arrays, "target", &state.target);
    put(&mut arrays, "adam_m", &opt.m);
    put(&mut arrays, "adam_v", &opt.v);
    ArrayArchive { header, arrays }
}

pub fn save_checkpoint(
    path: &Path,
    state: &ModelState,
    opt: &AdamW,
    cfg: &PretrainConfig,
    stats: &NormStats,
) -> Result<()> {
    checkpoint_archive(state, opt, cfg, stats).save(path)
}

fn parse_header<T: std::str::FromStr>(archive: &ArrayArchive, key: &str) -> Result<T> {
    archive
        .header_value(key)?
        .parse()
        .map_err(|_| M2dsError::Archive(format!("header `{key}` is malformed")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let archive = ArrayArchive::load(path)?;
    if archive.header_value("format")? != FORMAT {
        return Err(M2dsError::Archive(format!("{} is not a checkpoint", path.display())));
    }
    let version = archive.header_value("format_version")?;
    if version != FORMAT_VERSION {
        return Err(M2dsError::Archive(format!("unsupported checkpoint version {version}")));
    }
    let settings: BTreeMap<String, String> = archive
        .header
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let mut config = PretrainConfig::default();
    config.apply(&settings)?;
    config.validate()?;

    let teacher = match &config.teacher {
        Some(spec) => Some((spec.clone(), spec.build(&config.frontend)?)),
        None => None,
    };
    let mut state = init_model(&config.encoder, &config.patch, config.frontend.n_mels, teacher, config.train.seed)?;
    fill(&archive, "online", &mut state.online)?;
    fill(&archive, "target", &mut state.target)?;
    let mut optimizer = AdamW::new(&state.online);
    fill(&archive, "adam_m", &mut optimizer.m)?;
    fill(&archive, "adam_v", &mut optimizer.v)?;
    optimizer.t = parse_header(&archive, "optimizer_t")?;
    state.step = parse_header(&archive, "step")?;
    let stats = NormStats {
        mean: parse_header(&archive, "stats.mean")?,
        std: parse_header(&archive, "stats.std")?,
        corpus_id: archive.header_value("stats.corpus_id")?.to_string(),
        n_frames_seen: parse_header(&archive, "stats.n_frames_seen")?,
    };
    Ok(Checkpoint { config, state, optimizer, stats })
}
