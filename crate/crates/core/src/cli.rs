//! Command-line entry points.
//!
//! Every command writes its outputs under `--out` together with a
//! `manifest.txt` holding the command line, the resolved configuration and
//! SHA-256 hashes of the produced files. `m2ds replay --manifest FILE`
//! re-runs a recorded command.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::config::{parse_key_values, write_key_values};
use crate::error::{M2dsError, Result};
use crate::evaluation::{
    corpus_logmels, generate_toy_corpus, layer_weights_text, read_toy_corpus, results_csv, run_eval_suite,
    write_toy_corpus, ProbeConfig, ProbeMode, ProbeReport, Task, ToyCorpusSpec,
};
use crate::frontend::{compute_dataset_stats, normalize, LogMelFrontend, LogMelSpectrogram};
use crate::teacher::{export_teacher_features, TeacherSpec};
use crate::training::{run_pretraining, PretrainConfig};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "m2ds", version, about = "Masked prediction with denoising distillation for speech, at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic labeled speech corpus and its noise corpus.
    MakeToyCorpus(MakeCorpusArgs),
    /// Pre-train an encoder on a corpus directory.
    Pretrain(PretrainArgs),
    /// Probe a frozen checkpoint on the toy tasks.
    Probe(ProbeArgs),
    /// Run ablation grids (pretrain + probe per cell) and summarize.
    Ablate(AblateArgs),
    /// Precompute teacher features for the archive teacher.
    ExportTeacher(ExportTeacherArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub n_clips: usize,
    #[arg(long, default_value_t = 32)]
    pub n_noise: usize,
    /// Clip duration in seconds.
    #[arg(long, default_value_t = 4.08)]
    pub duration: f64,
    /// Tasks and class counts, e.g. `pitch=2,speaker=4,emotion=3`.
    #[arg(long, default_value = "pitch=2,speaker=4,emotion=3")]
    pub classes: String,
}

/// Training settings shared by `pretrain` and `ablate`. Flags override the
/// config file.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// key=value config file (sections allowed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder preset: tiny or base.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub patch_freq: Option<usize>,
    #[arg(long)]
    pub patch_time: Option<usize>,
    /// Input duration in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub lambda_m2d: Option<f64>,
    #[arg(long)]
    pub lambda_off: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// meanpool[:K], random[:SEED], archive:PATH or none.
    #[arg(long)]
    pub teacher: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Any other setting as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory with `speech/*.wav` and (for alpha > 0) `noise/*.wav`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop and checkpoint after this many steps.
    #[arg(long)]
    pub stop_after_steps: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ProbeFlags {
    /// Comma-separated tasks; default: every task in the corpus.
    #[arg(long)]
    pub tasks: Option<String>,
    /// weighted-sum, final-layer or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, default_value_t = 300)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub probe_seed: u64,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub probe: ProbeFlags,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grids to run: any of alpha, patch, duration, task (comma-separated).
    #[arg(long, default_value = "alpha,patch,duration,task")]
    pub grids: String,
    #[arg(long, default_value = "0,0.2,1.0")]
    pub alphas: String,
    /// Patch sizes as FREQxTIME.
    #[arg(long, default_value = "80x2,80x4,40x4")]
    pub patches: String,
    #[arg(long, default_value = "2.08,4.00")]
    pub durations: String,
    /// Pre-training task rows (a: M2D only, b: distillation only,
    /// c: denoising distillation, d: M2D + distillation, e: all).
    #[arg(long, default_value = "a,b,d,e")]
    pub task_rows: String,
    /// Run cells concurrently (results are identical to sequential runs).
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub probe: ProbeFlags,
}

#[derive(Args, Debug)]
pub struct ExportTeacherArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// meanpool[:K] or random[:SEED].
    #[arg(long)]
    pub teacher: String,
    /// Output archive file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub config: Vec<(String, String)>,
    /// Relative path → SHA-256 of every output file.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("command".into(), self.command.clone()),
            ("seed".into(), self.seed.to_string()),
            ("crate_version".into(), env!("CARGO_PKG_VERSION").into()),
        ];
        for (i, a) in self.argv.iter().enumerate() {
            pairs.push((format!("argv.{i:03}"), a.clone()));
        }
        for (k, v) in &self.inputs {
            pairs.push((format!("input.{k}"), v.clone()));
        }
        for (k, v) in &self.config {
            pairs.push((format!("config.{k}"), v.clone()));
        }
        for (k, v) in &self.artifacts {
            pairs.push((format!("artifact.{k}"), v.clone()));
        }
        write_key_values(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let prefixed = |p: &str| -> BTreeMap<String, String> {
            kv.iter().filter_map(|(k, v)| k.strip_prefix(p).map(|k| (k.to_string(), v.clone()))).collect()
        };
        Ok(Self {
            command: kv.get("command").cloned().ok_or_else(|| M2dsError::config("manifest has no command"))?,
            argv: prefixed("argv.").into_values().collect(),
            seed: kv.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
            inputs: prefixed("input."),
            config: prefixed("config.").into_iter().collect(),
            artifacts: prefixed("artifact."),
        })
    }

    /// Hashes every file under `out_dir` (except the manifest) and writes
    /// the manifest there.
    fn finish(mut self, out_dir: &Path) -> Result<Self> {
        self.artifacts.clear();
        for f in files_under(out_dir)? {
            let rel = f.strip_prefix(out_dir).expect("under out_dir").to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE || rel.ends_with(&format!("/{MANIFEST_FILE}")) {
                continue;
            }
            self.artifacts.insert(rel, sha256_file(&f)?);
        }
        fs::write(out_dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(self)
    }
}

fn read_wav_dir(dir: &Path) -> Result<Vec<(String, crate::frontend::Waveform)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| M2dsError::invalid(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".wav")).map(str::to_string))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|id| {
            let w = crate::audio::read_wav(&dir.join(format!("{id}.wav")))?;
            Ok((id, w))
        })
        .collect()
}

/// Speech and noise log-mels from `speech/*.wav` and `noise/*.wav`.
pub fn load_audio_corpus(
    dir: &Path,
    cfg: &PretrainConfig,
) -> Result<(Vec<LogMelSpectrogram>, Vec<LogMelSpectrogram>)> {
    let fe = LogMelFrontend::new(cfg.frontend.clone())?;
    let compute = |items: Vec<(String, crate::frontend::Waveform)>| {
        items
            .par_iter()
            .map(|(id, w)| Ok(fe.compute(w)?.with_origin(id.clone(), 0)))
            .collect::<Result<Vec<_>>>()
    };
    let speech = compute(read_wav_dir(&dir.join("speech"))?)?;
    if speech.is_empty() {
        return Err(M2dsError::invalid(format!("no speech clips under {}", dir.join("speech").display())));
    }
    let noise_dir = dir.join("noise");
    let noise = if noise_dir.is_dir() { compute(read_wav_dir(&noise_dir)?)? } else { Vec::new() };
    Ok((speech, noise))
}

impl TrainFlags {
    pub fn resolve(&self) -> Result<PretrainConfig> {
        let cfg = self.resolve_unvalidated()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the config file and flags without validating, for grids
    /// whose cells complete the configuration.
    fn resolve_unvalidated(&self) -> Result<PretrainConfig> {
        let mut cfg = PretrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| M2dsError::config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply(&parse_key_values(&text)?)?;
        }
        let mut over = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                over.insert(k.to_string(), v);
            }
        };
        put("encoder.preset", self.preset.clone());
        put("train.alpha", self.alpha.map(|v| v.to_string()));
        put("patch.freq", self.patch_freq.map(|v| v.to_string()));
        put("patch.time", self.patch_time.map(|v| v.to_string()));
        put("train.duration", self.duration.map(|v| v.to_string()));
        put("objective.lambda_m2d", self.lambda_m2d.map(|v| v.to_string()));
        put("objective.lambda_off", self.lambda_off.map(|v| v.to_string()));
        put("train.tau", self.tau.map(|v| v.to_string()));
        put("train.seed", self.seed.map(|v| v.to_string()));
        put("teacher", self.teacher.clone());
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.warmup_epochs", self.warmup_epochs.map(|v| v.to_string()));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.base_lr", self.lr.map(|v| v.to_string()));
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| M2dsError::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            over.insert(k.trim().to_string(), v.trim().to_string());
        }
        cfg.apply(&over)?;
        Ok(cfg)
    }
}

fn pretrain_to(
    cfg: &PretrainConfig,
    corpus: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<crate::training::PretrainOutcome> {
    let (speech, noise) = load_audio_corpus(corpus, cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let outcome = run_pretraining(cfg, &speech, &noise, out, resume)?;
    fs::write(out.join("stats.txt"), outcome.stats.to_text())?;
    Ok(outcome)
}

fn probe_tasks(flags: &ProbeFlags, available: &[Task]) -> Result<Vec<Task>> {
    match &flags.tasks {
        None => Ok(available.to_vec()),
        Some(s) => s.split(',').filter(|t| !t.trim().is_empty()).map(Task::parse).collect(),
    }
}

fn probe_modes(flags: &ProbeFlags) -> Result<Vec<ProbeMode>> {
    match flags.mode.trim() {
        "both" => Ok(vec![ProbeMode::WeightedSum, ProbeMode::FinalLayer]),
        m => Ok(vec![ProbeMode::parse(m)?]),
    }
}

/// Loads a checkpoint, probes the corpus and returns the reports.
pub fn probe_checkpoint(checkpoint: &Path, corpus_dir: &Path, flags: &ProbeFlags) -> Result<Vec<ProbeReport>> {
    let ck = load_checkpoint(checkpoint)?;
    let corpus = read_toy_corpus(corpus_dir)?;
    if corpus.spec.sample_rate != ck.config.frontend.sample_rate {
        return Err(M2dsError::config(format!(
            "corpus sample rate {} Hz does not match the checkpoint's {} Hz",
            corpus.spec.sample_rate, ck.config.frontend.sample_rate
        )));
    }
    let tasks = probe_tasks(flags, &corpus.tasks())?;
    let modes = probe_modes(flags)?;
    let (speech, _) = corpus_logmels(&corpus, &ck.config.frontend)?;
    let clips = speech.iter().map(|s| normalize(s, &ck.stats)).collect::<Result<Vec<_>>>()?;
    let mut labels = BTreeMap::new();
    for t in &tasks {
        labels.insert(*t, corpus.task_labels(*t)?);
    }
    let cfg = ProbeConfig {
        epochs: flags.probe_epochs,
        lr: flags.probe_lr,
        seed: flags.probe_seed,
        ..ProbeConfig::default()
    };
    run_eval_suite(&ck.state, &clips, &labels, &tasks, &modes, &cfg)
}

fn cmd_make_toy_corpus(a: &MakeCorpusArgs, argv: &[String]) -> Result<String> {
    let spec = ToyCorpusSpec {
        n_clips: a.n_clips,
        n_noise_clips: a.n_noise,
        duration_s: a.duration,
        classes: ToyCorpusSpec::parse_classes(&a.classes)?,
        seed: a.seed,
        ..ToyCorpusSpec::default()
    };
    let corpus = generate_toy_corpus(&spec)?;
    write_toy_corpus(&corpus, &a.out)?;
    let m = RunManifest {
        command: "make-toy-corpus".into(),
        argv: argv.to_vec(),
        seed: a.seed,
        inputs: BTreeMap::new(),
        config: parse_key_values(&spec.to_text())?.into_iter().collect(),
        artifacts: BTreeMap::new(),
    }
    .finish(&a.out)?;
    Ok(format!("wrote {} speech and {} noise clips to {} ({} files)", a.n_clips, a.n_noise, a.out.display(), m.artifacts.len()))
}

fn cmd_pretrain(a: &PretrainArgs, argv: &[String]) -> Result<String> {
    let mut cfg = a.train.resolve()?;
    if a.stop_after_steps.is_some() {
        cfg.train.stop_after_steps = a.stop_after_steps;
    }
    let outcome = pretrain_to(&cfg, &a.corpus, &a.out, a.resume.as_deref())?;
    let mut inputs = BTreeMap::from([("corpus".to_string(), a.corpus.display().to_string())]);
    if let Some(r) = &a.resume {
        inputs.insert("resume".into(), r.display().to_string());
    }
    RunManifest {
        command: "pretrain".into(),
        argv: argv.to_vec(),
        seed: cfg.train.seed,
        inputs,
        config: cfg.to_pairs(),
        artifacts: BTreeMap::new(),
    }
    .finish(&a.out)?;
    let last = outcome.records.last().map(|r| r.log_line()).unwrap_or_default();
    Ok(format!(
        "{} at step {} ({}); last: {last}",
        if outcome.finished { "finished" } else { "stopped" },
        outcome.state.step,
        outcome.checkpoint.display()
    ))
}

fn cmd_probe(a: &ProbeArgs, argv: &[String]) -> Result<String> {
    let reports = probe_checkpoint(&a.checkpoint, &a.corpus, &a.probe)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("results.csv"), results_csv(&reports))?;
    fs::write(a.out.join("layer_weights.txt"), layer_weights_text(&reports))?;
    RunManifest {
        command: "probe".into(),
        argv: argv.to_vec(),
        seed: a.probe.probe_seed,
        inputs: BTreeMap::from([
            ("checkpoint".to_string(), a.checkpoint.display().to_string()),
            ("checkpoint_sha256".to_string(), sha256_file(&a.checkpoint)?),
            ("corpus".to_string(), a.corpus.display().to_string()),
        ]),
        config: vec![
            ("mode".into(), a.probe.mode.clone()),
            ("tasks".into(), a.probe.tasks.clone().unwrap_or_else(|| "all".into())),
            ("probe_epochs".into(), a.probe.probe_epochs.to_string()),
            ("probe_lr".into(), a.probe.probe_lr.to_string()),
        ],
        artifacts: BTreeMap::new(),
    }
    .finish(&a.out)?;
    Ok(results_csv(&reports))
}

/// One ablation cell: a named row of a table and its overrides.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub table: String,
    pub row: String,
    pub settings: BTreeMap<String, String>,
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse().map_err(|_| M2dsError::config(format!("bad {what} `{x}`"))))
        .collect()
}

fn kv(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Builds the grid. The alpha, patch and duration tables train masked
/// prediction alone; the task table toggles the two losses and denoising.
pub fn ablation_cells(a: &AblateArgs) -> Result<Vec<AblationCell>> {
    let m2d_only = |alpha: f64, pf: usize, pt: usize, dur: f64| {
        kv(&[
            ("train.alpha", alpha.to_string()),
            ("patch.freq", pf.to_string()),
            ("patch.time", pt.to_string()),
            ("train.duration", dur.to_string()),
            ("objective.lambda_m2d", "1".into()),
            ("objective.lambda_off", "0".into()),
        ])
    };
    let mut cells = Vec::new();
    for grid in a.grids.split(',').map(str::trim).filter(|g| !g.is_empty()) {
        match grid {
            "alpha" => {
                for alpha in list::<f64>(&a.alphas, "alpha")? {
                    cells.push(AblationCell {
                        table: "alpha".into(),
                        row: format!("{alpha:.1}"),
                        settings: m2d_only(alpha, 80, 4, 2.08),
                    });
                }
            }
            "patch" => {
                for p in a.patches.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (f, t) = p
                        .split_once('x')
                        .ok_or_else(|| M2dsError::config(format!("patch size `{p}` is not FREQxTIME")))?;
                    let pf = f.parse().map_err(|_| M2dsError::config(format!("bad patch size `{p}`")))?;
                    let pt = t.parse().map_err(|_| M2dsError::config(format!("bad patch size `{p}`")))?;
                    cells.push(AblationCell { table: "patch".into(), row: p.into(), settings: m2d_only(0.2, pf, pt, 2.08) });
                }
            }
            "duration" => {
                for d in list::<f64>(&a.durations, "duration")? {
                    cells.push(AblationCell {
                        table: "duration".into(),
                        row: format!("T={d:.2}s"),
                        settings: m2d_only(0.2, 80, 4, d),
                    });
                }
            }
            "task" => {
                for r in a.task_rows.split(',').map(str::trim).filter(|r| !r.is_empty()) {
                    let (l_m2d, l_off, alpha) = match r {
                        "a" => (1.0, 0.0, 0.2),
                        "b" => (0.0, 1.0, 0.0),
                        "c" => (0.0, 1.0, 0.2),
                        "d" => (1.0, 1.0, 0.0),
                        "e" => (1.0, 1.0, 0.2),
                        _ => return Err(M2dsError::config(format!("unknown task row `{r}` (expected a-e)"))),
                    };
                    let mut s = m2d_only(alpha, 80, 4, 2.08);
                    s.insert("objective.lambda_m2d".into(), l_m2d.to_string());
                    s.insert("objective.lambda_off".into(), l_off.to_string());
                    cells.push(AblationCell { table: "task".into(), row: format!("({r})"), settings: s });
                }
            }
            other => return Err(M2dsError::config(format!("unknown grid `{other}`"))),
        }
    }
    Ok(cells)
}

struct CellResult {
    cell: AblationCell,
    accuracies: Result<BTreeMap<Task, f64>>,
}

fn summary_csv(results: &[CellResult], tasks: &[Task]) -> String {
    let mut s = String::from("table,row,alpha,patch,duration,lambda_m2d,lambda_off");
    for t in tasks {
        write!(s, ",{}", t.name()).expect("write to string");
    }
    s.push_str(",status\n");
    for r in results {
        let g = |k: &str| r.cell.settings.get(k).cloned().unwrap_or_default();
        write!(
            s,
            "{},{},{},{}x{},{},{},{}",
            r.cell.table,
            r.cell.row,
            g("train.alpha"),
            g("patch.freq"),
            g("patch.time"),
            g("train.duration"),
            g("objective.lambda_m2d"),
            g("objective.lambda_off")
        )
        .expect("write to string");
        match &r.accuracies {
            Ok(acc) => {
                for t in tasks {
                    write!(s, ",{:.6}", acc.get(t).copied().unwrap_or(f64::NAN)).expect("write to string");
                }
                s.push_str(",ok\n");
            }
            Err(e) => {
                for _ in tasks {
                    s.push(',');
                }
                writeln!(s, ",error: {}", e.to_string().replace([',', '\n'], ";")).expect("write to string");
            }
        }
    }
    s
}

/// Per table and task, rows sorted from best to worst accuracy.
fn orderings_text(results: &[CellResult], tasks: &[Task]) -> String {
    let mut tables: Vec<&str> = results.iter().map(|r| r.cell.table.as_str()).collect();
    tables.dedup();
    let mut s = String::new();
    for table in tables {
        for t in tasks {
            let mut rows: Vec<(&str, f64)> = results
                .iter()
                .filter(|r| r.cell.table == table)
                .filter_map(|r| r.accuracies.as_ref().ok().and_then(|a| a.get(t)).map(|&v| (r.cell.row.as_str(), v)))
                .collect();
            rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            let body: Vec<String> = rows.iter().map(|(r, v)| format!("{r} ({v:.3})")).collect();
            writeln!(s, "{table}/{}: {}", t.name(), body.join(" >= ")).expect("write to string");
        }
    }
    s
}

fn cmd_ablate(a: &AblateArgs, argv: &[String]) -> Result<String> {
    let base = a.train.resolve_unvalidated()?;
    let cells = ablation_cells(a)?;
    let corpus = read_toy_corpus(&a.corpus)?;
    let tasks = probe_tasks(&a.probe, &corpus.tasks())?;
    let probe_flags = ProbeFlags { mode: "weighted-sum".into(), tasks: Some(tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")), ..a.probe.clone() };
    let run_cell = |cell: &AblationCell| -> Result<BTreeMap<Task, f64>> {
        let mut cfg = base.clone();
        cfg.apply(&cell.settings)?;
        cfg.validate()?;
        let dir = a.out.join("cells").join(format!("{}_{}", cell.table, cell.row.replace(['(', ')', '='], "")));
        let outcome = pretrain_to(&cfg, &a.corpus, &dir, None)?;
        let reports = probe_checkpoint(&outcome.checkpoint, &a.corpus, &probe_flags)?;
        fs::write(dir.join("results.csv"), results_csv(&reports))?;
        Ok(reports.iter().map(|r| (Task::parse(&r.task).expect("known task"), r.accuracy)).collect())
    };
    let accs: Vec<Result<BTreeMap<Task, f64>>> = if a.parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    let results: Vec<CellResult> =
        cells.into_iter().zip(accs).map(|(cell, accuracies)| CellResult { cell, accuracies }).collect();
    fs::create_dir_all(&a.out)?;
    let summary = summary_csv(&results, &tasks);
    fs::write(a.out.join("summary.csv"), &summary)?;
    fs::write(a.out.join("orderings.txt"), orderings_text(&results, &tasks))?;
    RunManifest {
        command: "ablate".into(),
        argv: argv.to_vec(),
        seed: base.train.seed,
        inputs: BTreeMap::from([("corpus".to_string(), a.corpus.display().to_string())]),
        config: base.to_pairs(),
        artifacts: BTreeMap::new(),
    }
    .finish(&a.out)?;
    Ok(summary)
}

fn cmd_export_teacher(a: &ExportTeacherArgs) -> Result<String> {
    let spec = TeacherSpec::parse(&a.teacher)?;
    if matches!(spec, TeacherSpec::Archive { .. }) {
        return Err(M2dsError::config("export needs a computed teacher (meanpool or random)"));
    }
    let cfg = PretrainConfig::default();
    let (speech, _) = load_audio_corpus(&a.corpus, &cfg)?;
    let stats = compute_dataset_stats(&speech, "teacher-export")?;
    let normed = speech.iter().map(|s| normalize(s, &stats)).collect::<Result<Vec<_>>>()?;
    let teacher = spec.build(&cfg.frontend)?;
    let ids: Vec<String> = normed.iter().map(|s| s.origin.as_ref().map(|o| o.clip_id.clone()).unwrap_or_default()).collect();
    export_teacher_features(teacher.as_ref(), ids.iter().map(String::as_str).zip(normed.iter()), &a.out)?;
    Ok(format!("wrote {} clips of `{spec}` features to {}", normed.len(), a.out.display()))
}

fn cmd_replay(a: &ReplayArgs) -> Result<String> {
    let text = fs::read_to_string(&a.manifest)
        .map_err(|e| M2dsError::config(format!("cannot read manifest {}: {e}", a.manifest.display())))?;
    let m = RunManifest::from_text(&text)?;
    let mut argv = m.argv.clone();
    if let Some(out) = &a.out {
        let pos = argv
            .iter()
            .position(|x| x == "--out")
            .ok_or_else(|| M2dsError::config("recorded command has no --out"))?;
        argv[pos + 1] = out.display().to_string();
    }
    let cli = Cli::try_parse_from(std::iter::once("m2ds".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| M2dsError::config(e.to_string()))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(M2dsError::config("refusing to replay a replay"));
    }
    dispatch(&cli.command, &argv)
}

fn dispatch(cmd: &Command, argv: &[String]) -> Result<String> {
    match cmd {
        Command::MakeToyCorpus(a) => cmd_make_toy_corpus(a, argv),
        Command::Pretrain(a) => cmd_pretrain(a, argv),
        Command::Probe(a) => cmd_probe(a, argv),
        Command::Ablate(a) => cmd_ablate(a, argv),
        Command::ExportTeacher(a) => cmd_export_teacher(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

pub fn exit_code(err: &M2dsError) -> i32 {
    match err {
        M2dsError::Config(_) | M2dsError::InvalidInput(_) => 1,
        _ => 2,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code: 0 success, 1 usage or configuration error, 2 runtime
/// failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli.command, &argv) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
