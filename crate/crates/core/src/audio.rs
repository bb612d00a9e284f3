//! Mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{M2dsError, Result};
use crate::frontend::Waveform;

/// Writes 32-bit float mono.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads float or integer PCM; multi-channel files are averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = WavReader::open(path)?;
    let spec = r.spec();
    let samples: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect::<std::result::Result<_, _>>()?
        }
    };
    let ch = spec.channels as usize;
    if ch == 0 {
        return Err(M2dsError::invalid(format!("{}: no channels", path.display())));
    }
    let samples = if ch == 1 {
        samples
    } else {
        samples.chunks_exact(ch).map(|f| f.iter().sum::<f32>() / ch as f32).collect()
    };
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}
