//! Containers of named `f64` matrices.
//!
//! On disk an archive is a safetensors file whose tensors are the named
//! matrices (dtype F64, rank 2) and whose metadata holds one entry,
//! `header`, with plain `key=value` text. Keeping the header in a single
//! entry makes the bytes a pure function of the content.
//!
//! Feature archives (one matrix per clip) get a sidecar `<file>.manifest`
//! with one `clip_id n_frames` line per clip.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::parse_key_values;
use crate::error::{M2dsError, Result};

const HEADER_KEY: &str = "header";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayArchive {
    pub header: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

impl ArrayArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let bytes = a.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), bytes, vec![a.nrows(), a.ncols()])
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, bytes, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.as_str(), v))
                    .map_err(|e| M2dsError::Archive(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let header_text = crate::config::write_key_values(self.header.iter().map(|(k, v)| (k.as_str(), v.clone())));
        let meta = Some(HashMap::from([(HEADER_KEY.to_string(), header_text)]));
        safetensors::serialize(views, &meta).map_err(|e| M2dsError::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| M2dsError::Archive(e.to_string()))?;
        let header = match meta.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)) {
            Some(text) => parse_key_values(text)?,
            None => BTreeMap::new(),
        };
        let st = SafeTensors::deserialize(bytes).map_err(|e| M2dsError::Archive(e.to_string()))?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
                return Err(M2dsError::Archive(format!(
                    "`{name}`: expected a rank-2 F64 tensor, found {:?} {:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let (r, c) = (view.shape()[0], view.shape()[1]);
            let data: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let a = Array2::from_shape_vec((r, c), data).map_err(|e| M2dsError::Archive(e.to_string()))?;
            arrays.insert(name, a);
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| M2dsError::Archive(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| M2dsError::Archive(format!("missing array `{name}`")))
    }

    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| M2dsError::Archive(format!("missing header key `{key}`")))
    }
}

/// Which matrix axis indexes frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameAxis {
    /// `n_mels × n_frames` spectrograms
    Columns,
    /// `n_frames × dim` feature sequences
    Rows,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes a per-clip archive plus its manifest.
pub fn save_feature_archive(
    path: &Path,
    clips: &BTreeMap<String, Array2<f64>>,
    axis: FrameAxis,
    mut header: BTreeMap<String, String>,
) -> Result<()> {
    header.insert(
        "frame_axis".into(),
        match axis {
            FrameAxis::Columns => "columns".into(),
            FrameAxis::Rows => "rows".into(),
        },
    );
    let archive = ArrayArchive { header, arrays: clips.clone() };
    archive.save(path)?;
    let mut manifest = String::new();
    for (id, a) in clips {
        let frames = match axis {
            FrameAxis::Columns => a.ncols(),
            FrameAxis::Rows => a.nrows(),
        };
        manifest.push_str(&format!("{id} {frames}\n"));
    }
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next().and_then(|n| n.parse().ok()), parts.next()) {
                (Some(id), Some(n), None) => Ok((id.to_string(), n)),
                _ => Err(M2dsError::Archive(format!("bad manifest line `{l}`"))),
            }
        })
        .collect()
}
