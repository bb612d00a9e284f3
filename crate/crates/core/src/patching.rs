//! Patch grids, fixed 2D sin-cos positional encoding and random masking.
//!
//! Tokens are ordered time-major with frequency fastest-varying: token
//! `t * n_freq_patches + f` holds frequency band `f` of frame-group `t`.
//! Within a patch, values are flattened frequency-major.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{M2dsError, Result};
use crate::frontend::LogMelSpectrogram;
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_freq: usize,
    pub patch_time: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn patch_len(&self) -> usize {
        self.patch_freq * self.patch_time
    }

    pub fn validate(&self, n_mels: usize) -> Result<()> {
        if self.patch_freq == 0 || self.patch_time == 0 {
            return Err(M2dsError::config("patch sizes must be >= 1"));
        }
        if !n_mels.is_multiple_of(self.patch_freq) {
            return Err(M2dsError::config(format!(
                "{n_mels} mel bins are not divisible by patch_freq {}",
                self.patch_freq
            )));
        }
        Ok(())
    }

    pub fn grid_dims(&self, n_mels: usize, n_frames: usize) -> Result<(usize, usize)> {
        self.validate(n_mels)?;
        let n_time = n_frames / self.patch_time;
        if n_time == 0 {
            return Err(M2dsError::invalid(format!(
                "{n_frames} frames do not fill one {}-frame patch",
                self.patch_time
            )));
        }
        Ok((n_mels / self.patch_freq, n_time))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub n_freq_patches: usize,
    pub n_time_patches: usize,
    pub patch_freq: usize,
    pub patch_time: usize,
    /// `N × patch_len`, one flattened patch per row.
    pub patches: Array2<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    pub fn token_index(&self, freq: usize, time: usize) -> usize {
        time * self.n_freq_patches + freq
    }
}

/// Trailing frames that do not fill a whole patch are dropped.
pub fn patchify(spec: &LogMelSpectrogram, cfg: &PatchConfig) -> Result<PatchGrid> {
    let values = spec.values();
    let (nf, nt) = cfg.grid_dims(values.nrows(), values.ncols())?;
    let (pf, pt) = (cfg.patch_freq, cfg.patch_time);
    let mut patches = Array2::zeros((nf * nt, pf * pt));
    for t in 0..nt {
        for f in 0..nf {
            let block = values.slice(s![f * pf..(f + 1) * pf, t * pt..(t + 1) * pt]);
            let mut row = patches.row_mut(t * nf + f);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(PatchGrid { n_freq_patches: nf, n_time_patches: nt, patch_freq: pf, patch_time: pt, patches })
}

/// Inverse of [`patchify`] over the covered region (`n_mels × nT·patch_time`).
pub fn unpatchify(grid: &PatchGrid) -> Array2<f64> {
    let (nf, nt, pf, pt) = (grid.n_freq_patches, grid.n_time_patches, grid.patch_freq, grid.patch_time);
    let mut out = Array2::zeros((nf * pf, nt * pt));
    for t in 0..nt {
        for f in 0..nf {
            let row = grid.patches.row(t * nf + f);
            let mut block = out.slice_mut(s![f * pf..(f + 1) * pf, t * pt..(t + 1) * pt]);
            for (dst, src) in block.iter_mut().zip(row.iter()) {
                *dst = *src;
            }
        }
    }
    out
}

pub const DEFAULT_MASK_RATIO: f64 = 0.6;

/// Round-half-up mask count.
pub fn mask_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64 + 0.5 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Builds a plan from explicit index sets, checking the partition.
    pub fn from_indices(n_patches: usize, mut visible: Vec<usize>, mut masked: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        masked.sort_unstable();
        let all: BTreeSet<usize> = visible.iter().chain(masked.iter()).copied().collect();
        if all.len() != visible.len() + masked.len()
            || all.len() != n_patches
            || all.iter().next_back().is_some_and(|&m| m >= n_patches)
        {
            return Err(M2dsError::invalid("visible/masked indices do not partition 0..N"));
        }
        if visible.is_empty() || masked.is_empty() {
            return Err(M2dsError::invalid("mask plan needs at least one visible and one masked patch"));
        }
        let ratio = masked.len() as f64 / n_patches as f64;
        Ok(Self { ratio, visible_idx: visible, masked_idx: masked, seed: 0 })
    }
}

/// Uniform random partition via a shuffled permutation.
pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(M2dsError::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if n_patches < 2 {
        return Err(M2dsError::invalid("masking needs at least two patches"));
    }
    let n_masked = mask_count(n_patches, ratio);
    if n_masked == 0 || n_masked == n_patches {
        return Err(M2dsError::invalid(format!(
            "ratio {ratio} over {n_patches} patches leaves an empty visible or masked set"
        )));
    }
    let mut perm: Vec<usize> = (0..n_patches).collect();
    perm.shuffle(&mut crate::seeding::rng(seed));
    let mut masked_idx = perm[..n_masked].to_vec();
    let mut visible_idx = perm[n_masked..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan { ratio, visible_idx, masked_idx, seed })
}

/// Fixed 2D sin-cos table: the first half of each row encodes the
/// frequency-patch index, the second half the time-patch index.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub n_freq_patches: usize,
    pub n_time_patches: usize,
    pub table: Array2<f64>,
}

fn sincos_1d(pos: usize, dim: usize, out: &mut [f64]) {
    let quarter = dim / 2;
    for k in 0..quarter {
        let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
        let angle = pos as f64 * omega;
        out[k] = angle.sin();
        out[quarter + k] = angle.cos();
    }
}

impl PositionalEncoding {
    pub fn new(n_freq_patches: usize, n_time_patches: usize, embed_dim: usize) -> Result<Self> {
        if embed_dim == 0 || !embed_dim.is_multiple_of(4) {
            return Err(M2dsError::config(format!(
                "2D sin-cos encoding needs embed_dim divisible by 4, got {embed_dim}"
            )));
        }
        let n = n_freq_patches * n_time_patches;
        let half = embed_dim / 2;
        let mut table = Array2::zeros((n, embed_dim));
        for t in 0..n_time_patches {
            for f in 0..n_freq_patches {
                let mut row = table.row_mut(t * n_freq_patches + f);
                let row = row.as_slice_mut().expect("row-major table");
                sincos_1d(f, half, &mut row[..half]);
                sincos_1d(t, half, &mut row[half..]);
            }
        }
        Ok(Self { n_freq_patches, n_time_patches, table })
    }

    pub fn len(&self) -> usize {
        self.table.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.nrows() == 0
    }

    pub fn rows(&self, idx: &[usize]) -> Array2<f64> {
        self.table.select(Axis(0), idx)
    }
}

/// `token_i = patch_i · W + b + pos_i`.
pub fn embed_patches(grid: &PatchGrid, embed: &Linear, pos: &PositionalEncoding) -> Result<Array2<f64>> {
    if embed.in_dim() != grid.patches.ncols() {
        return Err(M2dsError::shape(format!(
            "patch embedding expects width {}, patches have {}",
            embed.in_dim(),
            grid.patches.ncols()
        )));
    }
    if pos.len() != grid.len() || pos.table.ncols() != embed.out_dim() {
        return Err(M2dsError::shape(format!(
            "positional table {:?} does not match {} tokens of width {}",
            pos.table.dim(),
            grid.len(),
            embed.out_dim()
        )));
    }
    Ok(embed.forward(&grid.patches) + &pos.table)
}

/// Splits tokens into visible rows (ascending index order) and the masked
/// index list used for later reassembly.
pub fn partition(tokens: &Array2<f64>, plan: &MaskPlan) -> Result<(Array2<f64>, Vec<usize>)> {
    if tokens.nrows() != plan.n_patches() {
        return Err(M2dsError::shape(format!(
            "{} tokens vs a plan over {} patches",
            tokens.nrows(),
            plan.n_patches()
        )));
    }
    Ok((tokens.select(Axis(0), &plan.visible_idx), plan.masked_idx.clone()))
}

/// Places visible rows and masked rows back at their original indices.
pub fn reassemble(visible: &Array2<f64>, masked: &Array2<f64>, plan: &MaskPlan) -> Result<Array2<f64>> {
    if visible.nrows() != plan.visible_idx.len() || masked.nrows() != plan.masked_idx.len() {
        return Err(M2dsError::shape("row counts do not match the mask plan"));
    }
    if visible.ncols() != masked.ncols() {
        return Err(M2dsError::shape("visible and masked rows differ in width"));
    }
    let mut out = Array2::zeros((plan.n_patches(), visible.ncols()));
    for (row, &i) in plan.visible_idx.iter().enumerate() {
        out.row_mut(i).assign(&visible.row(row));
    }
    for (row, &i) in plan.masked_idx.iter().enumerate() {
        out.row_mut(i).assign(&masked.row(row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use rand::{Rng, SeedableRng};

    fn random_spec(rows: usize, cols: usize, seed: u64) -> LogMelSpectrogram {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = FrontendConfig { n_mels: rows, ..FrontendConfig::default() };
        LogMelSpectrogram::new(Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-5.0..5.0)), cfg)
            .unwrap()
    }

    fn pc(f: usize, t: usize) -> PatchConfig {
        PatchConfig { patch_freq: f, patch_time: t, embed_dim: 64 }
    }

    #[test]
    fn reference_patch_counts() {
        let spec = random_spec(80, 208, 0);
        let g = patchify(&spec, &pc(16, 16)).unwrap();
        assert_eq!((g.n_freq_patches, g.n_time_patches, g.len()), (5, 13, 65));
        let g = patchify(&spec, &pc(80, 2)).unwrap();
        assert_eq!((g.n_freq_patches, g.n_time_patches), (1, 104));
    }

    #[test]
    fn round_trip_40x4() {
        let spec = random_spec(80, 208, 1);
        let g = patchify(&spec, &pc(40, 4)).unwrap();
        assert_eq!(&unpatchify(&g), spec.values());
    }

    #[test]
    fn trailing_frames_dropped_and_bad_freq_rejected() {
        let spec = random_spec(80, 210, 2);
        let g = patchify(&spec, &pc(80, 4)).unwrap();
        assert_eq!(g.n_time_patches, 52);
        assert_eq!(unpatchify(&g), spec.values().slice(s![.., ..208]));
        assert!(patchify(&spec, &pc(30, 4)).is_err());
        assert!(patchify(&random_spec(80, 3, 3), &pc(80, 4)).is_err());
    }

    #[test]
    fn token_order_is_time_major() {
        // value encodes (mel row, frame)
        let cfg = FrontendConfig { n_mels: 4, ..FrontendConfig::default() };
        let spec = LogMelSpectrogram::new(
            Array2::from_shape_fn((4, 4), |(m, t)| (m * 10 + t) as f64),
            cfg,
        )
        .unwrap();
        let g = patchify(&spec, &pc(2, 2)).unwrap();
        assert_eq!(g.patches.row(0).to_vec(), vec![0.0, 1.0, 10.0, 11.0]);
        assert_eq!(g.patches.row(1).to_vec(), vec![20.0, 21.0, 30.0, 31.0]);
        assert_eq!(g.patches.row(2).to_vec(), vec![2.0, 3.0, 12.0, 13.0]);
        assert_eq!(g.token_index(1, 1), 3);
    }

    #[test]
    fn mask_plan_for_65_patches() {
        let p = sample_mask(65, 0.6, 42).unwrap();
        assert_eq!((p.masked_idx.len(), p.visible_idx.len()), (39, 26));
        assert_eq!(p, sample_mask(65, 0.6, 42).unwrap());
        assert_ne!(p.masked_idx, sample_mask(65, 0.6, 43).unwrap().masked_idx);
    }

    #[test]
    fn mask_rejects_degenerate_inputs() {
        assert!(sample_mask(1, 0.6, 0).is_err());
        assert!(sample_mask(10, 0.0, 0).is_err());
        assert!(sample_mask(10, 1.0, 0).is_err());
        assert!(sample_mask(2, 0.1, 0).is_err());
        assert!(sample_mask(2, 0.9, 0).is_err());
    }

    #[test]
    fn per_index_mask_frequency() {
        let mut counts = vec![0usize; 65];
        let plans = 10_000;
        for seed in 0..plans {
            for &i in &sample_mask(65, 0.6, seed).unwrap().masked_idx {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / plans as f64;
            assert!((f - 0.6).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn embed_cases() {
        let spec = random_spec(8, 8, 5);
        let cfg = PatchConfig { patch_freq: 4, patch_time: 2, embed_dim: 8 };
        let g = patchify(&spec, &cfg).unwrap();
        let pos = PositionalEncoding::new(g.n_freq_patches, g.n_time_patches, 8).unwrap();

        let zero_grid = PatchGrid { patches: Array2::zeros(g.patches.dim()), ..g.clone() };
        let lin = Linear::zeros(8, 8);
        assert_eq!(embed_patches(&zero_grid, &lin, &pos).unwrap(), pos.table);

        let mut ident = Linear::zeros(8, 8);
        ident.w = Array2::eye(8);
        let no_pos = PositionalEncoding { table: Array2::zeros(pos.table.dim()), ..pos.clone() };
        assert_eq!(embed_patches(&g, &ident, &no_pos).unwrap(), g.patches);

        assert!(embed_patches(&g, &Linear::zeros(7, 8), &pos).is_err());
    }

    #[test]
    fn embed_matches_naive_matmul() {
        let spec = random_spec(8, 12, 6);
        let cfg = PatchConfig { patch_freq: 4, patch_time: 3, embed_dim: 12 };
        let g = patchify(&spec, &cfg).unwrap();
        let pos = PositionalEncoding::new(2, 4, 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut lin = Linear::zeros(12, 12);
        lin.w.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        lin.b.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let got = embed_patches(&g, &lin, &pos).unwrap();
        for i in 0..g.len() {
            for j in 0..12 {
                let mut acc = lin.b[[0, j]] + pos.table[[i, j]];
                for k in 0..12 {
                    acc += g.patches[[i, k]] * lin.w[[k, j]];
                }
                assert!((got[[i, j]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn partition_small_and_round_trip() {
        let tokens = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let plan = MaskPlan::from_indices(3, vec![0, 2], vec![1]).unwrap();
        let (vis, masked) = partition(&tokens, &plan).unwrap();
        assert_eq!(vis.row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(vis.row(1).to_vec(), vec![4.0, 5.0]);
        assert_eq!(masked, vec![1]);

        assert!(MaskPlan::from_indices(3, vec![0, 1, 2], vec![]).is_err());
        assert!(partition(&Array2::zeros((4, 2)), &plan).is_err());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tokens = Array2::from_shape_fn((20, 5), |_| rng.gen_range(-1.0..1.0));
        let plan = sample_mask(20, 0.6, 17).unwrap();
        let (vis, masked) = partition(&tokens, &plan).unwrap();
        let masked_rows = tokens.select(Axis(0), &masked);
        assert_eq!(reassemble(&vis, &masked_rows, &plan).unwrap(), tokens);
    }

    #[test]
    fn positional_rows_are_distinct_and_bounded() {
        let pos = PositionalEncoding::new(4, 256, 64).unwrap();
        assert!(pos.table.iter().all(|v| v.abs() <= 1.0));
        let rows: Vec<Vec<u64>> = pos
            .table
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let unique: BTreeSet<_> = rows.iter().collect();
        assert_eq!(unique.len(), 1024);
        assert_eq!(pos, PositionalEncoding::new(4, 256, 64).unwrap());
        assert!(PositionalEncoding::new(2, 2, 6).is_err());
    }
}
