//! Token-grid data model, seeded synthetic grids and the tensor file format.
//!
//! A grid holds `T·H·W` tokens of width `d` as little-endian `f32`, row-major
//! in `(t, h, w, d)` order. Token `(τ, x, y)` has flat index `τ·H·W + x·W + y`.
//!
//! Synthetic grids come from ChaCha8 seeded with `seed_from_u64(seed)` and are
//! filled token-major, then channel:
//! * `uniform-unit`: `(next_u32 >> 8) · 2⁻²⁴`, in `[0, 1)`.
//! * `standard-normal`: Box–Muller cosine branch over two draws
//!   `u1 = ((next_u64 >> 11) + 1) · 2⁻⁵³` and `u2 = (next_u64 >> 11) · 2⁻⁵³`,
//!   evaluated in `f64` and rounded to `f32`.
//!
//! Block smoothing applies a separable box filter to the iid field, axis by
//! axis in `t`, `h`, `w` order. The window for size `k` at coordinate `x`
//! spans `x - (k-1)/2 ..= x - (k-1)/2 + k - 1`, clipped to the grid, and the
//! filtered value is the mean over the clipped window.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Grid extents `(T, H, W, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[usize; 4]")]
pub struct GridDims {
    pub t_frames: usize,
    pub h_rows: usize,
    pub w_cols: usize,
    pub d_model: usize,
}

impl From<GridDims> for [usize; 4] {
    fn from(d: GridDims) -> Self {
        [d.t_frames, d.h_rows, d.w_cols, d.d_model]
    }
}

impl TryFrom<[usize; 4]> for GridDims {
    type Error = Error;

    fn try_from(v: [usize; 4]) -> Result<Self> {
        GridDims::new(v[0], v[1], v[2], v[3])
    }
}

impl GridDims {
    pub fn new(t_frames: usize, h_rows: usize, w_cols: usize, d_model: usize) -> Result<Self> {
        let dims = Self {
            t_frames,
            h_rows,
            w_cols,
            d_model,
        };
        if [t_frames, h_rows, w_cols, d_model].contains(&0) {
            return Err(Error::Dimension(format!("all dims must be >= 1, got {dims}")));
        }
        let total = t_frames
            .checked_mul(h_rows)
            .and_then(|v| v.checked_mul(w_cols))
            .and_then(|v| v.checked_mul(d_model))
            .and_then(|v| v.checked_mul(4));
        if total.is_none() {
            return Err(Error::Dimension(format!("dimension product overflows for {dims}")));
        }
        Ok(dims)
    }

    pub fn n_tokens(&self) -> usize {
        self.t_frames * self.h_rows * self.w_cols
    }

    pub fn n_values(&self) -> usize {
        self.n_tokens() * self.d_model
    }

    pub fn flatten(&self, tau: usize, x: usize, y: usize) -> usize {
        tau * self.h_rows * self.w_cols + x * self.w_cols + y
    }

    pub fn unflatten(&self, i: usize) -> (usize, usize, usize) {
        let plane = self.h_rows * self.w_cols;
        (i / plane, (i % plane) / self.w_cols, i % self.w_cols)
    }
}

impl std::fmt::Display for GridDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.t_frames, self.h_rows, self.w_cols, self.d_model
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    dims: GridDims,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn new(dims: GridDims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.n_values() {
            return Err(Error::Shape(format!(
                "grid {dims} needs {} values, got {}",
                dims.n_values(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at offset {pos}")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(dims: GridDims, m: &Matrix<f32>) -> Result<Self> {
        if m.rows() != dims.n_tokens() || m.cols() != dims.d_model {
            return Err(Error::Shape(format!(
                "{}x{} matrix does not fit grid {dims}",
                m.rows(),
                m.cols()
            )));
        }
        Self::new(dims, m.as_slice().to_vec())
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.dims.d_model;
        &self.data[i * d..(i + 1) * d]
    }

    /// The grid viewed as an `N × d` token matrix.
    pub fn to_matrix(&self) -> Matrix<f32> {
        Matrix::from_vec(self.dims.n_tokens(), self.dims.d_model, self.data.clone())
            .expect("grid invariant guarantees matching length")
    }

    /// SHA-256 over the little-endian payload bytes, hex encoded.
    pub fn checksum(&self) -> String {
        checksum_f32(&self.data)
    }

    /// Mean cosine similarity between horizontally adjacent tokens `(τ,x,y)`
    /// and `(τ,x,y+1)`.
    pub fn mean_horizontal_cosine(&self) -> f64 {
        let dims = self.dims;
        let mut total = 0.0;
        let mut pairs = 0usize;
        for tau in 0..dims.t_frames {
            for x in 0..dims.h_rows {
                for y in 0..dims.w_cols.saturating_sub(1) {
                    let a = self.token(dims.flatten(tau, x, y));
                    let b = self.token(dims.flatten(tau, x, y + 1));
                    total += cosine_f64(a, b);
                    pairs += 1;
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

pub(crate) fn checksum_f32(values: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDistribution {
    StandardNormal,
    UniformUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correlation {
    Iid,
    /// Box-filter window sizes along `(t, h, w)`.
    BlockSmoothed([usize; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeededNoiseSpec {
    pub seed: u64,
    pub distribution: NoiseDistribution,
    pub correlation: Correlation,
}

impl SeededNoiseSpec {
    pub fn iid_normal(seed: u64) -> Self {
        Self {
            seed,
            distribution: NoiseDistribution::StandardNormal,
            correlation: Correlation::Iid,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

const TWO_POW_24: f32 = 16_777_216.0;
const TWO_POW_53: f64 = 9_007_199_254_740_992.0;

fn draw(rng: &mut ChaCha8Rng, dist: NoiseDistribution) -> f32 {
    match dist {
        NoiseDistribution::UniformUnit => (rng.next_u32() >> 8) as f32 / TWO_POW_24,
        NoiseDistribution::StandardNormal => {
            let u1 = ((rng.next_u64() >> 11) + 1) as f64 / TWO_POW_53;
            let u2 = (rng.next_u64() >> 11) as f64 / TWO_POW_53;
            ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
        }
    }
}

pub fn generate_grid(spec: &SeededNoiseSpec, dims: GridDims) -> Result<TokenGrid> {
    let dims = GridDims::new(dims.t_frames, dims.h_rows, dims.w_cols, dims.d_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data: Vec<f32> = (0..dims.n_values())
        .map(|_| draw(&mut rng, spec.distribution))
        .collect();
    if let Correlation::BlockSmoothed(windows) = spec.correlation {
        if windows.contains(&0) {
            return Err(Error::Dimension("smoothing windows must be >= 1".into()));
        }
        data = box_smooth(&data, dims, windows);
    }
    TokenGrid::new(dims, data)
}

/// `count` standard-normal draws from the same generator as [`generate_grid`].
pub fn seeded_normals(seed: u64, count: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| draw(&mut rng, NoiseDistribution::StandardNormal))
        .collect()
}

fn box_smooth(data: &[f32], dims: GridDims, windows: [usize; 3]) -> Vec<f32> {
    let extents = [dims.t_frames, dims.h_rows, dims.w_cols];
    let d = dims.d_model;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let k = windows[axis];
        if k == 1 {
            continue;
        }
        let mut next = vec![0.0f32; cur.len()];
        for i in 0..dims.n_tokens() {
            let (tau, x, y) = dims.unflatten(i);
            let mut coord = [tau, x, y];
            let centre = coord[axis] as isize;
            let lo = (centre - (k as isize - 1) / 2).max(0) as usize;
            let hi = ((centre - (k as isize - 1) / 2 + k as isize - 1) as usize).min(extents[axis] - 1);
            let count = (hi - lo + 1) as f32;
            let out = &mut next[i * d..(i + 1) * d];
            for pos in lo..=hi {
                coord[axis] = pos;
                let j = dims.flatten(coord[0], coord[1], coord[2]);
                for (o, v) in out.iter_mut().zip(&cur[j * d..(j + 1) * d]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= count);
        }
        cur = next;
    }
    cur
}

/// Sidecar metadata stored next to a tensor payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dims: [usize; 4],
    pub dtype: String,
    pub layout: String,
    pub endianness: String,
}

impl TensorMeta {
    pub fn for_dims(dims: GridDims) -> Self {
        Self {
            dims: dims.into(),
            dtype: "f32".into(),
            layout: "row-major-thwd".into(),
            endianness: "little".into(),
        }
    }
}

/// `a.bin` → `a.bin.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut name = payload.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_tensor(grid: &TokenGrid, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.data.len() * 4);
    for v in &grid.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta_path = sidecar_path(path);
    let meta = serde_json::to_string_pretty(&TensorMeta::for_dims(grid.dims))?;
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
}

pub fn read_tensor(path: &Path) -> Result<TokenGrid> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TensorMeta = serde_json::from_str(&meta_text).map_err(|e| Error::CorruptFile {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.dtype != "f32" {
        return Err(Error::UnsupportedFormat(format!("dtype {:?}", meta.dtype)));
    }
    if meta.layout != "row-major-thwd" {
        return Err(Error::UnsupportedFormat(format!("layout {:?}", meta.layout)));
    }
    if meta.endianness != "little" {
        return Err(Error::UnsupportedFormat(format!("endianness {:?}", meta.endianness)));
    }
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let dims = GridDims::try_from(meta.dims).map_err(|e| corrupt(e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != dims.n_values() * 4 {
        return Err(corrupt(format!(
            "dims {dims} need {} payload bytes, found {}",
            dims.n_values() * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    TokenGrid::new(dims, data).map_err(|e| corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(t: usize, h: usize, w: usize, d: usize) -> GridDims {
        GridDims::new(t, h, w, d).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SeededNoiseSpec::iid_normal(7);
        let a = generate_grid(&spec, dims(1, 1, 1, 4)).unwrap();
        let b = generate_grid(&spec, dims(1, 1, 1, 4)).unwrap();
        assert_eq!(a.data().len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_grid(&SeededNoiseSpec::iid_normal(7), dims(2, 2, 2, 8)).unwrap();
        let b = generate_grid(&SeededNoiseSpec::iid_normal(8), dims(2, 2, 2, 8)).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn uniform_draws_stay_in_unit_interval() {
        let spec = SeededNoiseSpec {
            seed: 3,
            distribution: NoiseDistribution::UniformUnit,
            correlation: Correlation::Iid,
        };
        let g = generate_grid(&spec, dims(2, 3, 4, 5)).unwrap();
        assert!(g.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    fn cosine_gain(seed: u64, d: usize) -> (f64, f64) {
        let iid = SeededNoiseSpec::iid_normal(seed);
        let smooth = SeededNoiseSpec {
            correlation: Correlation::BlockSmoothed([1, 2, 2]),
            ..iid
        };
        let a = generate_grid(&iid, dims(1, 4, 4, d)).unwrap();
        let b = generate_grid(&smooth, dims(1, 4, 4, d)).unwrap();
        (a.mean_horizontal_cosine(), b.mean_horizontal_cosine())
    }

    #[test]
    fn smoothing_raises_neighbour_similarity() {
        for seed in 0..200 {
            let (iid, smooth) = cosine_gain(seed, 8);
            assert!(smooth > iid, "seed {seed}: {smooth} vs {iid}");
        }
    }

    #[test]
    fn smoothing_raises_scalar_sign_agreement_on_average() {
        // With one channel the cosine is the product of signs, so single
        // seeds can tie or invert; the gain shows up across seeds.
        let runs: Vec<_> = (0..200).map(|s| cosine_gain(s, 1)).collect();
        let wins = runs.iter().filter(|(a, b)| b > a).count();
        let mean_iid = runs.iter().map(|r| r.0).sum::<f64>() / 200.0;
        let mean_smooth = runs.iter().map(|r| r.1).sum::<f64>() / 200.0;
        assert!(wins >= 150, "{wins} of 200");
        assert!(mean_smooth > mean_iid + 0.2);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(matches!(GridDims::new(0, 1, 1, 1), Err(Error::Dimension(_))));
        assert!(matches!(
            GridDims::new(usize::MAX, 2, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let g = generate_grid(&SeededNoiseSpec::iid_normal(1), dims(2, 2, 2, 4)).unwrap();
        write_tensor(&g, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::CorruptFile { .. })));

        fs::write(&path, &bytes).unwrap();
        let meta = fs::read_to_string(sidecar_path(&path)).unwrap();
        fs::write(sidecar_path(&path), meta.replace("\"f32\"", "\"f64\"")).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::UnsupportedFormat(_))));
    }

    proptest! {
        #[test]
        fn flat_index_bijection(t in 1usize..16, h in 1usize..16, w in 1usize..16) {
            let g = dims(t, h, w, 1);
            for i in 0..g.n_tokens() {
                let (a, b, c) = g.unflatten(i);
                prop_assert_eq!(g.flatten(a, b, c), i);
            }
        }

        #[test]
        fn tensor_round_trip_is_bit_exact(
            t in 1usize..16, h in 1usize..16, w in 1usize..16, d in 1usize..16, seed: u64,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.bin");
            let g = generate_grid(&SeededNoiseSpec::iid_normal(seed), dims(t, h, w, d)).unwrap();
            write_tensor(&g, &path).unwrap();
            let back = read_tensor(&path).unwrap();
            prop_assert_eq!(back.checksum(), g.checksum());
            prop_assert_eq!(back.dims(), g.dims());
        }
    }
}
