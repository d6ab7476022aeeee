//! Wall-clock sweep of cube-sparse attention over token counts and sparsity
//! levels.
//!
//! For every token count the sparsity-0 configuration is the baseline: rows
//! report `speedup_vs_dense` as the median over rounds of `t(0) / t(ρ)`, both
//! timed in the same round. If 0 is not among the requested
//! levels it is timed anyway and left out of the output.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{cube_sparse_attention, k_cubes_for_sparsity, AttentionConfig, Projections, Retain};
use crate::cost::{projection_flops, score_value_flops};
use crate::cube::CubeLayout;
use crate::error::{Error, Result};
use crate::fixtures::{generate_grid, GridDims, SeededNoiseSpec};

pub const BENCH_VERSION: u32 = 1;

fn default_cube() -> [usize; 3] {
    [2, 4, 4]
}

fn default_d_model() -> usize {
    16
}

fn default_heads() -> usize {
    1
}

fn default_min_sample() -> f64 {
    0.2
}

fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub version: u32,
    pub token_counts: Vec<usize>,
    pub sparsity_levels: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_cube")]
    pub cube_dims: [usize; 3],
    /// Worker threads for the attention kernels; 1 when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Calls shorter than this are repeated inside one timed sample.
    #[serde(default = "default_min_sample")]
    pub min_sample_s: f64,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.version != BENCH_VERSION {
            return Err(Error::Validation(format!(
                "unsupported bench spec version {}, expected {BENCH_VERSION}",
                self.version
            )));
        }
        if self.repeats < 3 {
            return Err(Error::Validation(format!("repeats must be >= 3, got {}", self.repeats)));
        }
        if self.token_counts.is_empty() || self.sparsity_levels.is_empty() {
            return Err(Error::Validation("token_counts and sparsity_levels must be non-empty".into()));
        }
        if let Some(bad) = self.sparsity_levels.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Validation(format!("sparsity level {bad} outside [0, 1)")));
        }
        if !(self.min_sample_s >= 0.0 && self.min_sample_s.is_finite()) {
            return Err(Error::Validation("min_sample_s must be a finite non-negative time".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Validation("threads must be >= 1".into()));
        }
        AttentionConfig::new(self.n_heads, self.d_model)?;
        for &n in &self.token_counts {
            realize_grid(n, self.cube_dims)?;
        }
        Ok(())
    }

    pub fn threads(&self) -> usize {
        self.threads.unwrap_or(1)
    }
}

/// Picks a `(T, H, W)` grid with `T·H·W = n` that tiles into `cube` exactly,
/// keeping the cube grid as close to a cube as possible.
pub fn realize_grid(n: usize, cube: [usize; 3]) -> Result<[usize; 3]> {
    let size: usize = cube.iter().product();
    if size == 0 || n == 0 || !n.is_multiple_of(size) {
        return Err(Error::Layout(format!(
            "{n} tokens cannot be tiled by cubes {cube:?}"
        )));
    }
    let cubes = n / size;
    let mut best: Option<([usize; 3], usize)> = None;
    for a in (1..=cubes).filter(|a| cubes.is_multiple_of(*a)) {
        let rest = cubes / a;
        for b in (1..=rest).filter(|b| rest.is_multiple_of(*b)) {
            let c = rest / b;
            let spread = a.max(b).max(c) - a.min(b).min(c);
            if best.is_none_or(|(_, s)| spread < s) {
                best = Some(([a, b, c], spread));
            }
        }
    }
    let [a, b, c] = best.expect("cubes >= 1 has a factorisation").0;
    Ok([a * cube[0], b * cube[1], c * cube[2]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_tokens: usize,
    pub sparsity: f64,
    pub mean_wall_time_s: f64,
    pub flops: f64,
    pub speedup_vs_dense: f64,
    pub min_wall_time_s: f64,
    pub density: f64,
    pub k_cubes: usize,
    pub n_cubes: usize,
    pub grid_t: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub threads: usize,
    pub available_parallelism: usize,
    pub cpu_model: Option<String>,
    pub os: String,
    pub arch: String,
    pub crate_version: String,
    pub spec: BenchSpec,
}

impl BenchMetadata {
    fn collect(spec: &BenchSpec) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        Self {
            threads: spec.threads(),
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            spec: spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metadata: BenchMetadata,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn row(&self, n_tokens: usize, sparsity: f64) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.n_tokens == n_tokens && r.sparsity == sparsity)
    }
}

struct Timing {
    samples: Vec<f64>,
    mean: f64,
    min: f64,
    density: f64,
    k_cubes: usize,
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads())
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    let rows = pool.install(|| sweep(spec))?;
    Ok(BenchReport {
        metadata: BenchMetadata::collect(spec),
        rows,
    })
}

fn sweep(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let cfg = AttentionConfig::new(spec.n_heads, spec.d_model)?;
    let proj = Projections::<f32>::seeded(spec.d_model, spec.seed);
    let mut rows = Vec::new();
    for &n in &spec.token_counts {
        let [t, h, w] = realize_grid(n, spec.cube_dims)?;
        let dims = GridDims::new(t, h, w, spec.d_model)?;
        let x = generate_grid(&SeededNoiseSpec::iid_normal(spec.seed ^ n as u64), dims)?.to_matrix();
        let layout = CubeLayout::build([t, h, w], spec.cube_dims)?;

        let mut levels = spec.sparsity_levels.clone();
        if !levels.contains(&0.0) {
            levels.insert(0, 0.0);
        }
        let ks: Vec<usize> = levels
            .iter()
            .map(|&rho| k_cubes_for_sparsity(rho, layout.n_cubes()))
            .collect();
        let mut densities = vec![1.0; levels.len()];
        let mut samples = vec![Vec::with_capacity(spec.repeats); levels.len()];
        let mut inner = vec![1usize; levels.len()];
        let mut first = vec![0.0; levels.len()];
        for (i, &k) in ks.iter().enumerate() {
            for _ in 0..spec.warmup {
                cube_sparse_attention(&x, &proj, &cfg, &layout, k, Retain::Nothing)?;
            }
            // Calibration: short calls are batched so each sample lasts at
            // least `min_sample_s`.
            let start = Instant::now();
            let (_, mask) = cube_sparse_attention(&x, &proj, &cfg, &layout, k, Retain::Nothing)?;
            first[i] = start.elapsed().as_secs_f64();
            densities[i] = mask.density();
            if first[i] < spec.min_sample_s {
                inner[i] = (spec.min_sample_s / first[i].max(1e-9)).ceil() as usize;
            }
        }
        // When no level needs batching the calibration calls already form
        // the first round.
        if inner.iter().all(|&m| m == 1) {
            for (s, t) in samples.iter_mut().zip(&first) {
                s.push(*t);
            }
        }
        // Levels are interleaved within each round so slow drift in machine
        // load affects every level alike.
        for _ in 0..spec.repeats {
            for (i, &k) in ks.iter().enumerate() {
                if samples[i].len() == spec.repeats {
                    continue;
                }
                let start = Instant::now();
                for _ in 0..inner[i] {
                    cube_sparse_attention(&x, &proj, &cfg, &layout, k, Retain::Nothing)?;
                }
                samples[i].push(start.elapsed().as_secs_f64() / inner[i] as f64);
            }
        }
        let measured: Vec<(f64, Timing)> = levels
            .iter()
            .zip(samples)
            .enumerate()
            .map(|(i, (&rho, times))| {
                let timing = Timing {
                    mean: times.iter().sum::<f64>() / times.len() as f64,
                    min: times.iter().copied().fold(f64::INFINITY, f64::min),
                    samples: times,
                    density: densities[i],
                    k_cubes: ks[i],
                };
                (rho, timing)
            })
            .collect();
        let baseline = measured
            .iter()
            .find(|(r, _)| *r == 0.0)
            .map(|(_, t)| t.samples.clone())
            .expect("baseline measured");
        for (rho, timing) in measured {
            if !spec.sparsity_levels.contains(&rho) {
                continue;
            }
            rows.push(BenchRow {
                n_tokens: n,
                sparsity: rho,
                mean_wall_time_s: timing.mean,
                flops: score_value_flops(n, timing.density, spec.d_model) + projection_flops(n, spec.d_model),
                speedup_vs_dense: paired_speedup(&baseline, &timing.samples),
                min_wall_time_s: timing.min,
                density: timing.density,
                k_cubes: timing.k_cubes,
                n_cubes: layout.n_cubes(),
                grid_t: t,
                grid_h: h,
                grid_w: w,
            });
        }
    }
    Ok(rows)
}

/// Median over rounds of the baseline sample divided by the same round's sample.
fn paired_speedup(baseline: &[f64], samples: &[f64]) -> f64 {
    let mut ratios: Vec<f64> = baseline.iter().zip(samples).map(|(b, t)| b / t).collect();
    ratios.sort_by(f64::total_cmp);
    let mid = ratios.len() / 2;
    if ratios.len() % 2 == 1 {
        ratios[mid]
    } else {
        (ratios[mid - 1] + ratios[mid]) / 2.0
    }
}
