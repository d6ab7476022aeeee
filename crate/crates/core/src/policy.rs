//! Attention entropy and the entropy-aware sparsity allocator.
//!
//! Per step, each layer's normalised entropy `h` becomes an importance weight
//! `w = (1 - h)^γ`. Raw ratios `base · w / mean(w)` are clipped to the policy
//! bounds, and any budget lost to clipping is spread uniformly over layers not
//! pinned at the relevant bound, re-clipping each round, until the step mean
//! matches the base ratio or no layer is free.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::fixtures::read_tensor;

const LOG_EPS: f64 = 1e-12;

/// Normalised entropy of a key marginal: `-(1/ln N) Σ ā log(ā + ε)`, in `[0, 1]`.
pub fn marginal_entropy(marginal: &[f64]) -> Result<f64> {
    let n = marginal.len();
    if n < 2 {
        return Err(Error::UndefinedEntropy);
    }
    let h: f64 = marginal.iter().map(|&a| -a * (a + LOG_EPS).ln()).sum();
    Ok((h / (n as f64).ln()).clamp(0.0, 1.0))
}

pub fn attention_entropy(weights: &AttentionWeights) -> Result<f64> {
    if weights.n_tokens() < 2 {
        return Err(Error::UndefinedEntropy);
    }
    marginal_entropy(&weights.key_marginal())
}

/// `(1 - h)^γ` per layer.
pub fn importance_weights(entropies: &[f64], gamma: f64) -> Vec<f64> {
    entropies.iter().map(|&h| (1.0 - h).powf(gamma)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyProfile {
    /// `values[step][layer]`.
    pub values: Vec<Vec<f64>>,
    pub n_tokens_used: usize,
}

impl EntropyProfile {
    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn n_layers(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.n_layers();
        for (t, row) in self.values.iter().enumerate() {
            if row.len() != l {
                return Err(Error::Shape(format!(
                    "profile step {t} has {} layers, expected {l}",
                    row.len()
                )));
            }
            if let Some(h) = row.iter().find(|h| !(-1e-9..=1.0 + 1e-9).contains(*h)) {
                return Err(Error::Validation(format!("entropy {h} outside [0, 1] at step {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSchedule {
    pub steps: Vec<u32>,
    pub rho_attn_base: Vec<f64>,
    pub rho_token_base: Vec<f64>,
}

impl BaseSchedule {
    /// The same ratios at every step.
    pub fn uniform(steps: Vec<u32>, rho_attn: f64, rho_token: f64) -> Self {
        let n = steps.len();
        Self {
            steps,
            rho_attn_base: vec![rho_attn; n],
            rho_token_base: vec![rho_token; n],
        }
    }

    /// Same step ids with the per-step base ratios in reverse order.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.rho_attn_base.reverse();
        out.rho_token_base.reverse();
        out
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Validation("schedule has no steps".into()));
        }
        let increasing = self.steps.windows(2).all(|w| w[0] < w[1]);
        let decreasing = self.steps.windows(2).all(|w| w[0] > w[1]);
        if !(increasing || decreasing) {
            return Err(Error::Validation("schedule steps must be strictly monotone".into()));
        }
        for (name, v) in [("rho_attn_base", &self.rho_attn_base), ("rho_token_base", &self.rho_token_base)] {
            if v.len() != self.steps.len() {
                return Err(Error::Shape(format!(
                    "{name} has {} entries for {} steps",
                    v.len(),
                    self.steps.len()
                )));
            }
            if let Some(r) = v.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(Error::Validation(format!("{name} entry {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn default_gamma() -> f64 {
    1.0
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub rho_attn_min: f64,
    #[serde(default = "default_max")]
    pub rho_attn_max: f64,
    #[serde(default)]
    pub rho_token_min: f64,
    #[serde(default = "default_max")]
    pub rho_token_max: f64,
    /// Defaults to `2 · n_layers` when absent.
    #[serde(default)]
    pub renorm_max_iters: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub renorm_tolerance: f64,
    /// Cubes in the layout; merge counts are capped at `N - n_cubes`.
    #[serde(default)]
    pub n_cubes: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            rho_attn_min: 0.0,
            rho_attn_max: 1.0,
            rho_token_min: 0.0,
            rho_token_max: 1.0,
            renorm_max_iters: None,
            renorm_tolerance: default_tolerance(),
            n_cubes: 0,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::Validation(format!("gamma {} must be >= 1", self.gamma)));
        }
        for (lo, hi, name) in [
            (self.rho_attn_min, self.rho_attn_max, "rho_attn"),
            (self.rho_token_min, self.rho_token_max, "rho_token"),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Validation(format!(
                    "{name} bounds [{lo}, {hi}] must satisfy 0 <= min <= max <= 1"
                )));
            }
        }
        if !(self.renorm_tolerance > 0.0) {
            return Err(Error::Validation("renorm_tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityAllocation {
    pub rho_attn: Vec<Vec<f64>>,
    pub rho_token: Vec<Vec<f64>>,
    /// Merge counts `min(floor(ρ_token·N), N - n_cubes)`.
    pub k_token: Vec<Vec<usize>>,
    /// Whether the raw attention ratio had to be clipped.
    pub clipped_attn: Vec<Vec<bool>>,
    pub clipped_token: Vec<Vec<bool>>,
    /// Whether the step mean reached its base within tolerance.
    pub feasible_attn: Vec<bool>,
    pub feasible_token: Vec<bool>,
}

/// Outcome of allocating one ratio family for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAllocation {
    pub ratios: Vec<f64>,
    pub clipped: Vec<bool>,
    pub feasible: bool,
}

/// Pre-clip ratios `base · w_l / mean(w)`. Equal weights, including the
/// all-zero case of maximal entropy everywhere, give every layer the base.
pub fn raw_allocation(entropies: &[f64], gamma: f64, base: f64) -> Vec<f64> {
    let w = importance_weights(entropies, gamma);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if w.iter().any(|&x| x != w[0]) {
        w.iter().map(|&wl| base * wl / mean).collect()
    } else {
        vec![base; w.len()]
    }
}

pub fn allocate_step(
    entropies: &[f64],
    gamma: f64,
    base: f64,
    bounds: (f64, f64),
    max_iters: usize,
    tolerance: f64,
) -> StepAllocation {
    let (lo, hi) = bounds;
    let raw = raw_allocation(entropies, gamma, base);
    let clipped: Vec<bool> = raw.iter().map(|&r| r < lo || r > hi).collect();
    let mut ratios: Vec<f64> = raw.iter().map(|&r| r.clamp(lo, hi)).collect();
    let n = ratios.len() as f64;
    let mean = |r: &[f64]| r.iter().sum::<f64>() / n;
    for _ in 0..max_iters {
        let residual = base - mean(&ratios);
        if residual.abs() <= tolerance {
            break;
        }
        let free: Vec<usize> = (0..ratios.len())
            .filter(|&l| if residual > 0.0 { ratios[l] < hi } else { ratios[l] > lo })
            .collect();
        if free.is_empty() {
            break;
        }
        let delta = residual * n / free.len() as f64;
        for l in free {
            ratios[l] = (ratios[l] + delta).clamp(lo, hi);
        }
    }
    let feasible = (mean(&ratios) - base).abs() <= tolerance;
    StepAllocation {
        ratios,
        clipped,
        feasible,
    }
}

/// Merge count for one layer.
pub fn token_budget(rho_token: f64, n_tokens: usize, n_cubes: usize) -> usize {
    crate::merge::merge_count(rho_token, n_tokens, n_tokens.saturating_sub(n_cubes))
}

pub fn allocate(
    profile: &EntropyProfile,
    base: &BaseSchedule,
    params: &PolicyParams,
) -> Result<SparsityAllocation> {
    profile.validate()?;
    base.validate()?;
    params.validate()?;
    if profile.n_steps() != base.len() {
        return Err(Error::Shape(format!(
            "profile has {} steps, schedule has {}",
            profile.n_steps(),
            base.len()
        )));
    }
    let n_layers = profile.n_layers();
    if n_layers == 0 {
        return Err(Error::Shape("profile has no layers".into()));
    }
    let max_iters = params.renorm_max_iters.unwrap_or(2 * n_layers);
    let n = profile.n_tokens_used;
    let mut out = SparsityAllocation {
        rho_attn: Vec::new(),
        rho_token: Vec::new(),
        k_token: Vec::new(),
        clipped_attn: Vec::new(),
        clipped_token: Vec::new(),
        feasible_attn: Vec::new(),
        feasible_token: Vec::new(),
    };
    for (t, h) in profile.values.iter().enumerate() {
        let attn = allocate_step(
            h,
            params.gamma,
            base.rho_attn_base[t],
            (params.rho_attn_min, params.rho_attn_max),
            max_iters,
            params.renorm_tolerance,
        );
        let token = allocate_step(
            h,
            params.gamma,
            base.rho_token_base[t],
            (params.rho_token_min, params.rho_token_max),
            max_iters,
            params.renorm_tolerance,
        );
        out.k_token.push(
            token
                .ratios
                .iter()
                .map(|&r| token_budget(r, n, params.n_cubes))
                .collect(),
        );
        out.rho_attn.push(attn.ratios);
        out.clipped_attn.push(attn.clipped);
        out.feasible_attn.push(attn.feasible);
        out.rho_token.push(token.ratios);
        out.clipped_token.push(token.clipped);
        out.feasible_token.push(token.feasible);
    }
    Ok(out)
}

/// How per-sample entropies are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Mean,
    Min,
    Max,
}

/// Mean, min and max entropy per `(step, layer)` across samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBands {
    pub steps: Vec<u32>,
    pub n_layers: usize,
    pub n_samples: usize,
    pub n_tokens_used: usize,
    pub mean: Vec<Vec<f64>>,
    pub min: Vec<Vec<f64>>,
    pub max: Vec<Vec<f64>>,
}

impl EntropyBands {
    /// `samples[s][t][l]`.
    pub fn from_samples(steps: Vec<u32>, samples: &[Vec<Vec<f64>>], n_tokens_used: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("no entropy samples".into()))?;
        let n_steps = first.len();
        let n_layers = first.first().map_or(0, Vec::len);
        if steps.len() != n_steps {
            return Err(Error::Shape(format!(
                "{} step ids for {n_steps} steps",
                steps.len()
            )));
        }
        for s in samples {
            if s.len() != n_steps || s.iter().any(|row| row.len() != n_layers) {
                return Err(Error::Shape("entropy samples disagree in shape".into()));
            }
        }
        let fold = |init: f64, f: fn(f64, f64) -> f64| -> Vec<Vec<f64>> {
            (0..n_steps)
                .map(|t| {
                    (0..n_layers)
                        .map(|l| samples.iter().map(|s| s[t][l]).fold(init, f))
                        .collect()
                })
                .collect()
        };
        let sums = fold(0.0, |a, b| a + b);
        let count = samples.len() as f64;
        Ok(Self {
            steps,
            n_layers,
            n_samples: samples.len(),
            n_tokens_used,
            mean: sums
                .into_iter()
                .map(|row| row.into_iter().map(|v| v / count).collect())
                .collect(),
            min: fold(f64::INFINITY, f64::min),
            max: fold(f64::NEG_INFINITY, f64::max),
        })
    }

    pub fn profile(&self, how: Aggregation) -> EntropyProfile {
        let values = match how {
            Aggregation::Mean => &self.mean,
            Aggregation::Min => &self.min,
            Aggregation::Max => &self.max,
        };
        EntropyProfile {
            values: values.clone(),
            n_tokens_used: self.n_tokens_used,
        }
    }

    /// CSV with header `step,layer,mean,min,max,n_samples`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "layer", "mean", "min", "max", "n_samples"])?;
        for (t, step) in self.steps.iter().enumerate() {
            for l in 0..self.n_layers {
                w.write_record([
                    step.to_string(),
                    l.to_string(),
                    self.mean[t][l].to_string(),
                    self.min[t][l].to_string(),
                    self.max[t][l].to_string(),
                    self.n_samples.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Attention-weight dump location for one `(sample, step, layer)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct DumpKey {
    pub sample: usize,
    pub step: u32,
    pub layer: usize,
}

impl DumpKey {
    /// `s{sample}_t{step}_l{layer}.bin`
    pub fn file_name(&self) -> String {
        format!("s{}_t{}_l{}.bin", self.sample, self.step, self.layer)
    }

    pub fn parse(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".bin")?;
        let mut parts = stem.split('_');
        let sample = parts.next()?.strip_prefix('s')?.parse().ok()?;
        let step = parts.next()?.strip_prefix('t')?.parse().ok()?;
        let layer = parts.next()?.strip_prefix('l')?.parse().ok()?;
        parts.next().is_none().then_some(Self { sample, step, layer })
    }
}

/// Reads an `(H, N, N, 1)` dump and checks every row is stochastic within 1e-3.
pub fn read_weight_dump(path: &Path) -> Result<AttentionWeights> {
    let grid = read_tensor(path)?;
    let dims = grid.dims();
    if dims.h_rows != dims.w_cols || dims.d_model != 1 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("attention dump dims {dims} are not (H, N, N, 1)"),
        });
    }
    let weights = AttentionWeights::new(
        dims.t_frames,
        dims.h_rows,
        grid.data().iter().map(|&v| v as f64).collect(),
    )?;
    let err = weights.max_row_error();
    if err > 1e-3 {
        return Err(Error::Validation(format!(
            "{}: attention rows are not stochastic (max row-sum error {err})",
            path.display()
        )));
    }
    Ok(weights)
}

/// Entropy bands from a set of dumps. Every sample must provide the same
/// `(step, layer)` grid. Each map is normalised by its own token count, so
/// dumps taken after merging may differ in size; `n_tokens_used` records the
/// largest.
pub fn entropy_profile_from_dumps(dumps: &[(DumpKey, PathBuf)]) -> Result<EntropyBands> {
    let mut by_sample: BTreeMap<usize, BTreeMap<(u32, usize), f64>> = BTreeMap::new();
    let mut n_tokens = 0;
    for (key, path) in dumps {
        let weights = read_weight_dump(path)?;
        n_tokens = n_tokens.max(weights.n_tokens());
        let h = attention_entropy(&weights)?;
        by_sample
            .entry(key.sample)
            .or_default()
            .insert((key.step, key.layer), h);
    }
    let first = by_sample
        .values()
        .next()
        .ok_or_else(|| Error::Validation("no attention dumps found".into()))?;
    let steps: Vec<u32> = {
        let mut s: Vec<u32> = first.keys().map(|&(t, _)| t).collect();
        s.dedup();
        s
    };
    let n_layers = first.keys().map(|&(_, l)| l + 1).max().unwrap_or(0);
    let mut samples = Vec::with_capacity(by_sample.len());
    for (sample, entries) in &by_sample {
        let mut grid = Vec::with_capacity(steps.len());
        for &t in &steps {
            let mut row = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let h = entries.get(&(t, l)).ok_or_else(|| {
                    Error::Validation(format!("sample {sample} lacks a dump for step {t}, layer {l}"))
                })?;
                row.push(*h);
            }
            grid.push(row);
        }
        if entries.len() != steps.len() * n_layers {
            return Err(Error::Validation(format!(
                "sample {sample} has dumps outside the common step/layer grid"
            )));
        }
        samples.push(grid);
    }
    EntropyBands::from_samples(steps, &samples, n_tokens)
}

/// Collects `s*_t*_l*.bin` dumps from a directory.
pub fn find_dumps(dir: &Path) -> Result<Vec<(DumpKey, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(key) = entry.file_name().to_str().and_then(DumpKey::parse) {
            found.push((key, entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entropy_calibration() {
        let uniform = AttentionWeights::uniform(2, 8);
        assert!((attention_entropy(&uniform).unwrap() - 1.0).abs() < 1e-6);

        let mut one_hot = vec![0.0; 3 * 5 * 5];
        for row in one_hot.chunks_exact_mut(5) {
            row[2] = 1.0;
        }
        let w = AttentionWeights::new(3, 5, one_hot).unwrap();
        assert!(attention_entropy(&w).unwrap().abs() < 1e-6);

        let half = marginal_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((half - 0.5).abs() < 1e-6);

        assert!(matches!(
            attention_entropy(&AttentionWeights::uniform(1, 1)),
            Err(Error::UndefinedEntropy)
        ));
    }

    #[test]
    fn weight_examples() {
        let w = importance_weights(&[0.3, 0.3, 0.3], 2.5);
        assert!(w.iter().all(|&x| x == w[0]));
        let w1 = importance_weights(&[0.2, 0.8], 1.0);
        assert!((w1[0] - 0.8).abs() < 1e-15 && (w1[1] - 0.2).abs() < 1e-15);
        let w2 = importance_weights(&[0.2, 0.8], 2.0);
        assert!((w2[0] - 0.64).abs() < 1e-15 && (w2[1] - 0.04).abs() < 1e-15);
        assert!((w1[0] / w1[1] - 4.0).abs() < 1e-12);
        assert!((w2[0] / w2[1] - 16.0).abs() < 1e-9);
    }

    fn two_layer(base: f64) -> SparsityAllocation {
        let profile = EntropyProfile {
            values: vec![vec![0.2, 0.8]],
            n_tokens_used: 100,
        };
        let schedule = BaseSchedule::uniform(vec![0], base, base);
        let params = PolicyParams {
            rho_attn_max: 0.95,
            rho_token_max: 0.95,
            ..PolicyParams::default()
        };
        allocate(&profile, &schedule, &params).unwrap()
    }

    #[test]
    fn allocation_without_clipping() {
        let a = two_layer(0.5);
        assert!((a.rho_attn[0][0] - 0.8).abs() < 1e-12);
        assert!((a.rho_attn[0][1] - 0.2).abs() < 1e-12);
        assert_eq!(a.clipped_attn[0], vec![false, false]);
        assert!(a.feasible_attn[0]);
        assert_eq!(a.k_token[0], vec![80, 20]);
    }

    #[test]
    fn allocation_redistributes_clipped_budget() {
        let a = two_layer(0.7);
        assert!((a.rho_attn[0][0] - 0.95).abs() < 1e-12);
        assert!((a.rho_attn[0][1] - 0.45).abs() < 1e-12);
        assert_eq!(a.clipped_attn[0], vec![true, false]);
        assert!(a.feasible_attn[0] && a.feasible_token[0]);
    }

    #[test]
    fn equal_entropies_give_base() {
        for gamma in [1.0, 2.0, 7.5] {
            let profile = EntropyProfile {
                values: vec![vec![0.4; 5], vec![0.9; 5]],
                n_tokens_used: 64,
            };
            let schedule = BaseSchedule {
                steps: vec![1, 2],
                rho_attn_base: vec![0.3, 0.6],
                rho_token_base: vec![0.1, 0.25],
            };
            let params = PolicyParams {
                gamma,
                ..PolicyParams::default()
            };
            let a = allocate(&profile, &schedule, &params).unwrap();
            for t in 0..2 {
                assert!(a.rho_attn[t].iter().all(|&r| r == schedule.rho_attn_base[t]));
                assert!(a.rho_token[t].iter().all(|&r| r == schedule.rho_token_base[t]));
            }
        }
    }

    #[test]
    fn unreachable_budget_is_flagged() {
        let s = allocate_step(&[0.1, 0.5], 1.0, 0.9, (0.0, 0.5), 4, 1e-6);
        assert!(!s.feasible);
        assert_eq!(s.ratios, vec![0.5, 0.5]);
    }

    #[test]
    fn token_budget_caps_at_sources() {
        assert_eq!(token_budget(0.25, 256, 32), 64);
        assert_eq!(token_budget(1.0, 256, 32), 224);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let profile = EntropyProfile {
            values: vec![vec![0.2, 0.8]],
            n_tokens_used: 10,
        };
        let schedule = BaseSchedule::uniform(vec![0, 1], 0.5, 0.5);
        assert!(matches!(
            allocate(&profile, &schedule, &PolicyParams::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bands_from_two_samples() {
        let b = EntropyBands::from_samples(vec![0], &[vec![vec![0.3]], vec![vec![0.5]]], 4).unwrap();
        assert!((b.mean[0][0] - 0.4).abs() < 1e-15);
        assert_eq!(b.min[0][0], 0.3);
        assert_eq!(b.max[0][0], 0.5);
    }

    #[test]
    fn dump_names_round_trip() {
        let k = DumpKey {
            sample: 3,
            step: 12,
            layer: 1,
        };
        assert_eq!(DumpKey::parse(&k.file_name()), Some(k));
        assert_eq!(DumpKey::parse("s1_t2_l3.bin.json"), None);
        assert_eq!(DumpKey::parse("notes.bin"), None);
    }

    proptest! {
        #[test]
        fn feasible_steps_preserve_budget(
            h in prop::collection::vec(0.0f64..=1.0, 1..12),
            gamma in 1.0f64..6.0,
            base in 0.0f64..=1.0,
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (lo, hi) = (a.min(b), a.max(b));
            let s = allocate_step(&h, gamma, base, (lo, hi), 2 * h.len(), 1e-6);
            prop_assert!(s.ratios.iter().all(|&r| r >= lo && r <= hi));
            let mean = s.ratios.iter().sum::<f64>() / h.len() as f64;
            if s.feasible {
                prop_assert!((mean - base).abs() <= 1e-6);
            }
            if lo <= base && base <= hi {
                prop_assert!(s.feasible, "reachable budget {base} in [{lo}, {hi}] not met: {mean}");
            }
        }

        #[test]
        fn lower_entropy_never_gets_less(
            h in prop::collection::vec(0.0f64..=1.0, 2..10),
            gamma in 1.0f64..5.0,
            base in 0.01f64..=1.0,
        ) {
            let raw = raw_allocation(&h, gamma, base);
            for i in 0..h.len() {
                for j in 0..h.len() {
                    if h[i] < h[j] {
                        prop_assert!(raw[i] >= raw[j]);
                    }
                }
            }
        }

        #[test]
        fn gamma_sharpens_spread(
            h in prop::collection::btree_set(0u32..900, 2..8),
            gamma in 1.0f64..4.0,
        ) {
            let h: Vec<f64> = h.into_iter().map(|v| v as f64 / 1000.0).collect();
            let (h_min, h_max) = (h[0], h[h.len() - 1]);
            let spread = |g: f64| {
                let raw = raw_allocation(&h, g, 0.5);
                raw.iter().copied().fold(f64::MIN, f64::max) / raw.iter().copied().fold(f64::MAX, f64::min)
            };
            let expect = ((1.0 - h_min) / (1.0 - h_max)).powf(gamma);
            prop_assert!((spread(gamma) - expect).abs() <= 1e-9 * expect);
            prop_assert!(spread(gamma + 0.5) > spread(gamma));
        }
    }
}
