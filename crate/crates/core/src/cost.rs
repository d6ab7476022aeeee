//! Analytical FLOP accounting for dense and sparsified runs.
//!
//! Convention: one multiply-add is 2 FLOPs; softmax and normalisation are not
//! counted. Per layer over `n` tokens of width `d`:
//! * score and value matmuls: `4·n²·d·density`
//! * Q, K, V projections `6·n·d²` plus the output projection `2·n·d²`
//! * MLP with expansion `e`: `4·e·n·d²`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_expansion() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub steps_dense: usize,
    pub steps_sparse: usize,
    #[serde(default = "default_expansion")]
    pub mlp_expansion: f64,
    /// Fixed per-video FLOPs outside the denoiser, added to both totals.
    #[serde(default)]
    pub overhead_flops: f64,
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.steps_dense == 0
            || self.steps_sparse == 0
            || !(self.mlp_expansion > 0.0)
            || !(self.overhead_flops >= 0.0)
        {
            return Err(Error::Parameter(format!("invalid cost config {self:?}")));
        }
        Ok(())
    }
}

/// `4·n²·d·density`.
pub fn score_value_flops(n_tokens: usize, density: f64, d_model: usize) -> f64 {
    let n = n_tokens as f64;
    4.0 * n * n * d_model as f64 * density
}

/// `8·n·d²` for the four projections.
pub fn projection_flops(n_tokens: usize, d_model: usize) -> f64 {
    let d = d_model as f64;
    8.0 * n_tokens as f64 * d * d
}

pub fn mlp_flops(n_tokens: usize, d_model: usize, expansion: f64) -> f64 {
    let d = d_model as f64;
    4.0 * expansion * n_tokens as f64 * d * d
}

/// Attention-block FLOPs: masked score/value matmuls plus projections.
pub fn attention_flops(n_tokens: usize, density: f64, cfg: &CostConfig) -> Result<f64> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Parameter(format!("density {density} outside (0, 1]")));
    }
    if n_tokens == 0 {
        return Err(Error::Parameter("attention over zero tokens".into()));
    }
    Ok(score_value_flops(n_tokens, density, cfg.d_model) + projection_flops(n_tokens, cfg.d_model))
}

/// Tokens and mask density one layer actually ran with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerWorkload {
    pub n_tokens: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub step: usize,
    pub layer: usize,
    pub n_tokens: usize,
    pub density: f64,
    pub flops_scores: f64,
    pub flops_attention: f64,
    pub flops_mlp: f64,
    pub flops_total: f64,
}

/// Measured wall-clock figures the modelled speedups upper-bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallclockReference {
    pub dit_speedup: f64,
    pub e2e_speedup: f64,
    pub note: String,
}

impl Default for WallclockReference {
    fn default() -> Self {
        Self {
            dit_speedup: 83.3,
            e2e_speedup: 22.7,
            note: "measured GPU wall-clock speedups (3 steps vs 50, attention sparsity 0.95, \
                   ~131K tokens); the FLOP model ignores unmasked costs and kernel overheads \
                   and is an upper bound on the 83.3x DiT figure"
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub dense_scores: f64,
    pub sparse_scores: f64,
    pub dense_attention: f64,
    pub sparse_attention: f64,
    pub dense_total: f64,
    pub sparse_total: f64,
    /// Ratio of score/value matmul FLOPs, dense over sparse.
    pub speedup_attention: f64,
    pub speedup_total: f64,
    pub wallclock_reference: WallclockReference,
}

/// Sum in ascending order so totals do not depend on step order.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Costs `workloads[step][layer]` against a dense baseline of `n_dense` tokens,
/// density 1 and `steps_dense` steps.
pub fn pipeline_cost(workloads: &[Vec<LayerWorkload>], n_dense: usize, cfg: &CostConfig) -> Result<CostReport> {
    cfg.validate()?;
    if workloads.len() != cfg.steps_sparse {
        return Err(Error::Shape(format!(
            "{} workload steps for steps_sparse = {}",
            workloads.len(),
            cfg.steps_sparse
        )));
    }
    let d = cfg.d_model;
    let mut layers = Vec::new();
    for (t, row) in workloads.iter().enumerate() {
        if row.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "step {t} has {} layers, config says {}",
                row.len(),
                cfg.n_layers
            )));
        }
        for (l, w) in row.iter().enumerate() {
            let attention = attention_flops(w.n_tokens, w.density, cfg)?;
            let mlp = mlp_flops(w.n_tokens, d, cfg.mlp_expansion);
            layers.push(LayerCost {
                step: t,
                layer: l,
                n_tokens: w.n_tokens,
                density: w.density,
                flops_scores: score_value_flops(w.n_tokens, w.density, d),
                flops_attention: attention,
                flops_mlp: mlp,
                flops_total: attention + mlp,
            });
        }
    }
    let dense_runs = (cfg.steps_dense * cfg.n_layers) as f64;
    let dense_scores = dense_runs * score_value_flops(n_dense, 1.0, d);
    let dense_attention = dense_runs * attention_flops(n_dense, 1.0, cfg)?;
    let dense_total = dense_attention + dense_runs * mlp_flops(n_dense, d, cfg.mlp_expansion) + cfg.overhead_flops;
    let sparse_scores = canonical_sum(layers.iter().map(|c| c.flops_scores).collect());
    let sparse_attention = canonical_sum(layers.iter().map(|c| c.flops_attention).collect());
    let sparse_total = canonical_sum(layers.iter().map(|c| c.flops_total).collect()) + cfg.overhead_flops;
    Ok(CostReport {
        speedup_attention: dense_scores / sparse_scores,
        speedup_total: dense_total / sparse_total,
        layers,
        dense_scores,
        sparse_scores,
        dense_attention,
        sparse_attention,
        dense_total,
        sparse_total,
        wallclock_reference: WallclockReference::default(),
    })
}

impl CostReport {
    /// CSV rows `step,layer,n_tokens,density,flops_scores,flops_attention,flops_mlp,flops_total`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.layers {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
