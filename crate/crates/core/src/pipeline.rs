//! Toy multi-layer, multi-step transformer loop wiring merging, cube-sparse
//! attention and the entropy policy together.
//!
//! Each layer: project keys for merge descriptors, merge the token states,
//! attend over the merged sequence (cubes become contiguous chunks of
//! `cube_size` merged rows), apply the MLP with residuals, then unmerge. A
//! layer whose merge plan is empty keeps the original 3D cube layout; a layer
//! allowed every cube runs the dense kernel.
//!
//! Step `s > 0` starts from `0.5 · previous output + 0.5 · fresh noise`, with
//! the noise seeded at `noise.seed + s`.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    cube_sparse_attention, dense_attention, k_cubes_for_sparsity, AttentionConfig, Projections, Retain,
};
use crate::cost::{pipeline_cost, CostConfig, CostReport, LayerWorkload};
use crate::cube::CubeLayout;
use crate::error::{Error, Result};
use crate::fixtures::{generate_grid, seeded_normals, write_tensor, GridDims, SeededNoiseSpec, TokenGrid};
use crate::matrix::Matrix;
use crate::merge::{build_merge_plan, merge, split_heads, token_descriptors, unmerge, MergeOptions};
use crate::policy::{
    allocate_step, marginal_entropy, BaseSchedule, DumpKey, EntropyBands, PolicyParams,
};

pub const CONFIG_VERSION: u32 = 1;
const NOISE_BLEND: f32 = 0.5;
const RMS_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Every ratio forced to zero.
    Dense,
    /// Base ratios applied to every layer.
    StaticSparse,
    /// Entropy-aware per-layer allocation.
    DynamicSparse,
    /// Static, with the per-step base ratios in reverse order.
    ReversedSchedule,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropySource {
    /// Entropies recorded by the same layer at the previous executed step.
    #[default]
    PreviousStep,
    /// A dense probe pass at the current step, run before allocating.
    Probe,
}

fn default_mlp_expansion() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub grid: GridDims,
    pub cube: [usize; 3],
    pub n_layers: usize,
    pub n_heads: usize,
    pub schedule: BaseSchedule,
    #[serde(default)]
    pub policy: PolicyParams,
    pub weight_seed: u64,
    pub noise: SeededNoiseSpec,
    pub mode: Mode,
    /// Steps of the dense baseline used for costing; defaults to the schedule length.
    #[serde(default)]
    pub steps_dense: Option<usize>,
    #[serde(default = "default_mlp_expansion")]
    pub mlp_expansion: usize,
    #[serde(default)]
    pub entropy_source: EntropySource,
    #[serde(default)]
    pub merge: MergeOptions,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Validation(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.n_layers == 0 || self.mlp_expansion == 0 {
            return Err(Error::Validation("n_layers and mlp_expansion must be >= 1".into()));
        }
        AttentionConfig::new(self.n_heads, self.grid.d_model)?;
        CubeLayout::build(self.grid_extent(), self.cube)?;
        self.schedule.validate()?;
        self.policy.validate()?;
        if self.steps_dense == Some(0) {
            return Err(Error::Validation("steps_dense must be >= 1".into()));
        }
        Ok(())
    }

    fn grid_extent(&self) -> [usize; 3] {
        [self.grid.t_frames, self.grid.h_rows, self.grid.w_cols]
    }

    /// The schedule the mode actually runs.
    pub fn effective_schedule(&self) -> BaseSchedule {
        match self.mode {
            Mode::ReversedSchedule => self.schedule.reversed(),
            _ => self.schedule.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerTrace {
    pub layer: usize,
    pub entropy: f64,
    pub rho_attn: f64,
    pub rho_token: f64,
    pub k_cubes: usize,
    pub n_cubes: usize,
    pub merged_len: usize,
    pub mask_density: f64,
    pub flops_attention: f64,
    pub flops_mlp: f64,
    pub wall_time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTrace {
    pub step: u32,
    pub base_rho_attn: f64,
    pub base_rho_token: f64,
    pub feasible_attn: bool,
    pub feasible_token: bool,
    pub checksum: String,
    pub layers: Vec<LayerTrace>,
}

pub const TRACE_CSV_HEADER: [&str; 12] = [
    "step",
    "layer",
    "entropy",
    "rho_attn",
    "rho_token",
    "k_cubes",
    "n_cubes",
    "merged_len",
    "mask_density",
    "flops_attention",
    "flops_mlp",
    "wall_time_us",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub version: u32,
    pub config: PipelineConfig,
    pub schedule: BaseSchedule,
    pub steps: Vec<StepTrace>,
    pub cost: CostReport,
}

impl TraceRecord {
    /// `entropies[step][layer]`.
    pub fn entropies(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| s.layers.iter().map(|l| l.entropy).collect())
            .collect()
    }

    pub fn workloads(&self) -> Vec<Vec<LayerWorkload>> {
        workloads_of(&self.steps)
    }

    pub fn checksums(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.checksum.as_str()).collect()
    }

    /// One CSV row per `(step, layer)`, columns as in [`TRACE_CSV_HEADER`].
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_CSV_HEADER)?;
        for s in &self.steps {
            for l in &s.layers {
                w.write_record([
                    s.step.to_string(),
                    l.layer.to_string(),
                    l.entropy.to_string(),
                    l.rho_attn.to_string(),
                    l.rho_token.to_string(),
                    l.k_cubes.to_string(),
                    l.n_cubes.to_string(),
                    l.merged_len.to_string(),
                    l.mask_density.to_string(),
                    l.flops_attention.to_string(),
                    l.flops_mlp.to_string(),
                    l.wall_time_us.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn workloads_of(steps: &[StepTrace]) -> Vec<Vec<LayerWorkload>> {
    steps
        .iter()
        .map(|s| {
            s.layers
                .iter()
                .map(|l| LayerWorkload {
                    n_tokens: l.merged_len,
                    density: l.mask_density,
                })
                .collect()
        })
        .collect()
}

/// Where to write per-layer attention weights, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dump_dir: Option<PathBuf>,
    pub sample: usize,
}

struct LayerWeights {
    attn: Projections<f32>,
    w_up: Matrix<f32>,
    w_down: Matrix<f32>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl LayerWeights {
    fn seeded(seed: u64, layer: usize, d: usize, expansion: usize) -> Self {
        let hidden = d * expansion;
        let base = mix_seed(seed, 2 * layer as u64 + 1);
        let mlp = seeded_normals(mix_seed(seed, 2 * layer as u64 + 2), 2 * d * hidden);
        let (up, down) = mlp.split_at(d * hidden);
        let scaled = |vals: &[f32], fan_in: usize| -> Vec<f32> {
            let s = 1.0 / (fan_in as f32).sqrt();
            vals.iter().map(|v| v * s).collect()
        };
        Self {
            attn: Projections::seeded(d, base),
            w_up: Matrix::from_vec(d, hidden, scaled(up, d)).unwrap(),
            w_down: Matrix::from_vec(hidden, d, scaled(down, hidden)).unwrap(),
        }
    }
}

fn rms_norm(x: &Matrix<f32>) -> Matrix<f32> {
    let mut out = x.clone();
    let d = x.cols() as f32;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

struct LayerRun {
    output: Matrix<f32>,
    entropy: f64,
    k_cubes: usize,
    n_cubes: usize,
    merged_len: usize,
    mask_density: f64,
    weights: Option<crate::attention::AttentionWeights>,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    attn_cfg: AttentionConfig,
    layout: CubeLayout,
    layers: Vec<LayerWeights>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.grid.d_model;
        Ok(Self {
            cfg,
            attn_cfg: AttentionConfig::new(cfg.n_heads, d)?,
            layout: CubeLayout::build(cfg.grid_extent(), cfg.cube)?,
            layers: (0..cfg.n_layers)
                .map(|l| LayerWeights::seeded(cfg.weight_seed, l, d, cfg.mlp_expansion))
                .collect(),
        })
    }

    fn layer(
        &self,
        x: &Matrix<f32>,
        layer: usize,
        rho_attn: f64,
        rho_token: f64,
        keep_weights: bool,
    ) -> Result<LayerRun> {
        let w = &self.layers[layer];
        let keys = rms_norm(x).matmul(&w.attn.w_k)?;
        let descriptors = token_descriptors(&split_heads(&keys, self.cfg.n_heads))?;
        let plan = build_merge_plan(&descriptors, &self.layout, rho_token, self.cfg.merge)?;

        let (merged, chunk_layout) = if plan.is_identity() {
            (x.clone(), None)
        } else {
            let m = merge(x, &plan)?;
            let chunks = CubeLayout::chunked(m.rows(), self.layout.cube_size())?;
            (m, Some(chunks))
        };
        let layout = chunk_layout.as_ref().unwrap_or(&self.layout);
        let n = merged.rows();
        let n_cubes = layout.n_cubes();
        let k_cubes = k_cubes_for_sparsity(rho_attn, n_cubes);
        let retain = if keep_weights { Retain::Weights } else { Retain::Marginal };

        let normed = rms_norm(&merged);
        let (attn, mask_density) = if k_cubes == n_cubes {
            (dense_attention(&normed, &w.attn, &self.attn_cfg, retain)?, 1.0)
        } else {
            let (out, mask) =
                cube_sparse_attention(&normed, &w.attn, &self.attn_cfg, layout, k_cubes, retain)?;
            (out, mask.density())
        };
        let mut y = merged.add(&attn.output)?;
        let hidden = rms_norm(&y).matmul(&w.w_up)?.map(gelu);
        y = y.add(&hidden.matmul(&w.w_down)?)?;
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite layer output".into()));
        }

        let output = if plan.is_identity() { y } else { unmerge(&y, &plan)? };
        let entropy = match attn.key_marginal.as_deref() {
            Some(m) if n >= 2 => marginal_entropy(m)?,
            // A single remaining token attends only to itself.
            _ => 0.0,
        };
        Ok(LayerRun {
            output,
            entropy,
            k_cubes,
            n_cubes,
            merged_len: n,
            mask_density,
            weights: attn.weights,
        })
    }

    fn probe_entropies(&self, x: &Matrix<f32>) -> Result<Vec<f64>> {
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let run = self.layer(&cur, l, 0.0, 0.0, false)?;
            out.push(run.entropy);
            cur = run.output;
        }
        Ok(out)
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(TokenGrid, TraceRecord)> {
    run_pipeline_with(cfg, &RunOptions::default())
}

pub fn run_pipeline_with(cfg: &PipelineConfig, opts: &RunOptions) -> Result<(TokenGrid, TraceRecord)> {
    let runner = Runner::new(cfg)?;
    let schedule = cfg.effective_schedule();
    let dims = cfg.grid;
    let n_layers = cfg.n_layers;
    let p = &cfg.policy;
    let max_iters = p.renorm_max_iters.unwrap_or(2 * n_layers);

    let mut x = generate_grid(&cfg.noise, dims)?.to_matrix();
    let mut prev_entropies: Option<Vec<f64>> = None;
    let mut steps = Vec::with_capacity(schedule.len());

    for (s, &step_id) in schedule.steps.iter().enumerate() {
        if s > 0 {
            let noise = generate_grid(&cfg.noise.with_seed(cfg.noise.seed.wrapping_add(s as u64)), dims)?;
            for (v, &n) in x.as_mut_slice().iter_mut().zip(noise.data()) {
                *v = (1.0 - NOISE_BLEND) * *v + NOISE_BLEND * n;
            }
        }
        let base_attn = schedule.rho_attn_base[s];
        let base_token = schedule.rho_token_base[s];
        let (rho_attn, rho_token, feasible_attn, feasible_token) = match cfg.mode {
            Mode::Dense => (vec![0.0; n_layers], vec![0.0; n_layers], true, true),
            Mode::StaticSparse | Mode::ReversedSchedule => {
                (vec![base_attn; n_layers], vec![base_token; n_layers], true, true)
            }
            Mode::DynamicSparse => {
                let h = match cfg.entropy_source {
                    EntropySource::Probe => Some(runner.probe_entropies(&x).map_err(|e| e.at(s, 0))?),
                    EntropySource::PreviousStep => prev_entropies.clone(),
                }
                .unwrap_or_else(|| vec![0.0; n_layers]);
                let a = allocate_step(
                    &h,
                    p.gamma,
                    base_attn,
                    (p.rho_attn_min, p.rho_attn_max),
                    max_iters,
                    p.renorm_tolerance,
                );
                let t = allocate_step(
                    &h,
                    p.gamma,
                    base_token,
                    (p.rho_token_min, p.rho_token_max),
                    max_iters,
                    p.renorm_tolerance,
                );
                (a.ratios, t.ratios, a.feasible, t.feasible)
            }
        };

        let mut layers = Vec::with_capacity(n_layers);
        let mut entropies = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let start = Instant::now();
            let run = runner
                .layer(&x, l, rho_attn[l], rho_token[l], opts.dump_dir.is_some())
                .map_err(|e| e.at(s, l))?;
            let elapsed = start.elapsed();
            if let (Some(dir), Some(w)) = (&opts.dump_dir, &run.weights) {
                let key = DumpKey {
                    sample: opts.sample,
                    step: step_id,
                    layer: l,
                };
                let n = w.n_tokens();
                let grid = TokenGrid::new(
                    GridDims::new(w.n_heads(), n, n, 1)?,
                    w.as_slice().iter().map(|&v| v as f32).collect(),
                )?;
                write_tensor(&grid, &dir.join(key.file_name()))?;
            }
            entropies.push(run.entropy);
            layers.push(LayerTrace {
                layer: l,
                entropy: run.entropy,
                rho_attn: rho_attn[l],
                rho_token: rho_token[l],
                k_cubes: run.k_cubes,
                n_cubes: run.n_cubes,
                merged_len: run.merged_len,
                mask_density: run.mask_density,
                flops_attention: 0.0,
                flops_mlp: 0.0,
                wall_time_us: elapsed.as_micros() as u64,
            });
            x = run.output;
        }
        prev_entropies = Some(entropies);
        steps.push(StepTrace {
            step: step_id,
            base_rho_attn: base_attn,
            base_rho_token: base_token,
            feasible_attn,
            feasible_token,
            checksum: crate::fixtures::checksum_f32(x.as_slice()),
            layers,
        });
    }

    let cost_cfg = CostConfig {
        n_layers,
        d_model: dims.d_model,
        n_heads: cfg.n_heads,
        steps_dense: cfg.steps_dense.unwrap_or(schedule.len()),
        steps_sparse: schedule.len(),
        mlp_expansion: cfg.mlp_expansion as f64,
        overhead_flops: 0.0,
    };
    let cost = pipeline_cost(&workloads_of(&steps), dims.n_tokens(), &cost_cfg)
        .map_err(|e| Error::Invariant(format!("trace cost accounting failed: {e}")))?;
    for c in &cost.layers {
        let lt = &mut steps[c.step].layers[c.layer];
        lt.flops_attention = c.flops_attention;
        lt.flops_mlp = c.flops_mlp;
    }
    let trace = TraceRecord {
        version: CONFIG_VERSION,
        config: cfg.clone(),
        schedule,
        steps,
        cost,
    };
    Ok((TokenGrid::from_matrix(dims, &x)?, trace))
}

/// Runs the pipeline once per noise seed and aggregates layer entropies.
pub fn entropy_ablation_with_seeds(cfg: &PipelineConfig, seeds: &[u64]) -> Result<EntropyBands> {
    if seeds.is_empty() {
        return Err(Error::Validation("entropy ablation needs at least one sample".into()));
    }
    let mut samples = Vec::with_capacity(seeds.len());
    let mut steps = Vec::new();
    for &seed in seeds {
        let sample_cfg = PipelineConfig {
            noise: cfg.noise.with_seed(seed),
            ..cfg.clone()
        };
        let (_, trace) = run_pipeline(&sample_cfg)?;
        steps = trace.steps.iter().map(|s| s.step).collect();
        samples.push(trace.entropies());
    }
    EntropyBands::from_samples(steps, &samples, cfg.grid.n_tokens())
}

/// `n_samples` runs with noise seeds `noise.seed, noise.seed + 1, …`.
pub fn entropy_ablation(cfg: &PipelineConfig, n_samples: usize) -> Result<EntropyBands> {
    let seeds: Vec<u64> = (0..n_samples as u64)
        .map(|i| cfg.noise.seed.wrapping_add(i))
        .collect();
    entropy_ablation_with_seeds(cfg, &seeds)
}
