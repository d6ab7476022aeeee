//! Multi-head attention kernels: dense, binary-masked and cube-sparse.
//!
//! Keys are consumed in tiles of at most [`KEY_TILE`] with a running softmax.
//! Dense and binary-masked kernels visit keys in ascending token order; a
//! cube mask that leaves out some cubes visits its selected cubes in
//! ascending cube order. Queries are processed in fixed work groups (blocks
//! of [`QUERY_BLOCK`] rows, or one query cube for cube masks), so results do
//! not depend on the rayon thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{pool_cubes, CubeLayout};
use crate::error::{Error, Result};
use crate::fixtures::seeded_normals;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const QUERY_BLOCK: usize = 64;
const KEY_TILE: usize = 256;
const PANEL: usize = 256;
const LANES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    n_heads: usize,
    d_model: usize,
}

impl AttentionConfig {
    pub fn new(n_heads: usize, d_model: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Parameter(format!(
                "{n_heads} heads do not evenly split d_model {d_model}"
            )));
        }
        Ok(Self { n_heads, d_model })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }
}

/// `W_Q`, `W_K`, `W_V`, `W_O`, each `d × d`, applied on the right of token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections<S> {
    pub w_q: Matrix<S>,
    pub w_k: Matrix<S>,
    pub w_v: Matrix<S>,
    pub w_o: Matrix<S>,
}

impl<S: Scalar> Projections<S> {
    /// Gaussian weights scaled by `1/sqrt(d)`, drawn in Q, K, V, O order.
    pub fn seeded(d_model: usize, seed: u64) -> Self {
        let scale = 1.0 / (d_model as f64).sqrt();
        let draws = seeded_normals(seed, 4 * d_model * d_model);
        let mut blocks = draws.chunks_exact(d_model * d_model).map(|c| {
            let vals = c
                .iter()
                .map(|&v| S::from_f64_lossy(v as f64 * scale))
                .collect();
            Matrix::from_vec(d_model, d_model, vals).unwrap()
        });
        Self {
            w_q: blocks.next().unwrap(),
            w_k: blocks.next().unwrap(),
            w_v: blocks.next().unwrap(),
            w_o: blocks.next().unwrap(),
        }
    }

    pub fn identity(d_model: usize) -> Self {
        Self {
            w_q: Matrix::identity(d_model),
            w_k: Matrix::identity(d_model),
            w_v: Matrix::identity(d_model),
            w_o: Matrix::identity(d_model),
        }
    }

    fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let d = cfg.d_model;
        for (name, w) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v), ("W_O", &self.w_o)] {
            if w.rows() != d || w.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    /// Row-major `n × n` allow-matrix.
    Dense { n: usize, allowed: Vec<bool> },
    /// For each query cube, the sorted key cubes it may attend to.
    Cubes {
        layout: CubeLayout,
        allowed: Vec<Vec<usize>>,
    },
}

impl AttentionMask {
    pub fn all_ones(n: usize) -> Self {
        AttentionMask::Dense {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn dense(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::Shape(format!(
                "dense mask for {n} tokens needs {} entries, got {}",
                n * n,
                allowed.len()
            )));
        }
        let mask = AttentionMask::Dense { n, allowed };
        mask.validate()?;
        Ok(mask)
    }

    pub fn cubes(layout: CubeLayout, mut allowed: Vec<Vec<usize>>) -> Result<Self> {
        if allowed.len() != layout.n_cubes() {
            return Err(Error::Shape(format!(
                "cube mask lists {} query cubes, layout has {}",
                allowed.len(),
                layout.n_cubes()
            )));
        }
        for list in &mut allowed {
            list.sort_unstable();
            list.dedup();
        }
        let mask = AttentionMask::Cubes { layout, allowed };
        mask.validate()?;
        Ok(mask)
    }

    fn validate(&self) -> Result<()> {
        match self {
            AttentionMask::Dense { n, allowed } => {
                for i in 0..*n {
                    if !allowed[i * n..(i + 1) * n].iter().any(|&a| a) {
                        return Err(Error::Mask(format!("query row {i} allows no keys")));
                    }
                }
            }
            AttentionMask::Cubes { layout, allowed } => {
                for (c, list) in allowed.iter().enumerate() {
                    if !list.contains(&c) {
                        return Err(Error::Mask(format!("query cube {c} excludes its own cube")));
                    }
                    if list.iter().any(|&k| k >= layout.n_cubes()) {
                        return Err(Error::Mask(format!("query cube {c} names a missing cube")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        match self {
            AttentionMask::Dense { n, .. } => *n,
            AttentionMask::Cubes { layout, .. } => layout.n_tokens(),
        }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        match self {
            AttentionMask::Dense { n, allowed } => allowed[query * n + key],
            AttentionMask::Cubes { layout, allowed } => allowed[layout.cube_of(query)]
                .binary_search(&layout.cube_of(key))
                .is_ok(),
        }
    }

    /// Number of allowed query-key pairs.
    pub fn allowed_pairs(&self) -> u64 {
        match self {
            AttentionMask::Dense { allowed, .. } => allowed.iter().filter(|&&a| a).count() as u64,
            AttentionMask::Cubes { layout, allowed } => allowed
                .iter()
                .enumerate()
                .map(|(qc, keys)| {
                    let keys: usize = keys.iter().map(|&kc| layout.tokens(kc).len()).sum();
                    (layout.tokens(qc).len() * keys) as u64
                })
                .sum(),
        }
    }

    /// Fraction of allowed pairs.
    pub fn density(&self) -> f64 {
        let n = self.n_tokens() as f64;
        self.allowed_pairs() as f64 / (n * n)
    }

    /// Allowed key cubes per query cube, if this is a cube mask.
    pub fn selected_cubes(&self) -> Option<&[Vec<usize>]> {
        match self {
            AttentionMask::Cubes { allowed, .. } => Some(allowed),
            AttentionMask::Dense { .. } => None,
        }
    }
}

/// What a kernel keeps besides its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retain {
    Nothing,
    /// Head- and query-averaged key marginal only.
    Marginal,
    /// Full `H × N × N` weights (and the marginal).
    Weights,
}

/// Post-softmax weights, `H × N × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    n_heads: usize,
    n_tokens: usize,
    data: Vec<f64>,
}

impl AttentionWeights {
    pub fn new(n_heads: usize, n_tokens: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_heads * n_tokens * n_tokens {
            return Err(Error::Shape(format!(
                "{n_heads}x{n_tokens}x{n_tokens} weights need {} values, got {}",
                n_heads * n_tokens * n_tokens,
                data.len()
            )));
        }
        Ok(Self {
            n_heads,
            n_tokens,
            data,
        })
    }

    /// Every head and query assigns probability `1/N` to each key.
    pub fn uniform(n_heads: usize, n_tokens: usize) -> Self {
        let p = 1.0 / n_tokens as f64;
        Self {
            n_heads,
            n_tokens,
            data: vec![p; n_heads * n_tokens * n_tokens],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let n = self.n_tokens;
        let start = (head * n + query) * n;
        &self.data[start..start + n]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.data
            .chunks_exact(self.n_tokens.max(1))
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `ā(j) = 1/(H·N) Σ_h Σ_i A(h, i, j)`, summed head-major, then query.
    pub fn key_marginal(&self) -> Vec<f64> {
        let n = self.n_tokens;
        let mut marginal = vec![0.0; n];
        for row in self.data.chunks_exact(n.max(1)) {
            for (m, &p) in marginal.iter_mut().zip(row) {
                *m += p;
            }
        }
        let denom = (self.n_heads * n) as f64;
        marginal.iter_mut().for_each(|m| *m /= denom);
        marginal
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<S> {
    /// Final `N × d` output after `W_O`.
    pub output: Matrix<S>,
    /// Concatenated per-head outputs before `W_O`.
    pub context: Matrix<S>,
    pub weights: Option<AttentionWeights>,
    pub key_marginal: Option<Vec<f64>>,
}

pub fn dense_attention<S: Scalar>(
    z: &Matrix<S>,
    proj: &Projections<S>,
    cfg: &AttentionConfig,
    retain: Retain,
) -> Result<AttentionOutput<S>> {
    run_projected(z, proj, cfg, None, retain)
}

pub fn masked_attention<S: Scalar>(
    z: &Matrix<S>,
    proj: &Projections<S>,
    cfg: &AttentionConfig,
    mask: &AttentionMask,
    retain: Retain,
) -> Result<AttentionOutput<S>> {
    if mask.n_tokens() != z.rows() {
        return Err(Error::Shape(format!(
            "mask covers {} tokens, input has {}",
            mask.n_tokens(),
            z.rows()
        )));
    }
    mask.validate()?;
    run_projected(z, proj, cfg, Some(mask), retain)
}

/// Local cube attention plus the top `k_cubes - 1` other cubes per query cube.
/// Returns the kernel output and the mask it realised.
pub fn cube_sparse_attention<S: Scalar>(
    z: &Matrix<S>,
    proj: &Projections<S>,
    cfg: &AttentionConfig,
    layout: &CubeLayout,
    k_cubes: usize,
    retain: Retain,
) -> Result<(AttentionOutput<S>, AttentionMask)> {
    check_input(z, proj, cfg)?;
    if layout.n_tokens() != z.rows() {
        return Err(Error::Shape(format!(
            "layout covers {} tokens, input has {}",
            layout.n_tokens(),
            z.rows()
        )));
    }
    let (q, k, v) = project_qkv(z, proj)?;
    let mask = select_cubes(&q, &k, cfg, layout, k_cubes)?;
    let attended = attend(&q, &k, &v, cfg, Some(&mask), retain)?;
    Ok((finish(attended, proj)?, mask))
}

/// Score matrix `n_cubes × n_cubes`: per-head `pooled_Q · pooled_Kᵀ · scale`
/// averaged over heads.
pub fn cube_scores<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    cfg: &AttentionConfig,
    layout: &CubeLayout,
) -> Result<Matrix<f64>> {
    let pq: Vec<f64> = pool_cubes(q, layout)?.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let pk: Vec<f64> = pool_cubes(k, layout)?.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let n = layout.n_cubes();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = cfg.scale();
    let heads = cfg.n_heads as f64;
    let mut scores = Matrix::zeros(n, n);
    for qc in 0..n {
        let qrow = &pq[qc * d..(qc + 1) * d];
        for kc in 0..n {
            let krow = &pk[kc * d..(kc + 1) * d];
            let mut total = 0.0;
            for h in 0..cfg.n_heads {
                let dot: f64 = qrow[h * dh..(h + 1) * dh]
                    .iter()
                    .zip(&krow[h * dh..(h + 1) * dh])
                    .map(|(a, b)| a * b)
                    .sum();
                total += dot * scale;
            }
            scores[(qc, kc)] = total / heads;
        }
    }
    Ok(scores)
}

/// Top-k cube selection: own cube plus the `k_cubes - 1` best-scoring other
/// cubes, ties to the lower cube index.
pub fn select_cubes<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    cfg: &AttentionConfig,
    layout: &CubeLayout,
    k_cubes: usize,
) -> Result<AttentionMask> {
    let n = layout.n_cubes();
    if k_cubes == 0 || k_cubes > n {
        return Err(Error::Parameter(format!(
            "k_cubes must lie in 1..={n}, got {k_cubes}"
        )));
    }
    let allowed = if k_cubes == n {
        vec![(0..n).collect::<Vec<_>>(); n]
    } else {
        let scores = cube_scores(q, k, cfg, layout)?;
        (0..n)
            .map(|qc| {
                let mut others: Vec<usize> = (0..n).filter(|&kc| kc != qc).collect();
                let row = scores.row(qc);
                let order = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
                let take = k_cubes - 1;
                if take > 0 && take < others.len() {
                    others.select_nth_unstable_by(take - 1, order);
                }
                let mut keep = vec![qc];
                keep.extend_from_slice(&others[..take]);
                keep
            })
            .collect()
    };
    AttentionMask::cubes(layout.clone(), allowed)
}

/// Cube count for an attention sparsity ratio: `round((1 - ρ)·n)` in `[1, n]`.
pub fn k_cubes_for_sparsity(rho_attn: f64, n_cubes: usize) -> usize {
    let k = ((1.0 - rho_attn) * n_cubes as f64).round();
    (k.max(1.0) as usize).min(n_cubes)
}

pub fn project_qkv<S: Scalar>(
    z: &Matrix<S>,
    proj: &Projections<S>,
) -> Result<(Matrix<S>, Matrix<S>, Matrix<S>)> {
    Ok((z.matmul(&proj.w_q)?, z.matmul(&proj.w_k)?, z.matmul(&proj.w_v)?))
}

fn check_input<S: Scalar>(z: &Matrix<S>, proj: &Projections<S>, cfg: &AttentionConfig) -> Result<()> {
    if z.cols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "input width {} does not match d_model {}",
            z.cols(),
            cfg.d_model
        )));
    }
    if z.rows() == 0 {
        return Err(Error::Shape("attention over zero tokens".into()));
    }
    proj.check(cfg)?;
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite attention input".into()));
    }
    Ok(())
}

fn run_projected<S: Scalar>(
    z: &Matrix<S>,
    proj: &Projections<S>,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
    retain: Retain,
) -> Result<AttentionOutput<S>> {
    check_input(z, proj, cfg)?;
    let (q, k, v) = project_qkv(z, proj)?;
    let attended = attend(&q, &k, &v, cfg, mask, retain)?;
    finish(attended, proj)
}

fn finish<S: Scalar>(attended: Attended<S>, proj: &Projections<S>) -> Result<AttentionOutput<S>> {
    Ok(AttentionOutput {
        output: attended.context.matmul(&proj.w_o)?,
        context: attended.context,
        weights: attended.weights,
        key_marginal: attended.key_marginal,
    })
}

pub struct Attended<S> {
    pub context: Matrix<S>,
    pub weights: Option<AttentionWeights>,
    pub key_marginal: Option<Vec<f64>>,
}

/// Per-head key data for the keys listed in `order` (all keys if `None`). `Kᵀ` and `Vᵀ` are
/// stored in panels of [`PANEL`] keys, each panel `d_head × PANEL` and
/// zero-padded.
struct HeadKeys<S> {
    k_t: Vec<S>,
    v_t: Vec<S>,
}

impl<S: Scalar> HeadKeys<S> {
    fn build(k: &Matrix<S>, v: &Matrix<S>, head: usize, dh: usize, order: Option<&[usize]>) -> Self {
        let n = order.map_or(k.rows(), <[usize]>::len);
        let mut k_t = vec![S::zero(); n.div_ceil(PANEL) * PANEL * dh];
        let mut v_t = k_t.clone();
        for j in 0..n {
            let src = order.map_or(j, |o| o[j]);
            let base = (j / PANEL) * PANEL * dh + j % PANEL;
            let krow = &k.row(src)[head * dh..(head + 1) * dh];
            let vrow = &v.row(src)[head * dh..(head + 1) * dh];
            for c in 0..dh {
                k_t[base + c * PANEL] = krow[c];
                v_t[base + c * PANEL] = vrow[c];
            }
        }
        Self { k_t, v_t }
    }
}

/// Splits positions `a..b` at panel boundaries into `(start, end, offset)`
/// where `offset` indexes the first key of the piece in a panel store.
fn panel_pieces(a: usize, b: usize, dh: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let mut pos = a;
    std::iter::from_fn(move || {
        (pos < b).then(|| {
            let panel = pos / PANEL;
            let end = ((panel + 1) * PANEL).min(b);
            let piece = (pos, end, panel * PANEL * dh + pos % PANEL);
            pos = end;
            piece
        })
    })
}

fn lane_max<S: Scalar>(xs: &[S], init: S) -> S {
    let mut lanes = [init; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for chunk in chunks {
        for (m, &x) in lanes.iter_mut().zip(chunk) {
            *m = m.max(x);
        }
    }
    lanes.iter().chain(rest).copied().fold(init, S::max)
}

/// `Σ a·b` with [`LANES`] interleaved partial sums, combined in lane order.
fn lane_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let mut total = lanes.iter().fold(S::zero(), |acc, &l| acc + l);
    for (&x, &y) in ra.iter().zip(rb) {
        total = total + x * y;
    }
    total
}

fn lane_sum<S: Scalar>(a: &[S]) -> S {
    let mut lanes = [S::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for x in chunks {
        for i in 0..LANES {
            lanes[i] = lanes[i] + x[i];
        }
    }
    lanes.iter().chain(rest).fold(S::zero(), |acc, &l| acc + l)
}

/// A fixed work unit of queries. `key_cubes` lists the key cubes a query
/// cube may see; `None` means every key in token order.
struct Group<'m> {
    queries: Vec<usize>,
    key_cubes: Option<&'m [usize]>,
}

struct GroupResult<S> {
    context: Vec<S>,
    weights: Vec<f64>,
    marginal: Vec<f64>,
}

/// Running softmax state of one query and head.
struct Running<S> {
    max: S,
    sum: S,
    acc: Vec<S>,
}

/// Softmax attention over pre-projected `Q`, `K`, `V` (`N × d`, heads as
/// column blocks). Returns the concatenated head outputs.
pub fn attend<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
    retain: Retain,
) -> Result<Attended<S>> {
    let n = q.rows();
    let d = cfg.d_model;
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.rows() != n || m.cols() != d {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected {n}x{d}",
                m.rows(),
                m.cols()
            )));
        }
    }
    let mut cube_layout = None;
    let groups: Vec<Group> = match mask {
        Some(AttentionMask::Cubes { layout, allowed }) => {
            cube_layout = Some(layout);
            allowed
                .iter()
                .enumerate()
                .map(|(qc, kcs)| Group {
                    queries: layout.tokens(qc).to_vec(),
                    key_cubes: (kcs.len() < layout.n_cubes()).then_some(kcs.as_slice()),
                })
                .collect()
        }
        _ => (0..n)
            .step_by(QUERY_BLOCK)
            .map(|start| Group {
                queries: (start..(start + QUERY_BLOCK).min(n)).collect(),
                key_cubes: None,
            })
            .collect(),
    };
    let dense_mask = match mask {
        Some(AttentionMask::Dense { allowed, .. }) => Some(allowed.as_slice()),
        _ => None,
    };

    let dh = cfg.d_head();
    let scale = S::from_f64_lossy(cfg.scale());
    let sentinel = S::mask_sentinel();
    let natural: Vec<HeadKeys<S>> = if groups.iter().any(|g| g.key_cubes.is_none()) {
        (0..cfg.n_heads).map(|h| HeadKeys::build(k, v, h, dh, None)).collect()
    } else {
        Vec::new()
    };
    let keep_weights = retain == Retain::Weights;
    let keep_marginal = retain != Retain::Nothing;

    let results: Vec<GroupResult<S>> = groups
        .par_iter()
        .map(|group| {
            // Selected keys in ascending cube order, gathered into a compact store.
            let order: Option<Vec<usize>> = group.key_cubes.zip(cube_layout).map(|(kcs, layout)| {
                kcs.iter().flat_map(|&kc| layout.tokens(kc).iter().copied()).collect()
            });
            let local: Vec<HeadKeys<S>> = match &order {
                Some(o) => (0..cfg.n_heads).map(|h| HeadKeys::build(k, v, h, dh, Some(o))).collect(),
                None => Vec::new(),
            };
            let heads = if order.is_some() { &local } else { &natural };
            let n_keys = order.as_ref().map_or(n, Vec::len);
            let order = order.as_deref();
            let token_at = |pos: usize| order.map_or(pos, |o| o[pos]);
            // Scaled, masked logits of one query and head over positions a..b.
            let logits_into = |buf: &mut [S], query: usize, h: usize, a: usize, b: usize| {
                let hk = &heads[h];
                let qrow = &q.row(query)[h * dh..(h + 1) * dh];
                for (start, end, offset) in panel_pieces(a, b, dh) {
                    let out = &mut buf[start - a..end - a];
                    let mut j = 0;
                    while j + LANES <= out.len() {
                        let mut lanes = [S::zero(); LANES];
                        for (c, &qc) in qrow.iter().enumerate() {
                            let krow = &hk.k_t[offset + c * PANEL + j..][..LANES];
                            for i in 0..LANES {
                                lanes[i] = lanes[i] + qc * krow[i];
                            }
                        }
                        out[j..j + LANES].copy_from_slice(&lanes);
                        j += LANES;
                    }
                    for (jj, l) in out.iter_mut().enumerate().skip(j) {
                        let mut acc = S::zero();
                        for (c, &qc) in qrow.iter().enumerate() {
                            acc = acc + qc * hk.k_t[offset + c * PANEL + jj];
                        }
                        *l = acc;
                    }
                }
                for l in buf.iter_mut() {
                    *l = *l * scale;
                }
                if let Some(allowed) = dense_mask {
                    let row = &allowed[query * n + a..query * n + b];
                    for (l, &ok) in buf.iter_mut().zip(row) {
                        *l = *l + if ok { S::zero() } else { sentinel };
                    }
                }
            };

            let nq = group.queries.len();
            let mut state: Vec<Running<S>> = (0..nq * cfg.n_heads)
                .map(|_| Running {
                    max: S::neg_infinity(),
                    sum: S::zero(),
                    acc: vec![S::zero(); dh],
                })
                .collect();
            let mut buf = [S::zero(); KEY_TILE];
            for (a, b) in (0..n_keys).step_by(KEY_TILE).map(|t| (t, (t + KEY_TILE).min(n_keys))) {
                let logits = &mut buf[..b - a];
                for h in 0..cfg.n_heads {
                    let values = &heads[h].v_t;
                    for (qi, &query) in group.queries.iter().enumerate() {
                        logits_into(logits, query, h, a, b);
                        let st = &mut state[qi * cfg.n_heads + h];
                        let max = lane_max(logits, st.max);
                        if max > st.max {
                            let shrink = (st.max - max).exp();
                            st.sum = st.sum * shrink;
                            st.acc.iter_mut().for_each(|o| *o = *o * shrink);
                            st.max = max;
                        }
                        for l in logits.iter_mut() {
                            *l = (*l - max).exp();
                        }
                        st.sum = st.sum + lane_sum(logits);
                        for (start, end, offset) in panel_pieces(a, b, dh) {
                            let p = &logits[start - a..end - a];
                            for (c, o) in st.acc.iter_mut().enumerate() {
                                *o = *o + lane_dot(p, &values[offset + c * PANEL..][..end - start]);
                            }
                        }
                    }
                }
            }

            let mut out = GroupResult {
                context: vec![S::zero(); nq * d],
                weights: if keep_weights {
                    vec![0.0; nq * cfg.n_heads * n]
                } else {
                    Vec::new()
                },
                marginal: if keep_marginal { vec![0.0; n] } else { Vec::new() },
            };
            for qi in 0..nq {
                for h in 0..cfg.n_heads {
                    let st = &state[qi * cfg.n_heads + h];
                    let ctx = &mut out.context[qi * d + h * dh..qi * d + (h + 1) * dh];
                    for (o, &acc) in ctx.iter_mut().zip(&st.acc) {
                        *o = acc / st.sum;
                    }
                }
            }
            if keep_marginal {
                for (a, b) in (0..n_keys).step_by(KEY_TILE).map(|t| (t, (t + KEY_TILE).min(n_keys))) {
                    let logits = &mut buf[..b - a];
                    for (qi, &query) in group.queries.iter().enumerate() {
                        for h in 0..cfg.n_heads {
                            logits_into(logits, query, h, a, b);
                            let st = &state[qi * cfg.n_heads + h];
                            for (j, &l) in logits.iter().enumerate() {
                                let p = ((l - st.max).exp() / st.sum).to_f64_lossy();
                                let key = token_at(a + j);
                                if keep_weights {
                                    out.weights[(qi * cfg.n_heads + h) * n + key] = p;
                                }
                                out.marginal[key] += p;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut context = Matrix::zeros(n, d);
    let mut weights = keep_weights.then(|| vec![0.0; cfg.n_heads * n * n]);
    let mut marginal = keep_marginal.then(|| vec![0.0; n]);
    for (group, res) in groups.iter().zip(&results) {
        for (qi, &query) in group.queries.iter().enumerate() {
            context
                .row_mut(query)
                .copy_from_slice(&res.context[qi * d..(qi + 1) * d]);
            if let Some(w) = weights.as_mut() {
                for h in 0..cfg.n_heads {
                    let src = &res.weights[(qi * cfg.n_heads + h) * n..][..n];
                    w[(h * n + query) * n..][..n].copy_from_slice(src);
                }
            }
        }
        if let Some(m) = marginal.as_mut() {
            for (acc, &p) in m.iter_mut().zip(&res.marginal) {
                *acc += p;
            }
        }
    }
    if let Some(m) = marginal.as_mut() {
        let denom = (cfg.n_heads * n) as f64;
        m.iter_mut().for_each(|v| *v /= denom);
    }
    Ok(Attended {
        context,
        weights: weights
            .map(|w| AttentionWeights::new(cfg.n_heads, n, w))
            .transpose()?,
        key_marginal: marginal,
    })
}
