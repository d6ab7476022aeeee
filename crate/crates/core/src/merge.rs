//! Cube-local token merging with an exact unmerge.
//!
//! Sources are scored by the cosine similarity of their head-averaged key
//! descriptor to a destination descriptor; the `r` most similar sources are
//! folded into their destination by mean aggregation. The plan records enough
//! to broadcast every merged row back to its sources afterwards.

use serde::{Deserialize, Serialize};

use crate::cube::CubeLayout;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Head-averaged key descriptors: `m_i = (1/H) Σ_h k_{h,i}`.
///
/// `keys` holds one `N × d_head` matrix per head.
pub fn token_descriptors<S: Scalar>(keys: &[Matrix<S>]) -> Result<Matrix<S>> {
    let first = keys
        .first()
        .ok_or_else(|| Error::Shape("descriptors need at least one head".into()))?;
    let (n, dh) = (first.rows(), first.cols());
    if let Some(bad) = keys.iter().find(|k| k.rows() != n || k.cols() != dh) {
        return Err(Error::Shape(format!(
            "head keys disagree: {}x{} vs {n}x{dh}",
            bad.rows(),
            bad.cols()
        )));
    }
    if keys.iter().any(|k| !k.is_finite()) {
        return Err(Error::Numeric("non-finite keys".into()));
    }
    let heads = S::from_usize_lossy(keys.len());
    let mut out = Matrix::zeros(n, dh);
    for k in keys {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(k.as_slice()) {
            *o = *o + v;
        }
    }
    Ok(out.map(|v| v / heads))
}

/// Splits a packed `N × d` key matrix into `H` head blocks of `N × d/H`.
pub fn split_heads<S: Scalar>(packed: &Matrix<S>, n_heads: usize) -> Vec<Matrix<S>> {
    let dh = packed.cols() / n_heads;
    (0..n_heads).map(|h| packed.column_block(h * dh, dh)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeOptions {
    /// Let each source pick its best destination over every cube instead of
    /// its own cube's destination.
    pub global_destinations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    n_tokens: usize,
    rho_token: f64,
    /// Unmerged sources, ascending.
    unmerged: Vec<usize>,
    /// Merged sources, ascending.
    merged: Vec<usize>,
    /// One destination per cube, in cube order.
    destinations: Vec<usize>,
    /// `(source, destination)` for every merged source, by source.
    assignments: Vec<(usize, usize)>,
    /// Original token index of each merged-sequence row.
    merged_order: Vec<usize>,
    /// Merged-sequence row each original token reads back from.
    #[serde(skip)]
    row_of_token: Vec<usize>,
}

impl MergePlan {
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn rho_token(&self) -> f64 {
        self.rho_token
    }

    /// Number of merged sources.
    pub fn r(&self) -> usize {
        self.merged.len()
    }

    pub fn merged_len(&self) -> usize {
        self.n_tokens - self.merged.len()
    }

    pub fn unmerged(&self) -> &[usize] {
        &self.unmerged
    }

    pub fn merged(&self) -> &[usize] {
        &self.merged
    }

    pub fn destinations(&self) -> &[usize] {
        &self.destinations
    }

    pub fn assignments(&self) -> &[(usize, usize)] {
        &self.assignments
    }

    pub fn destination_of(&self, source: usize) -> Option<usize> {
        self.assignments
            .binary_search_by_key(&source, |&(s, _)| s)
            .ok()
            .map(|i| self.assignments[i].1)
    }

    pub fn merged_order(&self) -> &[usize] {
        &self.merged_order
    }

    pub fn is_identity(&self) -> bool {
        self.merged.is_empty()
    }
}

/// `min(floor(ρ·N), |A|)`. Products within `1e-9` relative of an integer
/// count as that integer, so `0.2 · 100` stays 20 even when `ρ` carries
/// rounding error from the allocator.
pub fn merge_count(rho_token: f64, n_tokens: usize, n_sources: usize) -> usize {
    let x = rho_token * n_tokens as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) {
        nearest
    } else {
        x.floor()
    };
    (count.max(0.0) as usize).min(n_sources)
}

fn cosine<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let (mut dot, mut na, mut nb) = (S::zero(), S::zero(), S::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    (dot / (na.sqrt() * nb.sqrt() + S::norm_eps())).to_f64_lossy()
}

pub fn build_merge_plan<S: Scalar>(
    descriptors: &Matrix<S>,
    layout: &CubeLayout,
    rho_token: f64,
    options: MergeOptions,
) -> Result<MergePlan> {
    let n = layout.n_tokens();
    if descriptors.rows() != n {
        return Err(Error::Shape(format!(
            "{} descriptors for a layout over {n} tokens",
            descriptors.rows()
        )));
    }
    if !(0.0..=1.0).contains(&rho_token) {
        return Err(Error::Parameter(format!("rho_token {rho_token} outside [0, 1]")));
    }
    let sources = layout.sources();
    let destinations = layout.destinations().to_vec();

    // (score, source, destination)
    let mut scored: Vec<(f64, usize, usize)> = sources
        .iter()
        .map(|&i| {
            let mi = descriptors.row(i);
            if options.global_destinations {
                let (best, score) = destinations
                    .iter()
                    .map(|&j| (j, cosine(mi, descriptors.row(j))))
                    .fold((usize::MAX, f64::NEG_INFINITY), |acc, cand| {
                        if cand.1 > acc.1 {
                            cand
                        } else {
                            acc
                        }
                    });
                (score, i, best)
            } else {
                let j = layout.destination(layout.cube_of(i));
                (cosine(mi, descriptors.row(j)), i, j)
            }
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let r = merge_count(rho_token, n, sources.len());
    let mut assignments: Vec<(usize, usize)> = scored[..r].iter().map(|&(_, i, j)| (i, j)).collect();
    assignments.sort_unstable();
    let merged: Vec<usize> = assignments.iter().map(|&(i, _)| i).collect();
    let mut unmerged: Vec<usize> = scored[r..].iter().map(|&(_, i, _)| i).collect();
    unmerged.sort_unstable();

    let merged_order: Vec<usize> = unmerged.iter().chain(&destinations).copied().collect();
    let mut plan = MergePlan {
        n_tokens: n,
        rho_token,
        unmerged,
        merged,
        destinations,
        assignments,
        merged_order,
        row_of_token: Vec::new(),
    };
    plan.row_of_token = row_of_token(&plan);
    Ok(plan)
}

fn row_of_token(plan: &MergePlan) -> Vec<usize> {
    let mut rows = vec![usize::MAX; plan.n_tokens];
    for (row, &tok) in plan.merged_order.iter().enumerate() {
        rows[tok] = row;
    }
    for &(src, dst) in &plan.assignments {
        rows[src] = rows[dst];
    }
    rows
}

/// Mean-aggregates merged sources into their destinations. Output rows are the
/// unmerged sources ascending, then the destinations in cube order.
pub fn merge<S: Scalar>(z: &Matrix<S>, plan: &MergePlan) -> Result<Matrix<S>> {
    if z.rows() != plan.n_tokens {
        return Err(Error::Plan(format!(
            "plan built for {} tokens, input has {}",
            plan.n_tokens,
            z.rows()
        )));
    }
    let mut out = z.gather_rows(&plan.merged_order);
    if plan.assignments.is_empty() {
        return Ok(out);
    }
    let d = z.cols();
    let first_dest_row = plan.unmerged.len();
    let mut counts = vec![1usize; plan.destinations.len()];
    let dest_slot: std::collections::HashMap<usize, usize> = plan
        .destinations
        .iter()
        .enumerate()
        .map(|(c, &j)| (j, c))
        .collect();
    for &(src, dst) in &plan.assignments {
        let slot = dest_slot[&dst];
        counts[slot] += 1;
        let row = out.row_mut(first_dest_row + slot);
        for (o, &v) in row.iter_mut().zip(z.row(src)) {
            *o = *o + v;
        }
    }
    for (slot, &count) in counts.iter().enumerate() {
        if count > 1 {
            let c = S::from_usize_lossy(count);
            let row = &mut out.as_mut_slice()[(first_dest_row + slot) * d..][..d];
            row.iter_mut().for_each(|v| *v = *v / c);
        }
    }
    Ok(out)
}

/// Restores an `N`-row matrix: unmerged sources and destinations take their
/// own rows, merged sources copy their destination's row.
pub fn unmerge<S: Scalar>(merged: &Matrix<S>, plan: &MergePlan) -> Result<Matrix<S>> {
    if merged.rows() != plan.merged_len() {
        return Err(Error::Plan(format!(
            "plan expects {} merged rows, got {}",
            plan.merged_len(),
            merged.rows()
        )));
    }
    let rows = if plan.row_of_token.len() == plan.n_tokens {
        std::borrow::Cow::Borrowed(&plan.row_of_token)
    } else {
        std::borrow::Cow::Owned(row_of_token(plan))
    };
    Ok(merged.gather_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_layout() -> CubeLayout {
        CubeLayout::build([1, 2, 2], [1, 2, 2]).unwrap()
    }

    #[test]
    fn descriptor_examples() {
        let k = Matrix::<f64>::from_vec(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        assert_eq!(token_descriptors(std::slice::from_ref(&k)).unwrap(), k);

        let neg = k.map(|v| -v);
        let m = token_descriptors(&[k, neg]).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0));

        let h0 = Matrix::<f64>::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let h1 = Matrix::<f64>::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(token_descriptors(&[h0, h1]).unwrap().as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn zero_ratio_is_identity_plan() {
        let l = flat_layout();
        let desc = Matrix::<f64>::from_fn(4, 2, |r, c| (r + c) as f64);
        let plan = build_merge_plan(&desc, &l, 0.0, MergeOptions::default()).unwrap();
        assert_eq!(plan.r(), 0);
        assert_eq!(plan.merged_len(), 4);
    }

    #[test]
    fn tied_similarities_merge_lowest_indices() {
        let l = flat_layout();
        let desc = Matrix::<f64>::from_fn(4, 3, |_, c| c as f64 + 1.0);
        let plan = build_merge_plan(&desc, &l, 0.5, MergeOptions::default()).unwrap();
        assert_eq!(plan.r(), 2);
        assert_eq!(plan.merged(), &[0, 1]);
        assert_eq!(plan.unmerged(), &[2]);
        assert_eq!(plan.destination_of(0), Some(3));
        assert_eq!(plan.destination_of(1), Some(3));

        let z = Matrix::<f64>::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let merged = merge(&z, &plan).unwrap();
        assert_eq!(merged.as_slice(), &[3.0, 7.0 / 3.0]);
        let back = unmerge(&merged, &plan).unwrap();
        assert_eq!(back.as_slice(), &[7.0 / 3.0, 7.0 / 3.0, 3.0, 7.0 / 3.0]);
    }

    #[test]
    fn full_ratio_caps_at_sources() {
        let l = CubeLayout::build([2, 4, 4], [2, 2, 2]).unwrap();
        let desc = Matrix::<f32>::from_fn(32, 2, |r, c| ((r * 7 + c * 3) % 5) as f32 - 2.0);
        let plan = build_merge_plan(&desc, &l, 1.0, MergeOptions::default()).unwrap();
        assert_eq!(plan.r(), 32 - 4);
        assert_eq!(plan.merged_len(), 4);
    }

    #[test]
    fn most_similar_sources_merge_first() {
        let l = flat_layout();
        // destination 3 points along +x; token 2 is closest, then 0, then 1.
        let desc = Matrix::<f64>::from_vec(
            4,
            2,
            vec![1.0, 1.0, -1.0, 0.5, 1.0, 0.1, 1.0, 0.0],
        )
        .unwrap();
        let plan = build_merge_plan(&desc, &l, 0.5, MergeOptions::default()).unwrap();
        assert_eq!(plan.merged(), &[0, 2]);
        assert_eq!(plan.unmerged(), &[1]);
    }

    #[test]
    fn zero_descriptors_score_zero() {
        let l = flat_layout();
        let desc = Matrix::<f64>::zeros(4, 2);
        let plan = build_merge_plan(&desc, &l, 0.25, MergeOptions::default()).unwrap();
        assert_eq!(plan.merged(), &[0]);
    }

    #[test]
    fn global_destinations_may_leave_the_cube() {
        let l = CubeLayout::build([1, 2, 4], [1, 2, 2]).unwrap();
        // destinations are tokens 5 and 7; token 0 resembles 7 only.
        let mut desc = Matrix::<f64>::from_fn(8, 2, |_, _| 0.0);
        desc.row_mut(5).copy_from_slice(&[1.0, 0.0]);
        desc.row_mut(7).copy_from_slice(&[0.0, 1.0]);
        desc.row_mut(0).copy_from_slice(&[0.0, 2.0]);
        let opts = MergeOptions {
            global_destinations: true,
        };
        let plan = build_merge_plan(&desc, &l, 0.125, opts).unwrap();
        assert_eq!(plan.assignments(), &[(0, 7)]);
        let local = build_merge_plan(&desc, &l, 0.125, MergeOptions::default()).unwrap();
        assert_eq!(local.assignments(), &[(0, 5)]);
    }

    #[test]
    fn size_mismatch_errors() {
        let l = flat_layout();
        let desc = Matrix::<f64>::zeros(4, 1);
        let plan = build_merge_plan(&desc, &l, 0.5, MergeOptions::default()).unwrap();
        assert!(matches!(merge(&Matrix::<f64>::zeros(3, 1), &plan), Err(Error::Plan(_))));
        assert!(matches!(unmerge(&Matrix::<f64>::zeros(4, 1), &plan), Err(Error::Plan(_))));
        assert!(matches!(
            build_merge_plan(&Matrix::<f64>::zeros(5, 1), &l, 0.5, MergeOptions::default()),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn unmerge_broadcasts_exactly(
            seed: u64,
            rho in 0.0f64..=1.0,
            nt in 1usize..3, nh in 1usize..3, nw in 1usize..3,
        ) {
            let l = CubeLayout::build([nt * 2, nh * 2, nw * 2], [2, 2, 2]).unwrap();
            let n = l.n_tokens();
            let vals = crate::fixtures::seeded_normals(seed, n * 3);
            let z = Matrix::from_vec(n, 3, vals).unwrap();
            let plan = build_merge_plan(&z, &l, rho, MergeOptions::default()).unwrap();
            prop_assert_eq!(plan.merged_len(), n - merge_count(rho, n, n - l.n_cubes()));
            let merged = merge(&z, &plan).unwrap();
            let transformed = merged.map(|v| v * 3.5 - 1.0);
            let back = unmerge(&transformed, &plan).unwrap();
            for &(src, dst) in plan.assignments() {
                prop_assert_eq!(l.cube_of(src), l.cube_of(dst));
                prop_assert_eq!(back.row(src), back.row(dst));
            }
            for (row, &tok) in plan.merged_order().iter().enumerate() {
                prop_assert_eq!(back.row(tok), transformed.row(row));
            }
        }

        #[test]
        fn channel_permutation_keeps_plan(seed: u64, rho in 0.0f64..=1.0) {
            let l = CubeLayout::build([2, 2, 4], [1, 2, 2]).unwrap();
            let vals = crate::fixtures::seeded_normals(seed, 16 * 3);
            let z = Matrix::<f64>::from_vec(16, 3, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let perm = Matrix::from_fn(16, 3, |r, c| z[(r, (c + 1) % 3)]);
            let a = build_merge_plan(&z, &l, rho, MergeOptions::default()).unwrap();
            let b = build_merge_plan(&perm, &l, rho, MergeOptions::default()).unwrap();
            prop_assert_eq!(a.merged(), b.merged());
        }

        #[test]
        fn constant_grids_are_fixed_points(rho in 0.0f64..=1.0, v in -10.0f64..10.0) {
            let l = CubeLayout::build([2, 4, 4], [2, 2, 2]).unwrap();
            let z = Matrix::from_fn(32, 2, |_, c| v + c as f64);
            let plan = build_merge_plan(&z, &l, rho, MergeOptions::default()).unwrap();
            let back = unmerge(&merge(&z, &plan).unwrap(), &plan).unwrap();
            for i in 0..32 {
                for c in 0..2 {
                    prop_assert!((back[(i, c)] - z[(i, c)]).abs() <= 1e-12 * (1.0 + v.abs()));
                }
            }
        }
    }
}
