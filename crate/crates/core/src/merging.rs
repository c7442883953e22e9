//! Similarity-threshold token merging and the fixed-ratio / random-drop
//! baselines.
//!
//! Tokens are split alternately into sources and destinations (skipping
//! protected rows). Each source finds its most cosine-similar destination in
//! value space; sources whose best similarity reaches the threshold are folded
//! into that destination by a norm-weighted average. Destinations keep their
//! slots and merged sources disappear, so relative order is preserved.

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenMatrix, CLASS_TOKEN};
use crate::objectives::MergePolicy;
use crate::{seed, Error, Result};

/// Stabiliser in the norm-weighted average denominator.
pub const MERGE_EPS: f64 = 1e-6;
/// Floor on the cosine denominator; zero vectors get similarity 0.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeAssignment {
    pub source_index: usize,
    pub dest_index: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMergeResult {
    pub tokens: TokenMatrix,
    pub n_merged: usize,
    pub assignments: Vec<MergeAssignment>,
}

impl LayerMergeResult {
    fn identity(tokens: TokenMatrix) -> Self {
        Self {
            tokens,
            n_merged: 0,
            assignments: Vec::new(),
        }
    }
}

/// A per-layer reduction applied between attention and MLP.
pub trait LayerMerge: Sync {
    /// `values` holds the value vectors attention used at this layer, row-aligned
    /// with `z`.
    fn merge(&self, layer: usize, z: TokenMatrix, values: &DMatrix<f64>) -> Result<LayerMergeResult>;

    /// Number of layers this schedule is defined for, if fixed.
    fn layers(&self) -> Option<usize> {
        None
    }
}

/// Alternating split of the non-protected indices: 1st, 3rd, .. are sources and
/// 2nd, 4th, .. destinations.
pub fn split_indices(n_tokens: usize, protected: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut sources = Vec::new();
    let mut dests = Vec::new();
    for (k, i) in (0..n_tokens).filter(|i| !protected.contains(i)).enumerate() {
        if k % 2 == 0 {
            sources.push(i);
        } else {
            dests.push(i);
        }
    }
    (sources, dests)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    // sqrt(uu * vv) rather than |u| |v| so that identical vectors give exactly 1
    let denom = (uu * vv).sqrt().max(COSINE_EPS);
    (dot / denom).clamp(-1.0, 1.0)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Best destination for every source; ties go to the lowest destination index.
pub fn best_matches(values: &DMatrix<f64>, sources: &[usize], dests: &[usize]) -> Vec<MergeAssignment> {
    if dests.is_empty() {
        return Vec::new();
    }
    let v = rows(values);
    sources
        .iter()
        .map(|&a| {
            let mut best = MergeAssignment {
                source_index: a,
                dest_index: dests[0],
                similarity: f64::NEG_INFINITY,
            };
            for &b in dests {
                let s = cosine_similarity(&v[a], &v[b]);
                if s > best.similarity {
                    best.dest_index = b;
                    best.similarity = s;
                }
            }
            best
        })
        .collect()
}

fn check_values(z: &TokenMatrix, values: &DMatrix<f64>) -> Result<()> {
    if values.nrows() != z.n_tokens() {
        return Err(Error::Shape(format!(
            "{} value rows for {} tokens",
            values.nrows(),
            z.n_tokens()
        )));
    }
    Ok(())
}

/// Folds the assigned sources into their destinations.
pub fn apply_assignments(z: TokenMatrix, assignments: Vec<MergeAssignment>) -> Result<LayerMergeResult> {
    if assignments.is_empty() {
        return Ok(LayerMergeResult::identity(z));
    }
    let n = z.n_tokens();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut removed = vec![false; n];
    for a in &assignments {
        if removed[a.source_index] || a.source_index == a.dest_index {
            return Err(Error::Shape(format!("source {} assigned twice", a.source_index)));
        }
        removed[a.source_index] = true;
        groups[a.dest_index].push(a.source_index);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    let d = z.dim();
    let t = z.tokens();
    let counts = z.source_counts();
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    let mut out = DMatrix::zeros(keep.len(), d);
    let mut out_counts = Vec::with_capacity(keep.len());
    for (r, &m) in keep.iter().enumerate() {
        let group = &groups[m];
        if group.is_empty() {
            out.row_mut(r).copy_from(&t.row(m));
            out_counts.push(counts[m]);
            continue;
        }
        let mut num = t.row(m) * t.row(m).norm();
        let mut den = t.row(m).norm();
        let mut count = counts[m];
        for &s in group {
            let w = t.row(s).norm();
            num += t.row(s) * w;
            den += w;
            count += counts[s];
        }
        out.row_mut(r).copy_from(&(num / (den + MERGE_EPS)));
        out_counts.push(count);
    }
    let n_merged = assignments.len();
    let tokens = TokenMatrix::new(out, z.layer_index(), out_counts)?;
    Ok(LayerMergeResult {
        tokens,
        n_merged,
        assignments,
    })
}

/// Threshold merge: every source whose best similarity is `>= tau` merges.
pub fn merge_layer(z: TokenMatrix, values: &DMatrix<f64>, tau: f64, protected: &[usize]) -> Result<LayerMergeResult> {
    check_values(&z, values)?;
    if !tau.is_finite() {
        return Err(Error::Config(format!("non-finite threshold {tau}")));
    }
    let (sources, dests) = split_indices(z.n_tokens(), protected);
    let chosen: Vec<MergeAssignment> = best_matches(values, &sources, &dests)
        .into_iter()
        .filter(|a| a.similarity >= tau)
        .collect();
    apply_assignments(z, chosen)
}

/// Fixed-count merge: the `r` best source/destination pairs merge regardless of
/// similarity (ties broken by lower source index). `r` is clamped to `|A|`.
pub fn merge_layer_fixed_ratio(
    z: TokenMatrix,
    values: &DMatrix<f64>,
    r: usize,
    protected: &[usize],
) -> Result<LayerMergeResult> {
    check_values(&z, values)?;
    let (sources, dests) = split_indices(z.n_tokens(), protected);
    let mut cands = best_matches(values, &sources, &dests);
    cands.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.source_index.cmp(&b.source_index))
    });
    cands.truncate(r);
    cands.sort_by_key(|a| a.source_index);
    apply_assignments(z, cands)
}

/// Keeps every protected row plus `keep - |protected|` other rows drawn
/// uniformly without replacement; original order is preserved.
pub fn random_drop(z: &TokenMatrix, keep: usize, protected: &[usize], seed: u64) -> Result<TokenMatrix> {
    let n = z.n_tokens();
    if keep == 0 || keep > n {
        return Err(Error::Config(format!("keep {keep} outside 1..={n}")));
    }
    let prot: Vec<usize> = (0..n).filter(|i| protected.contains(i)).collect();
    let others: Vec<usize> = (0..n).filter(|i| !protected.contains(i)).collect();
    let want = keep.saturating_sub(prot.len()).min(others.len());
    let mut rng = seed::rng(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, others.len(), want)
        .into_iter()
        .map(|k| others[k])
        .collect();
    picked.extend(prot);
    picked.sort_unstable();
    z.select_rows(&picked)
}

/// No reduction.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMerge;

impl LayerMerge for NoMerge {
    fn merge(&self, _layer: usize, z: TokenMatrix, values: &DMatrix<f64>) -> Result<LayerMergeResult> {
        check_values(&z, values)?;
        Ok(LayerMergeResult::identity(z))
    }
}

/// Per-layer threshold schedule driven by a [`MergePolicy`].
#[derive(Debug, Clone)]
pub struct ThresholdMerge<'a> {
    policy: &'a MergePolicy,
    protected: Vec<usize>,
}

impl<'a> ThresholdMerge<'a> {
    pub fn new(policy: &'a MergePolicy) -> Self {
        Self {
            policy,
            protected: vec![CLASS_TOKEN],
        }
    }

    pub fn with_protected(policy: &'a MergePolicy, protected: Vec<usize>) -> Self {
        Self { policy, protected }
    }
}

impl LayerMerge for ThresholdMerge<'_> {
    fn merge(&self, layer: usize, z: TokenMatrix, values: &DMatrix<f64>) -> Result<LayerMergeResult> {
        let tau = *self
            .policy
            .thresholds()
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("policy has no threshold for layer {layer}")))?;
        merge_layer(z, values, tau, &self.protected)
    }

    fn layers(&self) -> Option<usize> {
        Some(self.policy.len())
    }
}

/// Merges a fixed number `r` of pairs at every layer.
#[derive(Debug, Clone)]
pub struct FixedRatioMerge {
    pub r: usize,
    pub protected: Vec<usize>,
}

impl FixedRatioMerge {
    pub fn new(r: usize) -> Self {
        Self {
            r,
            protected: vec![CLASS_TOKEN],
        }
    }
}

impl LayerMerge for FixedRatioMerge {
    fn merge(&self, _layer: usize, z: TokenMatrix, values: &DMatrix<f64>) -> Result<LayerMergeResult> {
        merge_layer_fixed_ratio(z, values, self.r, &self.protected)
    }
}

/// Drops `per_layer` random non-protected rows at every layer.
#[derive(Debug, Clone)]
pub struct RandomDropMerge {
    pub per_layer: usize,
    pub seed: u64,
    pub protected: Vec<usize>,
}

impl RandomDropMerge {
    pub fn new(per_layer: usize, seed: u64) -> Self {
        Self {
            per_layer,
            seed,
            protected: vec![CLASS_TOKEN],
        }
    }
}

impl LayerMerge for RandomDropMerge {
    fn merge(&self, layer: usize, z: TokenMatrix, values: &DMatrix<f64>) -> Result<LayerMergeResult> {
        check_values(&z, values)?;
        let n = z.n_tokens();
        let floor = self.protected.iter().filter(|&&p| p < n).count().max(1);
        let keep = n.saturating_sub(self.per_layer).max(floor);
        let tokens = random_drop(&z, keep, &self.protected, seed::derive_indexed(self.seed, layer as u64))?;
        Ok(LayerMergeResult {
            n_merged: n - tokens.n_tokens(),
            tokens,
            assignments: Vec::new(),
        })
    }
}
