//! Offline sample hardness.
//!
//! For each item of a preference pair, the K most similar catalog items form a
//! cluster. The item's image vector is scored against every cluster member's
//! combined vector and the scores are softmax-normalized in rank order. The L1
//! distance `Δ` between the chosen and rejected distributions measures how
//! distinguishable the pair is, and `λ = σ(Δ) / σ(mean Δ)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PreferenceSample;
use crate::embed_store::{EmbeddingTable, NeighborSet};
use crate::error::{Error, Result};
use crate::linalg::{cosine, sigmoid, softmax};

pub const DEFAULT_TOPK: usize = 10;
/// Largest possible L1 distance between two probability vectors.
pub const DELTA_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution {
    pub probs: Vec<f64>,
}

impl ClusterDistribution {
    pub fn from_similarities(sims: &[f64]) -> Result<Self> {
        if sims.is_empty() {
            return Err(Error::KOutOfRange { k: 0, max: 0 });
        }
        Ok(Self { probs: softmax(sims) })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Contents of `hardness_stats.json` (minus the seed, added by the caller).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardnessStats {
    pub delta_bar: f64,
    /// `σ(Δ_max) / σ(Δ̄)`, an upper bound on every λ.
    pub lambda_max: f64,
    pub count: usize,
    #[serde(rename = "K")]
    pub k: usize,
}

/// Softmax over cosines between `anchor_image` and each neighbor's combined
/// vector, in neighbor rank order.
pub fn cluster_distribution(
    table: &EmbeddingTable,
    anchor_image: &[f64],
    neighbors: &NeighborSet,
) -> Result<ClusterDistribution> {
    let sims = neighbors
        .neighbors
        .iter()
        .map(|n| cosine(anchor_image, table.combined_at(n.index)))
        .collect::<Result<Vec<f64>>>()?;
    ClusterDistribution::from_similarities(&sims)
}

/// Rank-aligned L1 distance between two cluster distributions.
pub fn pair_delta(zw: &ClusterDistribution, zl: &ClusterDistribution) -> Result<f64> {
    if zw.len() != zl.len() {
        return Err(Error::LengthMismatch {
            left: zw.len(),
            right: zl.len(),
        });
    }
    Ok(zw.probs.iter().zip(&zl.probs).map(|(a, b)| (a - b).abs()).sum())
}

pub fn item_distribution(table: &EmbeddingTable, index: usize, k: usize) -> Result<ClusterDistribution> {
    let neighbors = table.top_k_similar_at(index, k)?;
    cluster_distribution(table, table.image_at(index), &neighbors)
}

/// `Δ_i` for every pair. Distributions are computed once per distinct item.
pub fn pair_deltas(pairs: &[PreferenceSample], table: &EmbeddingTable, k: usize) -> Result<Vec<f64>> {
    let mut needed = BTreeMap::new();
    for p in pairs {
        for item in [&p.chosen, &p.rejected] {
            if !needed.contains_key(item.as_str()) {
                needed.insert(item.as_str(), table.index_of(item)?);
            }
        }
    }
    let entries: Vec<(&str, usize)> = needed.into_iter().collect();
    let dists = entries
        .par_iter()
        .map(|&(_, idx)| item_distribution(table, idx, k))
        .collect::<Result<Vec<_>>>()?;
    let by_item: BTreeMap<&str, &ClusterDistribution> =
        entries.iter().map(|(id, _)| *id).zip(dists.iter()).collect();
    pairs
        .iter()
        .map(|p| pair_delta(by_item[p.chosen.as_str()], by_item[p.rejected.as_str()]))
        .collect()
}

pub fn lambda(delta: f64, delta_bar: f64) -> f64 {
    sigmoid(delta) / sigmoid(delta_bar)
}

/// Computes `Δ̄` over `pairs` and writes `λ` into each pair.
pub fn hardness_pass(
    pairs: &[PreferenceSample],
    table: &EmbeddingTable,
    k: usize,
) -> Result<(Vec<PreferenceSample>, HardnessStats)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let deltas = pair_deltas(pairs, table, k)?;
    let delta_bar = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let stats = HardnessStats {
        delta_bar,
        lambda_max: lambda(DELTA_MAX, delta_bar),
        count: deltas.len(),
        k,
    };
    Ok((write_lambdas(pairs, &deltas, delta_bar), stats))
}

/// Annotates pairs against a `Δ̄` computed elsewhere (e.g. on the training split).
pub fn annotate_with(
    pairs: &[PreferenceSample],
    table: &EmbeddingTable,
    stats: &HardnessStats,
) -> Result<Vec<PreferenceSample>> {
    let deltas = pair_deltas(pairs, table, stats.k)?;
    Ok(write_lambdas(pairs, &deltas, stats.delta_bar))
}

fn write_lambdas(pairs: &[PreferenceSample], deltas: &[f64], delta_bar: f64) -> Vec<PreferenceSample> {
    pairs
        .iter()
        .zip(deltas)
        .map(|(p, &d)| PreferenceSample {
            hardness: Some(lambda(d, delta_bar)),
            ..p.clone()
        })
        .collect()
}
