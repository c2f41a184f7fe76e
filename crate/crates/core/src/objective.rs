//! Losses, implicit reward gaps and the adaptive per-sample temperature.
//!
//! Every loss is a batch mean and comes with analytic gradients for the two
//! adapter factors. Per-sample work may run in parallel; all reductions are
//! left-to-right over sample order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PreferenceSample, SampleMode, SftSample};
use crate::embed_store::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus};
use crate::policy::{backward, forward, AdapterState, Context, NoiseDraw, Gradients};

pub const DEFAULT_BETA0: f64 = 0.1;
/// Below this |mean reward gap| the responsiveness falls back to 1.
pub const ETA_DEGENERACY: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradients: Gradients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSft {
    pub ctx: Context,
    /// Position of the target inside `ctx.candidates`.
    pub target: usize,
}

/// A preference pair resolved against the table, carrying the frozen
/// reference log-probabilities of both responses.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub ctx: Context,
    pub chosen: usize,
    pub rejected: usize,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
    pub lambda: Option<f64>,
    pub hard_label: Option<bool>,
}

fn position(ctx: &Context, table: &EmbeddingTable, item: &str) -> Result<usize> {
    let idx = table.index_of(item)?;
    ctx.position(idx).ok_or_else(|| Error::TargetNotInCandidates(item.to_string()))
}

pub fn encode_sft(samples: &[SftSample], table: &EmbeddingTable) -> Result<Vec<EncodedSft>> {
    samples
        .par_iter()
        .filter(|s| s.mode == SampleMode::Ranking)
        .map(|s| {
            let ctx = Context::encode(&s.history, &s.candidates, table)?;
            let target = position(&ctx, table, &s.target)?;
            Ok(EncodedSft { ctx, target })
        })
        .collect()
}

pub fn encode_pairs(
    pairs: &[PreferenceSample],
    table: &EmbeddingTable,
    reference: &AdapterState,
) -> Result<Vec<EncodedPair>> {
    pairs
        .par_iter()
        .map(|p| {
            let ctx = Context::encode(&p.history, &p.candidates, table)?;
            let chosen = position(&ctx, table, &p.chosen)?;
            let rejected = position(&ctx, table, &p.rejected)?;
            let r = forward(&ctx, table, reference, &NoiseDraw::None);
            Ok(EncodedPair {
                ref_chosen: r.log_probs[chosen],
                ref_rejected: r.log_probs[rejected],
                ctx,
                chosen,
                rejected,
                lambda: p.hardness,
                hard_label: p.hard_label,
            })
        })
        .collect()
}

fn reduce_mean(terms: Vec<(f64, Gradients)>, state: &AdapterState) -> LossValue {
    let n = terms.len();
    let mut value = 0.0;
    let mut gradients = Gradients::zeros(state);
    for (l, g) in terms {
        value += l;
        gradients.add_in_place(&g);
    }
    if n > 0 {
        value /= n as f64;
        gradients.scale_in_place(1.0 / n as f64);
    }
    LossValue { value, gradients }
}

/// Mean negative log-probability of the targets under the candidate softmax.
pub fn sft_loss(batch: &[EncodedSft], table: &EmbeddingTable, state: &AdapterState) -> LossValue {
    let terms: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|s| {
            let fwd = forward(&s.ctx, table, state, &NoiseDraw::None);
            let mut dz = fwd.probs();
            dz[s.target] -= 1.0;
            let mut g = Gradients::zeros(state);
            backward(&s.ctx, table, state, &fwd, &dz, &mut g);
            (-fwd.log_probs[s.target], g)
        })
        .collect();
    reduce_mean(terms, state)
}

/// Policy-minus-reference log-ratio margin of one pair under `noise`.
fn margin_of(pair: &EncodedPair, fwd: &crate::policy::Forward) -> f64 {
    (fwd.log_probs[pair.chosen] - pair.ref_chosen) - (fwd.log_probs[pair.rejected] - pair.ref_rejected)
}

/// `-log σ(β·margin)` and its gradient, averaged over the given draws.
fn preference_term(
    pair: &EncodedPair,
    table: &EmbeddingTable,
    state: &AdapterState,
    beta: f64,
    draws: &[NoiseDraw],
) -> (f64, Gradients) {
    const NO_NOISE: &[NoiseDraw] = &[NoiseDraw::None];
    let draws = if draws.is_empty() { NO_NOISE } else { draws };
    let mut loss = 0.0;
    let mut g = Gradients::zeros(state);
    let c = pair.ctx.candidates.len();
    for noise in draws {
        let fwd = forward(&pair.ctx, table, state, noise);
        let m = margin_of(pair, &fwd);
        loss += softplus(-beta * m);
        // d/dm of softplus(-βm) is -β σ(-βm); the softmax terms of both
        // log-probabilities cancel in the margin.
        let dm = -beta * sigmoid(-beta * m);
        let mut dz = vec![0.0; c];
        dz[pair.chosen] += dm;
        dz[pair.rejected] -= dm;
        backward(&pair.ctx, table, state, &fwd, &dz, &mut g);
    }
    if draws.len() > 1 {
        let k = draws.len() as f64;
        loss /= k;
        g.scale_in_place(1.0 / k);
    }
    (loss, g)
}

/// Standard DPO loss with a shared temperature.
pub fn dpo_loss(batch: &[EncodedPair], table: &EmbeddingTable, policy: &AdapterState, beta: f64) -> Result<LossValue> {
    if !(beta > 0.0) {
        return Err(Error::NonpositiveInput(format!("beta = {beta}")));
    }
    let betas = vec![beta; batch.len()];
    hano_loss(batch, table, policy, &betas, &[])
}

/// DPO loss with per-sample temperatures `betas` evaluated under the
/// perturbed policy. `draws[i]` holds the noise draws of sample `i` (shared by
/// its chosen and rejected responses); an empty `draws` means no noise. The
/// temperatures are constants with respect to the gradient.
pub fn hano_loss(
    batch: &[EncodedPair],
    table: &EmbeddingTable,
    policy: &AdapterState,
    betas: &[f64],
    draws: &[Vec<NoiseDraw>],
) -> Result<LossValue> {
    if betas.len() != batch.len() {
        return Err(Error::LengthMismatch {
            left: betas.len(),
            right: batch.len(),
        });
    }
    if !draws.is_empty() && draws.len() != batch.len() {
        return Err(Error::LengthMismatch {
            left: draws.len(),
            right: batch.len(),
        });
    }
    if let Some(b) = betas.iter().find(|b| !(**b > 0.0)) {
        return Err(Error::NonpositiveInput(format!("beta' = {b}")));
    }
    let terms: Vec<(f64, Gradients)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let d = draws.get(i).map(Vec::as_slice).unwrap_or(&[]);
            preference_term(p, table, policy, betas[i], d)
        })
        .collect();
    Ok(reduce_mean(terms, policy))
}

/// Implicit reward gap `β · margin` under the unperturbed policy.
pub fn reward_gap(pair: &EncodedPair, table: &EmbeddingTable, policy: &AdapterState, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::NonpositiveInput(format!("beta = {beta}")));
    }
    let fwd = forward(&pair.ctx, table, policy, &NoiseDraw::None);
    Ok(beta * margin_of(pair, &fwd))
}

pub fn reward_gaps(batch: &[EncodedPair], table: &EmbeddingTable, policy: &AdapterState, beta: f64) -> Result<Vec<f64>> {
    batch.par_iter().map(|p| reward_gap(p, table, policy, beta)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsiveness {
    pub eta: f64,
    pub mask: Vec<u8>,
    pub normalized_gaps: Vec<f64>,
}

/// Indices of the smallest and largest entries (lowest index on ties, and the
/// two are always distinct).
fn extremes(xs: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x < xs[lo] {
            lo = i;
        }
    }
    let mut hi = if lo == 0 { 1 } else { 0 };
    for (i, x) in xs.iter().enumerate() {
        if i != lo && *x > xs[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Batch responsiveness `η = σ(masked mean of R̄) / σ(mean of R̄)`, where
/// `R̄_i = R_i / mean(R)` and the mask drops the smallest and largest `R̄_i`
/// when there are at least three samples.
pub fn responsiveness(gaps: &[f64]) -> Result<Responsiveness> {
    let n = gaps.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mean_gap = gaps.iter().sum::<f64>() / n as f64;
    if !mean_gap.is_finite() || mean_gap.abs() < ETA_DEGENERACY {
        return Ok(Responsiveness {
            eta: 1.0,
            mask: vec![1; n],
            normalized_gaps: vec![1.0; n],
        });
    }
    let normalized: Vec<f64> = gaps.iter().map(|r| r / mean_gap).collect();
    let mut mask = vec![1u8; n];
    if n >= 3 {
        let (lo, hi) = extremes(&normalized);
        mask[lo] = 0;
        mask[hi] = 0;
    }
    let kept = mask.iter().filter(|m| **m == 1).count();
    let masked_mean = normalized
        .iter()
        .zip(&mask)
        .map(|(r, m)| r * f64::from(*m))
        .sum::<f64>()
        / kept as f64;
    let full_mean = normalized.iter().sum::<f64>() / n as f64;
    Ok(Responsiveness {
        eta: sigmoid(masked_mean) / sigmoid(full_mean),
        mask,
        normalized_gaps: normalized,
    })
}

/// `β'_i = η · λ_i · β₀`.
pub fn adaptive_beta(eta: f64, lambdas: &[f64], beta0: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::NonpositiveInput(format!("eta = {eta}")));
    }
    if !(beta0 > 0.0) {
        return Err(Error::NonpositiveInput(format!("beta0 = {beta0}")));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::NonpositiveInput(format!("lambda = {l}")));
    }
    Ok(lambdas.iter().map(|l| eta * l * beta0).collect())
}

/// Everything computed for one batch before its loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSignals {
    pub reward_gaps: Vec<f64>,
    pub normalized_gaps: Vec<f64>,
    pub mask: Vec<u8>,
    pub responsiveness: f64,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub beta0: f64,
}
