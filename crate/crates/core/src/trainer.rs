//! Training loops for the supervised stage and the preference stage, plus
//! checkpoints.
//!
//! All randomness comes from streams keyed by `(seed, stage, epoch, batch,
//! sample)`, so a run resumed from a checkpoint at an epoch boundary
//! reproduces the uninterrupted run exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{PreferenceSample, SftSample};
use crate::embed_store::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objective::{
    adaptive_beta, encode_pairs, encode_sft, hano_loss, responsiveness, reward_gaps, sft_loss, EncodedPair,
    EncodedSft,
};
use crate::optim::{apply_update, OptimizerState};
use crate::policy::{draw_noise, snapshot_reference, AdapterState, Gradients, NoiseDraw, NoiseMode, DEFAULT_RANK};
use crate::rng::SeedStream;

pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SftOnly,
    Dpo,
    Hars,
    Nodo,
    Hanorec,
    HarsK1,
}

impl Variant {
    /// Ablation order used in reports.
    pub const ABLATION: [Variant; 5] = [Variant::Dpo, Variant::Hars, Variant::Nodo, Variant::HarsK1, Variant::Hanorec];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SftOnly => "sft_only",
            Variant::Dpo => "dpo",
            Variant::Hars => "hars",
            Variant::Nodo => "nodo",
            Variant::Hanorec => "hanorec",
            Variant::HarsK1 => "hars_k1",
        }
    }

    pub fn switches(self) -> Switches {
        match self {
            Variant::SftOnly | Variant::Dpo => Switches::default(),
            Variant::Hars => Switches {
                use_lambda: true,
                use_eta: true,
                noise: false,
            },
            Variant::Nodo => Switches {
                noise: true,
                ..Switches::default()
            },
            Variant::Hanorec | Variant::HarsK1 => Switches {
                use_lambda: true,
                use_eta: true,
                noise: true,
            },
        }
    }

    /// Neighbor count for this variant's hardness annotation.
    pub fn hardness_topk(self, topk: usize) -> usize {
        if self == Variant::HarsK1 {
            1
        } else {
            topk
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "sft_only" => Ok(Variant::SftOnly),
            "dpo" => Ok(Variant::Dpo),
            "hars" => Ok(Variant::Hars),
            "nodo" => Ok(Variant::Nodo),
            "hanorec" => Ok(Variant::Hanorec),
            "hars_k1" => Ok(Variant::HarsK1),
            _ => Err(Error::Invalid(format!("unknown variant `{s}`"))),
        }
    }
}

/// Which adaptive pathways are active in the preference stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub use_lambda: bool,
    pub use_eta: bool,
    pub noise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_sft: usize,
    pub epochs_dpo: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub beta0: f64,
    pub topk: usize,
    pub noise_sigma: f64,
    pub noise_mode: NoiseMode,
    pub variant: Variant,
    pub rank: usize,
    /// Monte-Carlo draws per sample for the smoothed policy.
    pub noise_samples: usize,
    pub dump_signals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs_sft: 10,
            epochs_dpo: 5,
            batch_size: 16,
            learning_rate: 1e-4,
            grad_accum_steps: 8,
            beta0: 0.1,
            topk: 10,
            noise_sigma: 0.1,
            noise_mode: NoiseMode::Parameter,
            variant: Variant::Hanorec,
            rank: DEFAULT_RANK,
            noise_samples: 1,
            dump_signals: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.rank == 0 || self.topk == 0 {
            return bad("batch_size, grad_accum_steps, rank and topk must be positive".into());
        }
        if self.noise_samples == 0 {
            return bad("noise_samples must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return bad(format!("beta0 must be positive, got {}", self.beta0));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Dpo,
}

/// Policy parameters, optimizer moments and the epoch cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub policy: AdapterState,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn fresh(policy: AdapterState) -> Self {
        Self {
            optimizer: OptimizerState::new(&policy),
            policy,
            epochs_done: 0,
        }
    }
}

/// Identity-base initial state for the supervised stage.
pub fn init_sft_state(config: &TrainConfig, dim: usize) -> Result<TrainState> {
    let mut rng = SeedStream::new(config.seed, "sft-init").rng();
    Ok(TrainState::fresh(AdapterState::init(dim, config.rank, &mut rng)?))
}

/// Freezes the supervised policy as the reference and returns it together
/// with the initial preference-stage state.
pub fn init_dpo_state(config: &TrainConfig, sft_policy: &AdapterState) -> Result<(AdapterState, TrainState)> {
    let mut rng = SeedStream::new(config.seed, "dpo-init").rng();
    let reference = snapshot_reference(sft_policy, &mut rng)?;
    let switches = config.variant.switches();
    let (mode, sigma) = if switches.noise {
        (config.noise_mode, config.noise_sigma)
    } else {
        (config.noise_mode, 0.0)
    };
    let policy = reference.thaw().with_noise(mode, sigma);
    Ok((reference, TrainState::fresh(policy)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
}

/// One line of `signals.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub epoch: usize,
    pub batch: usize,
    pub gaps: Vec<f64>,
    pub eta: f64,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub curve: Vec<EpochStats>,
    pub signals: Vec<SignalRecord>,
}

/// Called after every completed epoch.
pub type EpochObserver<'a> = dyn FnMut(&EpochStats, &TrainState) -> Result<()> + 'a;

/// On-disk checkpoint (`checkpoint.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub dim: usize,
    pub rank: usize,
    pub base: Vec<f64>,
    pub factor_a: Vec<f64>,
    pub factor_b: Vec<f64>,
    pub noise_sigma: f64,
    pub noise_mode: NoiseMode,
    /// Epochs consumed; every random stream is keyed from here.
    pub rng_cursor: u64,
    pub stage: Stage,
    pub frozen: bool,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(state: &TrainState, stage: Stage) -> Self {
        let mut c = Self::of_policy(&state.policy, stage);
        c.rng_cursor = state.epochs_done as u64;
        c.optimizer = Some(state.optimizer.clone());
        c
    }

    pub fn of_policy(p: &AdapterState, stage: Stage) -> Self {
        Self {
            dim: p.dim(),
            rank: p.rank(),
            base: p.base.as_slice().to_vec(),
            factor_a: p.factor_a.as_slice().to_vec(),
            factor_b: p.factor_b.as_slice().to_vec(),
            noise_sigma: p.noise_sigma,
            noise_mode: p.noise_mode,
            rng_cursor: 0,
            stage,
            frozen: p.frozen,
            optimizer: None,
        }
    }

    pub fn policy(&self) -> Result<AdapterState> {
        let corrupt = |e: Error| Error::CorruptCheckpoint(e.to_string());
        let state = AdapterState {
            base: Matrix::from_vec(self.dim, self.dim, self.base.clone()).map_err(corrupt)?,
            factor_a: Matrix::from_vec(self.rank, self.dim, self.factor_a.clone()).map_err(corrupt)?,
            factor_b: Matrix::from_vec(self.dim, self.rank, self.factor_b.clone()).map_err(corrupt)?,
            noise_sigma: self.noise_sigma,
            noise_mode: self.noise_mode,
            frozen: self.frozen,
        };
        state.validate().map_err(corrupt)?;
        Ok(state)
    }

    pub fn train_state(&self) -> Result<TrainState> {
        let policy = self.policy()?;
        let optimizer = match &self.optimizer {
            Some(o) => {
                let ok = o.first_moment.factor_a.shape() == policy.factor_a.shape()
                    && o.second_moment.factor_a.shape() == policy.factor_a.shape()
                    && o.first_moment.factor_b.shape() == policy.factor_b.shape()
                    && o.second_moment.factor_b.shape() == policy.factor_b.shape();
                if !ok {
                    return Err(Error::CorruptCheckpoint("optimizer moment shapes do not match".into()));
                }
                o.clone()
            }
            None => OptimizerState::new(&policy),
        };
        Ok(TrainState {
            policy,
            optimizer,
            epochs_done: self.rng_cursor as usize,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
        c.policy()?;
        Ok(c)
    }
}

fn epoch_order(n: usize, stream: &SeedStream, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.substream(epoch as u64).rng());
    order
}

/// Runs the optimizer over micro-batches of `order`, taking one step per
/// `grad_accum_steps` micro-batches. `micro` returns the batch-mean loss and
/// gradient of one micro-batch.
fn run_epoch<F>(
    config: &TrainConfig,
    state: &mut TrainState,
    stage: Stage,
    order: &[usize],
    mut micro: F,
) -> Result<f64>
where
    F: FnMut(usize, &[usize], &AdapterState) -> Result<(f64, Gradients)>,
{
    let epoch = state.epochs_done;
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
    for (group_idx, group) in batches.chunks(config.grad_accum_steps).enumerate() {
        let mut acc = Gradients::zeros(&state.policy);
        let mut count = 0usize;
        for (k, batch) in group.iter().enumerate() {
            let batch_idx = group_idx * config.grad_accum_steps + k;
            let (loss, mut g) = micro(batch_idx, batch, &state.policy)?;
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD || !g.is_finite() {
                return Err(Error::DivergenceDetected {
                    epoch,
                    step: state.optimizer.step_count as usize,
                    loss,
                    last_good: Box::new(Checkpoint::capture(state, stage)),
                });
            }
            let n = batch.len();
            g.scale_in_place(n as f64);
            acc.add_in_place(&g);
            loss_sum += loss * n as f64;
            count += n;
            seen += n;
        }
        acc.scale_in_place(1.0 / count as f64);
        apply_update(&mut state.optimizer, &mut state.policy, &acc, config.learning_rate)?;
    }
    Ok(loss_sum / seen.max(1) as f64)
}

/// Supervised stage: minimizes the candidate-softmax cross-entropy.
pub fn train_sft(
    config: &TrainConfig,
    samples: &[SftSample],
    table: &EmbeddingTable,
    init: TrainState,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let data = encode_sft(samples, table)?;
    train_sft_encoded(config, &data, table, init, observer)
}

pub fn train_sft_encoded(
    config: &TrainConfig,
    data: &[EncodedSft],
    table: &EmbeddingTable,
    init: TrainState,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shuffle = SeedStream::new(config.seed, "sft-shuffle");
    let mut state = init;
    let mut curve = Vec::new();
    while state.epochs_done < config.epochs_sft {
        let order = epoch_order(data.len(), &shuffle, state.epochs_done);
        let loss = run_epoch(config, &mut state, Stage::Sft, &order, |_, batch, policy| {
            let items: Vec<EncodedSft> = batch.iter().map(|&i| data[i].clone()).collect();
            let lv = sft_loss(&items, table, policy);
            Ok((lv.value, lv.gradients))
        })?;
        state.epochs_done += 1;
        let stats = EpochStats {
            epoch: state.epochs_done,
            loss,
        };
        observer(&stats, &state)?;
        curve.push(stats);
    }
    Ok(TrainOutcome {
        state,
        curve,
        signals: Vec::new(),
    })
}

/// Preference stage with hardness-aware temperatures and noise smoothing,
/// gated by the variant's switches.
pub fn train_dpo(
    config: &TrainConfig,
    pairs: &[PreferenceSample],
    table: &EmbeddingTable,
    reference: &AdapterState,
    init: TrainState,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !reference.frozen {
        return Err(Error::Invalid("reference state must be frozen".into()));
    }
    let data = encode_pairs(pairs, table, reference)?;
    train_dpo_encoded(config, config.variant.switches(), &data, table, init, observer)
}

pub fn train_dpo_encoded(
    config: &TrainConfig,
    switches: Switches,
    data: &[EncodedPair],
    table: &EmbeddingTable,
    init: TrainState,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if switches.use_lambda {
        if let Some(index) = data.iter().position(|p| p.lambda.is_none()) {
            return Err(Error::MissingLambda {
                index,
                variant: config.variant.to_string(),
            });
        }
    }
    let shuffle = SeedStream::new(config.seed, "dpo-shuffle");
    let noise_stream = SeedStream::new(config.seed, "dpo-noise");
    let mut state = init;
    let mut curve = Vec::new();
    let mut signals = Vec::new();
    while state.epochs_done < config.epochs_dpo {
        let epoch = state.epochs_done;
        let epoch_noise = noise_stream.substream(epoch as u64);
        let order = epoch_order(data.len(), &shuffle, epoch);
        let mut epoch_signals = Vec::new();
        let loss = run_epoch(config, &mut state, Stage::Dpo, &order, |batch_idx, batch, policy| {
            let items: Vec<EncodedPair> = batch.iter().map(|&i| data[i].clone()).collect();
            let gaps = reward_gaps(&items, table, policy, config.beta0)?;
            let eta = if switches.use_eta { responsiveness(&gaps)?.eta } else { 1.0 };
            let lambdas: Vec<f64> = if switches.use_lambda {
                items.iter().map(|p| p.lambda.unwrap_or(1.0)).collect()
            } else {
                vec![1.0; items.len()]
            };
            let betas = adaptive_beta(eta, &lambdas, config.beta0)?;
            let noisy = switches.noise && policy.noise_sigma > 0.0 && policy.noise_mode != NoiseMode::Off;
            let draws: Vec<Vec<NoiseDraw>> = if noisy {
                let batch_stream = epoch_noise.substream(batch_idx as u64);
                items
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let mut rng = batch_stream.substream(i as u64).rng();
                        (0..config.noise_samples)
                            .map(|_| draw_noise(policy, p.ctx.candidates.len(), &mut rng))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let lv = hano_loss(&items, table, policy, &betas, &draws)?;
            if config.dump_signals {
                epoch_signals.push(SignalRecord {
                    epoch: epoch + 1,
                    batch: batch_idx,
                    gaps,
                    eta,
                    betas,
                });
            }
            Ok((lv.value, lv.gradients))
        })?;
        signals.extend(epoch_signals);
        state.epochs_done += 1;
        let stats = EpochStats {
            epoch: state.epochs_done,
            loss,
        };
        observer(&stats, &state)?;
        curve.push(stats);
    }
    Ok(TrainOutcome { state, curve, signals })
}

/// An observer that does nothing.
pub fn no_observer(_: &EpochStats, _: &TrainState) -> Result<()> {
    Ok(())
}
