//! End-to-end helpers shared by the command line, the ablation suite and the
//! acceptance tests: dataset preparation, stage runs with per-epoch curves,
//! the hyperparameter sweep and the finite-difference gradient check.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_dpo_pairs, build_sft_samples, label_pairs, split_sequences, synth_generate, InteractionSequence, ItemMeta,
    PreferenceSample, SftSample, Split, SplitManifest, SynthConfig, TaggedSample, UserTruth, DEFAULT_MIN_SEQ_LEN,
};
use crate::embed_store::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::report::{epoch_record, EpochRecord, MetricsReport};
use crate::eval::hard_pair_margin;
use crate::hardness::{hardness_pass, HardnessStats};
use crate::io::{create_dir, read_json, read_jsonl, write_json, write_jsonl};
use crate::linalg::Matrix;
use crate::objective::{dpo_loss, encode_pairs, hano_loss, sft_loss, EncodedPair, EncodedSft};
use crate::policy::{AdapterState, Context, Gradients, NoiseDraw, NoiseMode};
use crate::rng::SeedStream;
use crate::trainer::{
    init_dpo_state, init_sft_state, train_dpo_encoded, train_sft, EpochStats, Stage, TrainConfig, TrainOutcome,
    TrainState, Variant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub ratios: [f64; 3],
    pub negatives_per_target: usize,
    pub min_seq_len: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            negatives_per_target: 3,
            min_seq_len: DEFAULT_MIN_SEQ_LEN,
        }
    }
}

/// Everything the training stages consume.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub table: EmbeddingTable,
    pub items: Option<Vec<ItemMeta>>,
    pub manifest: SplitManifest,
    pub samples: Vec<TaggedSample>,
    /// Training-split pairs, without λ.
    pub pairs: Vec<PreferenceSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<SftSample> {
        self.samples
            .iter()
            .filter(|t| t.split == split)
            .map(|t| t.sample.clone())
            .collect()
    }
}

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";

impl Dataset {
    /// Writes the prepared data directory.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.table.write_jsonl(&dir.join(EMBEDDINGS_FILE))?;
        if let Some(items) = &self.items {
            write_jsonl(&dir.join(ITEMS_FILE), items)?;
        }
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_jsonl(&dir.join(SAMPLES_FILE), &self.samples)?;
        write_jsonl(&dir.join(PAIRS_FILE), &self.pairs)
    }

    /// Reads a directory written by [`Dataset::write_dir`]; `pairs` overrides
    /// the directory's own `pairs.jsonl`.
    pub fn read_dir(dir: &Path, pairs: Option<&Path>) -> Result<Self> {
        let items_path = dir.join(ITEMS_FILE);
        let items = if items_path.is_file() {
            Some(read_jsonl(&items_path)?)
        } else {
            None
        };
        let pairs_path = pairs.map_or_else(|| dir.join(PAIRS_FILE), Path::to_path_buf);
        Ok(Self {
            table: EmbeddingTable::load(&dir.join(EMBEDDINGS_FILE))?,
            items,
            manifest: read_json(&dir.join(MANIFEST_FILE))?,
            samples: read_jsonl(&dir.join(SAMPLES_FILE))?,
            pairs: read_jsonl(&pairs_path)?,
        })
    }
}

/// Splits sequences, builds SFT samples for every split and preference pairs
/// for the training split. Pairs are labeled hard/easy when `users` and
/// `items` carry the generator's ground truth.
pub fn prepare(
    sequences: &[InteractionSequence],
    table: EmbeddingTable,
    items: Option<Vec<ItemMeta>>,
    users: Option<&[UserTruth]>,
    prep: &PrepConfig,
    seed: u64,
) -> Result<Dataset> {
    let ids: Vec<String> = sequences.iter().map(|s| s.user.clone()).collect();
    let manifest = split_sequences(&ids, prep.ratios, &SeedStream::new(seed, "split"))?;
    let catalog = table.ids().to_vec();
    let samples = build_sft_samples(sequences, &catalog, &SeedStream::new(seed, "sft-samples"))?;
    let split_of: HashMap<&str, Split> = [
        (&manifest.train, Split::Train),
        (&manifest.validation, Split::Validation),
        (&manifest.test, Split::Test),
    ]
    .into_iter()
    .flat_map(|(ids, s)| ids.iter().map(move |id| (id.as_str(), s)))
    .collect();
    let tagged: Vec<TaggedSample> = samples
        .into_iter()
        .map(|sample| {
            let split = split_of
                .get(sample.user.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("user {} missing from split manifest", sample.user)))?;
            Ok(TaggedSample { split, sample })
        })
        .collect::<Result<_>>()?;
    let train: Vec<SftSample> = tagged
        .iter()
        .filter(|t| t.split == Split::Train)
        .map(|t| t.sample.clone())
        .collect();
    let mut pairs = build_dpo_pairs(&train, prep.negatives_per_target, &SeedStream::new(seed, "dpo-pairs"))?;
    if let (Some(users), Some(items)) = (users, items.as_deref()) {
        label_pairs(&mut pairs, users, items);
    }
    Ok(Dataset {
        table,
        items,
        manifest,
        samples: tagged,
        pairs,
    })
}

/// Generates the synthetic corpus with `seed` and prepares it.
pub fn synth_dataset(synth: &SynthConfig, prep: &PrepConfig, seed: u64) -> Result<Dataset> {
    let corpus = synth_generate(synth, &SeedStream::new(seed, "synth"))?;
    prepare(
        &corpus.sequences,
        corpus.table,
        Some(corpus.items),
        Some(&corpus.users),
        prep,
        seed,
    )
}

/// λ annotations for `variant` (K = 1 for `hars_k1`), with Δ̄ taken over
/// `pairs`.
pub fn annotate_for(
    variant: Variant,
    topk: usize,
    pairs: &[PreferenceSample],
    table: &EmbeddingTable,
) -> Result<(Vec<PreferenceSample>, HardnessStats)> {
    hardness_pass(pairs, table, variant.hardness_topk(topk))
}

#[derive(Debug, Clone)]
pub struct StageRun {
    pub outcome: TrainOutcome,
    pub per_epoch: Vec<EpochRecord>,
}

/// Supervised stage from `init`, evaluating `eval` after every epoch.
pub fn run_sft(
    config: &TrainConfig,
    data: &Dataset,
    eval: &[SftSample],
    init: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&EpochStats, &TrainState) -> Result<()>,
) -> Result<StageRun> {
    let init = match init {
        Some(s) => s,
        None => init_sft_state(config, data.table.dim())?,
    };
    let items = data.items.as_deref();
    let mut per_epoch = Vec::new();
    if init.epochs_done == 0 {
        per_epoch.push(epoch_record(Stage::Sft, 0, None, eval, &data.table, &init.policy, items)?);
    }
    let train = data.split(Split::Train);
    let outcome = {
        let mut observer = |s: &EpochStats, st: &TrainState| {
            per_epoch.push(epoch_record(Stage::Sft, s.epoch, Some(s.loss), eval, &data.table, &st.policy, items)?);
            on_epoch(s, st)
        };
        train_sft(config, &train, &data.table, init, &mut observer)?
    };
    Ok(StageRun { outcome, per_epoch })
}

#[derive(Debug, Clone)]
pub struct DpoRun {
    pub stage: StageRun,
    pub reference: AdapterState,
    pub hard_pair_margin: Option<f64>,
}

/// Preference stage against the frozen `reference`, starting from `init`
/// (the thawed reference when `None`). `pairs` must already carry λ when the
/// variant uses it.
#[allow(clippy::too_many_arguments)]
pub fn run_dpo(
    config: &TrainConfig,
    data: &Dataset,
    pairs: &[PreferenceSample],
    sft_policy: &AdapterState,
    eval: &[SftSample],
    init: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&EpochStats, &TrainState) -> Result<()>,
) -> Result<DpoRun> {
    config.validate()?;
    let (reference, fresh) = init_dpo_state(config, sft_policy)?;
    let init = init.unwrap_or(fresh);
    let encoded = encode_pairs(pairs, &data.table, &reference)?;
    let items = data.items.as_deref();
    let mut per_epoch = Vec::new();
    if init.epochs_done == 0 {
        per_epoch.push(epoch_record(Stage::Dpo, 0, None, eval, &data.table, &init.policy, items)?);
    }
    let outcome = {
        let mut observer = |s: &EpochStats, st: &TrainState| {
            per_epoch.push(epoch_record(Stage::Dpo, s.epoch, Some(s.loss), eval, &data.table, &st.policy, items)?);
            on_epoch(s, st)
        };
        train_dpo_encoded(config, config.variant.switches(), &encoded, &data.table, init, &mut observer)?
    };
    let margin = hard_pair_margin(&encoded, &data.table, &outcome.state.policy, config.beta0)?;
    Ok(DpoRun {
        stage: StageRun { outcome, per_epoch },
        reference,
        hard_pair_margin: margin,
    })
}

pub fn ignore_epochs(_: &EpochStats, _: &TrainState) -> Result<()> {
    Ok(())
}

/// Full two-stage run of one variant, returning its report.
pub fn run_variant(config: &TrainConfig, data: &Dataset, sft_policy: &AdapterState, eval: &[SftSample]) -> Result<MetricsReport> {
    let pairs = if config.variant.switches().use_lambda {
        annotate_for(config.variant, config.topk, &data.pairs, &data.table)?.0
    } else {
        data.pairs.clone()
    };
    let run = run_dpo(config, data, &pairs, sft_policy, eval, None, &mut ignore_epochs)?;
    let mut report = MetricsReport::new(config.variant.as_str(), config.seed, eval, &data.table, &run.stage.outcome.state.policy)?;
    report.hard_pair_margin = run.hard_pair_margin;
    report.per_epoch = run.stage.per_epoch;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub topk: Vec<usize>,
    pub noise_sigma: Vec<f64>,
    pub beta0: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            topk: vec![1, 10, 20, 50],
            noise_sigma: vec![0.05, 0.1, 0.2],
            beta0: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: vec![7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub topk: usize,
    pub noise_sigma: f64,
    pub beta0: f64,
    pub seed: u64,
    pub auc: f64,
    #[serde(rename = "hr@3")]
    pub hr_at_k: f64,
    #[serde(rename = "ndcg@3")]
    pub ndcg_at_k: f64,
    pub final_loss: f64,
    pub hard_pair_margin: Option<f64>,
}

/// Cartesian grid of `hanorec` runs. The supervised stage is shared per seed;
/// rows are ordered by (topk, noise_sigma, beta0, seed) in grid order.
pub fn sweep(base: &TrainConfig, data: &Dataset, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    if grid.topk.is_empty() || grid.noise_sigma.is_empty() || grid.beta0.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Invalid("every sweep axis needs at least one value".into()));
    }
    let eval = data.split(Split::Test);
    let sft: Vec<AdapterState> = grid
        .seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            Ok(run_sft(&cfg, data, &eval, None, &mut ignore_epochs)?.outcome.state.policy)
        })
        .collect::<Result<_>>()?;
    let annotated: Vec<Vec<PreferenceSample>> = grid
        .topk
        .iter()
        .map(|&k| Ok(hardness_pass(&data.pairs, &data.table, k)?.0))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for ti in 0..grid.topk.len() {
        for &noise_sigma in &grid.noise_sigma {
            for &beta0 in &grid.beta0 {
                for si in 0..grid.seeds.len() {
                    cells.push((ti, noise_sigma, beta0, si));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|&(ti, noise_sigma, beta0, si)| {
            let cfg = TrainConfig {
                seed: grid.seeds[si],
                topk: grid.topk[ti],
                noise_sigma,
                beta0,
                variant: Variant::Hanorec,
                ..base.clone()
            };
            let run = run_dpo(&cfg, data, &annotated[ti], &sft[si], &eval, None, &mut ignore_epochs)?;
            let policy = &run.stage.outcome.state.policy;
            let m = MetricsReport::new(cfg.variant.as_str(), cfg.seed, &eval, &data.table, policy)?;
            Ok(SweepRow {
                topk: cfg.topk,
                noise_sigma,
                beta0,
                seed: cfg.seed,
                auc: m.auc,
                hr_at_k: m.hr_at_k,
                ndcg_at_k: m.ndcg_at_k,
                final_loss: run.stage.outcome.curve.last().map_or(f64::NAN, |e| e.loss),
                hard_pair_margin: run.hard_pair_margin,
            })
        })
        .collect()
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub checks: usize,
    pub max_rel_err: f64,
    pub worst_loss: String,
    pub worst_trial: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `‖analytic − numeric‖_F / max(‖analytic‖_F, ‖numeric‖_F, 1e-8)`, maximized
/// over the two factors, with central differences of step `h`.
pub fn finite_difference_error(
    state: &AdapterState,
    analytic: &Gradients,
    h: f64,
    f: impl Fn(&AdapterState) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (which, ana) in [(0, &analytic.factor_a), (1, &analytic.factor_b)] {
        let (rows, cols) = ana.shape();
        let mut num = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let bump = |delta: f64| {
                    let mut s = state.clone();
                    let m = if which == 0 { &mut s.factor_a } else { &mut s.factor_b };
                    m.set(i, j, m.get(i, j) + delta);
                    f(&s)
                };
                num.set(i, j, (bump(h) - bump(-h)) / (2.0 * h));
            }
        }
        let diff = ana.add_scaled(-1.0, &num).frobenius();
        worst = worst.max(diff / ana.frobenius().max(num.frobenius()).max(1e-8));
    }
    worst
}

struct Instance {
    table: EmbeddingTable,
    policy: AdapterState,
    sft: Vec<EncodedSft>,
    pairs: Vec<EncodedPair>,
    betas: Vec<f64>,
}

const GRADCHECK_CANDIDATES: usize = 10;

fn gradcheck_instance(stream: &SeedStream) -> Result<Instance> {
    let mut rng = stream.rng();
    let d = rng.random_range(2..=16);
    let r = rng.random_range(1..=4.min(d));
    let n_items = 24;
    let mut table = EmbeddingTable::new(d)?;
    for i in 0..n_items {
        let h: Vec<f64> = (0..d).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let x: Vec<f64> = (0..d).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        table.insert(format!("g{i:02}"), h, x)?;
    }
    let mut policy = AdapterState::init(d, r, &mut rng)?;
    policy.base = Matrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) + 0.2 * rng.sample::<f64, _>(StandardNormal));
    policy.factor_b = Matrix::from_fn(d, r, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let mut reference = policy.clone();
    reference.factor_b = Matrix::from_fn(d, r, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    reference.frozen = true;
    let context = |rng: &mut crate::rng::StreamRng| {
        let candidates = rand::seq::index::sample(rng, n_items, GRADCHECK_CANDIDATES)
            .into_iter()
            .map(|c| table.id(c).to_string())
            .collect::<Vec<_>>();
        let history: Vec<String> = (0..rng.random_range(1..=5))
            .map(|_| table.id(rng.random_range(0..n_items)).to_string())
            .collect();
        Context::encode(&history, &candidates, &table)
    };
    let mut sft = Vec::new();
    let mut raw_pairs = Vec::new();
    for _ in 0..3 {
        let ctx = context(&mut rng)?;
        sft.push(EncodedSft {
            ctx,
            target: rng.random_range(0..GRADCHECK_CANDIDATES),
        });
        let ctx = context(&mut rng)?;
        let w = rng.random_range(0..GRADCHECK_CANDIDATES);
        let l = (w + rng.random_range(1..GRADCHECK_CANDIDATES)) % GRADCHECK_CANDIDATES;
        raw_pairs.push((ctx, w, l));
    }
    let pairs: Vec<EncodedPair> = raw_pairs
        .into_iter()
        .map(|(ctx, chosen, rejected)| {
            let r = crate::policy::forward(&ctx, &table, &reference, &NoiseDraw::None);
            EncodedPair {
                ref_chosen: r.log_probs[chosen],
                ref_rejected: r.log_probs[rejected],
                ctx,
                chosen,
                rejected,
                lambda: None,
                hard_label: None,
            }
        })
        .collect();
    let betas = (0..pairs.len()).map(|_| rng.random_range(0.01..0.5)).collect();
    Ok(Instance {
        table,
        policy,
        sft,
        pairs,
        betas,
    })
}

/// Compares analytic gradients of every loss against central differences
/// over `trials` random instances.
pub fn gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::Invalid("gradcheck needs at least one trial".into()));
    }
    let stream = SeedStream::new(seed, "gradcheck");
    let h = GRADCHECK_STEP;
    let per_trial: Vec<Vec<(&'static str, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let sub = stream.substream(t as u64);
            let inst = gradcheck_instance(&sub)?;
            let (tb, p) = (&inst.table, &inst.policy);
            let mut out = Vec::new();
            let lv = sft_loss(&inst.sft, tb, p);
            out.push(("sft", finite_difference_error(p, &lv.gradients, h, |s| sft_loss(&inst.sft, tb, s).value)));
            let beta = inst.betas[0];
            let lv = dpo_loss(&inst.pairs, tb, p, beta)?;
            out.push((
                "dpo",
                finite_difference_error(p, &lv.gradients, h, |s| dpo_loss(&inst.pairs, tb, s, beta).map_or(f64::NAN, |l| l.value)),
            ));
            let lv = hano_loss(&inst.pairs, tb, p, &inst.betas, &[])?;
            out.push((
                "hano",
                finite_difference_error(p, &lv.gradients, h, |s| {
                    hano_loss(&inst.pairs, tb, s, &inst.betas, &[]).map_or(f64::NAN, |l| l.value)
                }),
            ));
            for (name, mode) in [("hano_parameter_noise", NoiseMode::Parameter), ("hano_logit_noise", NoiseMode::Logit)] {
                let noisy = p.clone().with_noise(mode, 0.1);
                let mut rng = sub.named(name).rng();
                let draws: Vec<Vec<NoiseDraw>> = inst
                    .pairs
                    .iter()
                    .map(|pr| crate::policy::draw_noise(&noisy, pr.ctx.candidates.len(), &mut rng).map(|d| vec![d]))
                    .collect::<Result<_>>()?;
                let lv = hano_loss(&inst.pairs, tb, &noisy, &inst.betas, &draws)?;
                out.push((
                    name,
                    finite_difference_error(&noisy, &lv.gradients, h, |s| {
                        hano_loss(&inst.pairs, tb, s, &inst.betas, &draws).map_or(f64::NAN, |l| l.value)
                    }),
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut report = GradcheckReport {
        trials,
        checks: 0,
        max_rel_err: 0.0,
        worst_loss: String::new(),
        worst_trial: 0,
        tolerance: GRADCHECK_TOLERANCE,
        passed: true,
    };
    for (t, checks) in per_trial.iter().enumerate() {
        for &(name, err) in checks {
            report.checks += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst_loss = name.to_string();
                report.worst_trial = t;
            }
        }
    }
    report.passed = report.max_rel_err <= GRADCHECK_TOLERANCE;
    Ok(report)
}
