use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hanorec_core::corpus::{
    load_interactions, synth_generate, ItemMeta, PreferenceSample, SynthConfig, UserTruth, DEFAULT_MIN_SEQ_LEN,
};
use hanorec_core::eval::report::{emit_report, MetricsReport};
use hanorec_core::eval::ablation_suite;
use hanorec_core::experiment::{
    annotate_for, prepare, run_dpo, run_sft, sweep, Dataset, PrepConfig, SweepGrid, EMBEDDINGS_FILE, ITEMS_FILE,
};
use hanorec_core::hardness::{hardness_pass, DEFAULT_TOPK};
use hanorec_core::io::{create_dir, read_json, read_jsonl, write_json, write_jsonl};
use hanorec_core::trainer::{EpochStats, Stage, TrainState};
use hanorec_core::{Checkpoint, EmbeddingTable, Error, SeedStream, TrainConfig, Variant};

use crate::{
    AblateArgs, CliError, Command, DpoArgs, EvalArgs, GradcheckArgs, HardnessArgs, Logger, PrepArgs, SftArgs, SweepArgs,
    SynthArgs, TrainFlags,
};

type CliResult<T> = Result<T, CliError>;

const DEFAULT_SEED: u64 = 7;
const RESOLVED_FILE: &str = "config.resolved.json";

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Everything needed to re-run a command, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResolvedRunSpec {
    command: String,
    config: Value,
    inputs: BTreeMap<String, PathBuf>,
    out: PathBuf,
    seed: u64,
}

pub fn run(cli: &crate::Cli, log: &Logger) -> CliResult<()> {
    let ctx = Ctx {
        config: cli.config.as_deref(),
        out: cli.out.as_deref(),
        seed: cli.seed,
        log,
    };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Prep(a) => prep(&ctx, a),
        Command::Hardness(a) => hardness(&ctx, a),
        Command::Sft(a) => sft(&ctx, a),
        Command::Dpo(a) => dpo(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Sweep(a) => sweep_cmd(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
    }
}

struct Ctx<'a> {
    config: Option<&'a Path>,
    out: Option<&'a Path>,
    seed: Option<u64>,
    log: &'a Logger,
}

impl Ctx<'_> {
    fn out(&self) -> CliResult<&Path> {
        self.out.ok_or_else(|| bad("--out DIR is required"))
    }

    /// The config file's object, unwrapping a `config.resolved.json`.
    fn config_value(&self) -> CliResult<Option<Value>> {
        let Some(path) = self.config else { return Ok(None) };
        require_file(path, "--config")?;
        let v: Value = read_json(path)?;
        Ok(Some(match v.get("command") {
            Some(_) => v.get("config").cloned().unwrap_or(Value::Null),
            None => v,
        }))
    }

    fn typed_config<T: for<'de> Deserialize<'de> + Default>(&self) -> CliResult<T> {
        match self.config_value()? {
            None => Ok(T::default()),
            Some(v) => serde_json::from_value(v).map_err(|e| bad(format!("bad config file: {e}"))),
        }
    }

    fn seed_or(&self, from_config: Option<u64>) -> u64 {
        self.seed.or(from_config).unwrap_or(DEFAULT_SEED)
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(bad(format!("{what}: {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(bad(format!("{what}: {} is not a directory", path.display())))
    }
}

/// Refuses to write an output over one of the inputs.
fn guard_outputs(outputs: &[PathBuf], inputs: &[&Path]) -> CliResult<()> {
    for o in outputs {
        let Ok(o) = o.canonicalize() else { continue };
        for i in inputs {
            if i.canonicalize().is_ok_and(|i| i == o) {
                return Err(bad(format!("output {} would overwrite an input", o.display())));
            }
        }
    }
    Ok(())
}

fn write_resolved<T: Serialize>(dir: &Path, file: &str, command: &str, config: &T, inputs: &[(&str, &Path)], seed: u64) -> CliResult<()> {
    let spec = ResolvedRunSpec {
        command: command.to_string(),
        config: serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?,
        inputs: inputs.iter().map(|(k, p)| (k.to_string(), p.to_path_buf())).collect(),
        out: dir.to_path_buf(),
        seed,
    };
    write_json(&dir.join(file), &spec)?;
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> CliResult<()> {
    let out = ctx.out()?;
    let mut cfg: SynthConfig = ctx.typed_config()?;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.users, a.users);
    set(&mut cfg.items, a.items);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.genres, a.genres);
    if let Some(p) = a.p_amb {
        cfg.p_amb = p;
    }
    let seed = ctx.seed_or(None);
    let corpus = synth_generate(&cfg, &SeedStream::new(seed, "synth"))?;
    create_dir(out)?;
    write_jsonl(&out.join("interactions.jsonl"), &corpus.sequences)?;
    corpus.table.write_jsonl(&out.join(EMBEDDINGS_FILE))?;
    if a.cache {
        corpus.table.write_cache(&out.join("embeddings.bin"))?;
    }
    write_jsonl(&out.join(ITEMS_FILE), &corpus.items)?;
    write_jsonl(&out.join("users.jsonl"), &corpus.users)?;
    write_resolved(out, "synth.resolved.json", "synth", &cfg, &[], seed)?;
    ctx.log.info(
        "synth",
        json!({ "out": out, "items": corpus.items.len(), "users": corpus.users.len(), "seed": seed }),
    );
    Ok(())
}

fn prep(ctx: &Ctx, a: &PrepArgs) -> CliResult<()> {
    let out = ctx.out()?;
    let mut cfg: PrepConfig = ctx.typed_config()?;
    if let Some(r) = &a.ratios {
        cfg.ratios = [r[0], r[1], r[2]];
    }
    if let Some(n) = a.negatives_per_target {
        cfg.negatives_per_target = n;
    }
    if let Some(m) = a.min_seq_len {
        cfg.min_seq_len = m;
    }
    if cfg.min_seq_len < DEFAULT_MIN_SEQ_LEN {
        return Err(bad(format!(
            "--min-seq-len must be at least {DEFAULT_MIN_SEQ_LEN} (history window plus target), got {}",
            cfg.min_seq_len
        )));
    }
    let from_dir = |name: &str| a.data.as_ref().map(|d| d.join(name));
    let interactions = a
        .interactions
        .clone()
        .or_else(|| from_dir("interactions.jsonl"))
        .ok_or_else(|| bad("need --data DIR or --interactions PATH"))?;
    let embeddings = a
        .embeddings
        .clone()
        .or_else(|| from_dir(EMBEDDINGS_FILE))
        .ok_or_else(|| bad("need --data DIR or --embeddings PATH"))?;
    require_file(&interactions, "interactions")?;
    require_file(&embeddings, "embeddings")?;
    let items_path = from_dir(ITEMS_FILE).filter(|p| p.is_file());
    let users_path = from_dir("users.jsonl").filter(|p| p.is_file());
    let outputs: Vec<PathBuf> = ["manifest.json", "samples.jsonl", "pairs.jsonl", EMBEDDINGS_FILE, ITEMS_FILE]
        .iter()
        .map(|f| out.join(f))
        .collect();
    let mut inputs: Vec<&Path> = vec![&interactions, &embeddings];
    inputs.extend(items_path.as_deref());
    guard_outputs(&outputs, &inputs)?;

    let seed = ctx.seed_or(None);
    let (sequences, stats) = load_interactions(&interactions, cfg.min_seq_len)?;
    let table = EmbeddingTable::load(&embeddings)?;
    let items: Option<Vec<ItemMeta>> = items_path.as_deref().map(read_jsonl).transpose()?;
    let users: Option<Vec<UserTruth>> = users_path.as_deref().map(read_jsonl).transpose()?;
    let data = prepare(&sequences, table, items, users.as_deref(), &cfg, seed)?;
    data.write_dir(out)?;
    write_json(&out.join("ingest_stats.json"), &stats)?;
    write_resolved(
        out,
        "prep.resolved.json",
        "prep",
        &cfg,
        &[("interactions", &interactions), ("embeddings", &embeddings)],
        seed,
    )?;
    let m = &data.manifest;
    ctx.log.info(
        "prep",
        json!({
            "sequences": stats.kept, "dropped_short": stats.dropped_short,
            "train": m.train.len(), "validation": m.validation.len(), "test": m.test.len(),
            "pairs": data.pairs.len(), "seed": seed,
        }),
    );
    Ok(())
}

fn hardness(ctx: &Ctx, a: &HardnessArgs) -> CliResult<()> {
    let out = ctx.out()?;
    require_file(&a.pairs, "--pairs")?;
    require_file(&a.embeddings, "--embeddings")?;
    let k = a.topk.unwrap_or(DEFAULT_TOPK);
    let seed = ctx.seed_or(None);
    guard_outputs(&[out.join("pairs.jsonl")], &[&a.pairs, &a.embeddings])?;
    let pairs: Vec<PreferenceSample> = read_jsonl(&a.pairs)?;
    let table = EmbeddingTable::load(&a.embeddings)?;
    let (annotated, stats) = hardness_pass(&pairs, &table, k)?;
    create_dir(out)?;
    write_jsonl(&out.join("pairs.jsonl"), &annotated)?;
    let mut stats_json = serde_json::to_value(stats).map_err(|e| CliError::Runtime(e.to_string()))?;
    stats_json["seed"] = json!(seed);
    write_json(&out.join("hardness_stats.json"), &stats_json)?;
    ctx.log.info("hardness", stats_json);
    Ok(())
}

fn train_config(ctx: &Ctx, flags: &TrainFlags, stage: Stage, variant: Option<Variant>) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = ctx.typed_config()?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    macro_rules! over {
        ($field:ident, $flag:expr) => {
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    over!(beta0, flags.beta0);
    over!(noise_sigma, flags.noise_sigma);
    over!(noise_mode, flags.noise_mode);
    over!(topk, flags.topk);
    over!(learning_rate, flags.lr);
    over!(batch_size, flags.batch_size);
    over!(grad_accum_steps, flags.grad_accum);
    over!(rank, flags.rank);
    over!(noise_samples, flags.noise_samples);
    over!(variant, variant);
    if flags.dump_signals {
        cfg.dump_signals = true;
    }
    match stage {
        Stage::Sft => over!(epochs_sft, flags.epochs),
        Stage::Dpo => over!(epochs_dpo, flags.epochs),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path, pairs: Option<&Path>) -> CliResult<Dataset> {
    require_dir(dir, "--data")?;
    for f in ["manifest.json", "samples.jsonl", EMBEDDINGS_FILE] {
        require_file(&dir.join(f), "--data")?;
    }
    match pairs {
        Some(p) => require_file(p, "--pairs")?,
        None => require_file(&dir.join("pairs.jsonl"), "--data")?,
    }
    Ok(Dataset::read_dir(dir, pairs)?)
}

/// Writes per-epoch checkpoints and logs progress.
fn epoch_writer<'a>(
    ckpt_dir: &'a Path,
    stage: Stage,
    log: &'a Logger,
) -> impl FnMut(&EpochStats, &TrainState) -> hanorec_core::Result<()> + 'a {
    move |s, st| {
        Checkpoint::capture(st, stage).save(&ckpt_dir.join(format!("epoch-{:03}.json", s.epoch)))?;
        log.info("epoch", json!({ "stage": stage, "epoch": s.epoch, "loss": s.loss }));
        Ok(())
    }
}

/// Saves the last good checkpoint of a diverged run before reporting it.
fn on_divergence(ckpt_dir: &Path, e: Error) -> CliError {
    if let Error::DivergenceDetected { last_good, .. } = &e {
        let _ = last_good.save(&ckpt_dir.join("last_good.json"));
    }
    e.into()
}

fn load_checkpoint(path: &Path, what: &str, stage: Stage) -> CliResult<Checkpoint> {
    require_file(path, what)?;
    let c = Checkpoint::load(path)?;
    if c.stage != stage {
        return Err(bad(format!("{what}: {} is a {:?} checkpoint", path.display(), c.stage)));
    }
    Ok(c)
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    out: &Path,
    variant: &str,
    cfg: &TrainConfig,
    data: &Dataset,
    eval: &[hanorec_core::SftSample],
    state: &TrainState,
    stage: Stage,
    per_epoch: Vec<hanorec_core::eval::EpochRecord>,
    margin: Option<f64>,
) -> CliResult<MetricsReport> {
    Checkpoint::capture(state, stage).save(&out.join("checkpoints").join("checkpoint.json"))?;
    let mut report = MetricsReport::new(variant, cfg.seed, eval, &data.table, &state.policy)?;
    report.per_epoch = per_epoch;
    report.hard_pair_margin = margin;
    emit_report(out, &report)?;
    Ok(report)
}

fn sft(ctx: &Ctx, a: &SftArgs) -> CliResult<()> {
    let out = ctx.out()?;
    let cfg = train_config(ctx, &a.train, Stage::Sft, None)?;
    let data = load_data(&a.data, None)?;
    let resume = a
        .resume
        .as_deref()
        .map(|p| load_checkpoint(p, "--resume", Stage::Sft)?.train_state().map_err(CliError::from))
        .transpose()?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("data", &a.data)];
    if let Some(r) = &a.resume {
        inputs.push(("resume", r));
    }
    write_resolved(out, RESOLVED_FILE, "sft", &cfg, &inputs, cfg.seed)?;
    let eval = data.split(a.split);
    let mut writer = epoch_writer(&ckpt_dir, Stage::Sft, ctx.log);
    let run = run_sft(&cfg, &data, &eval, resume, &mut writer).map_err(|e| on_divergence(&ckpt_dir, e))?;
    let report = finish_run(
        out,
        Variant::SftOnly.as_str(),
        &cfg,
        &data,
        &eval,
        &run.outcome.state,
        Stage::Sft,
        run.per_epoch,
        None,
    )?;
    ctx.log.info("sft", json!({ "out": out, "hr@3": report.hr_at_k, "ndcg@3": report.ndcg_at_k, "auc": report.auc }));
    Ok(())
}

fn dpo(ctx: &Ctx, a: &DpoArgs) -> CliResult<()> {
    let out = ctx.out()?;
    let sft_path = a
        .sft
        .as_deref()
        .ok_or_else(|| bad("dpo needs a supervised-stage checkpoint: pass --sft PATH (run `hanorec sft` first)"))?;
    let sft_ckpt = load_checkpoint(sft_path, "--sft", Stage::Sft)?;
    let cfg = train_config(ctx, &a.train, Stage::Dpo, a.variant)?;
    if cfg.variant == Variant::SftOnly {
        return Err(bad("variant sft_only has no preference stage"));
    }
    let data = load_data(&a.data, a.pairs.as_deref())?;
    let pairs = if cfg.variant == Variant::HarsK1 {
        annotate_for(cfg.variant, cfg.topk, &data.pairs, &data.table)?.0
    } else {
        data.pairs.clone()
    };
    let resume = a
        .resume
        .as_deref()
        .map(|p| load_checkpoint(p, "--resume", Stage::Dpo)?.train_state().map_err(CliError::from))
        .transpose()?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let pairs_path = a.pairs.clone().unwrap_or_else(|| a.data.join("pairs.jsonl"));
    let mut inputs: Vec<(&str, &Path)> = vec![("data", &a.data), ("sft", sft_path), ("pairs", &pairs_path)];
    if let Some(r) = &a.resume {
        inputs.push(("resume", r));
    }
    write_resolved(out, RESOLVED_FILE, "dpo", &cfg, &inputs, cfg.seed)?;
    let eval = data.split(a.split);
    let sft_policy = sft_ckpt.policy()?;
    let mut writer = epoch_writer(&ckpt_dir, Stage::Dpo, ctx.log);
    let run = run_dpo(&cfg, &data, &pairs, &sft_policy, &eval, resume, &mut writer)
        .map_err(|e| on_divergence(&ckpt_dir, e))?;
    Checkpoint::of_policy(&run.reference, Stage::Dpo).save(&ckpt_dir.join("reference.json"))?;
    if cfg.dump_signals {
        write_jsonl(&out.join("signals.jsonl"), &run.stage.outcome.signals)?;
    }
    let report = finish_run(
        out,
        cfg.variant.as_str(),
        &cfg,
        &data,
        &eval,
        &run.stage.outcome.state,
        Stage::Dpo,
        run.stage.per_epoch,
        run.hard_pair_margin,
    )?;
    ctx.log.info(
        "dpo",
        json!({
            "out": out, "variant": cfg.variant, "hr@3": report.hr_at_k, "ndcg@3": report.ndcg_at_k,
            "auc": report.auc, "hard_pair_margin": report.hard_pair_margin,
        }),
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> CliResult<()> {
    let out = ctx.out()?;
    require_file(&a.checkpoint, "--checkpoint")?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data, None)?;
    // Label the report from the run that produced the checkpoint, if known.
    let run_dir = a.checkpoint.parent().and_then(Path::parent);
    let resolved: Option<ResolvedRunSpec> = run_dir
        .map(|d| d.join(RESOLVED_FILE))
        .filter(|p| p.is_file())
        .map(|p| read_json(&p))
        .transpose()?;
    let run_cfg: Option<TrainConfig> = resolved.and_then(|r| serde_json::from_value(r.config).ok());
    let variant = match (&run_cfg, ckpt.stage) {
        (_, Stage::Sft) => Variant::SftOnly,
        (Some(c), Stage::Dpo) => c.variant,
        (None, Stage::Dpo) => Variant::Dpo,
    };
    let seed = ctx.seed.or(run_cfg.map(|c| c.seed)).unwrap_or(DEFAULT_SEED);
    let eval = data.split(a.split);
    let report = MetricsReport::new(variant.as_str(), seed, &eval, &data.table, &ckpt.policy()?)?;
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    ctx.log.info(
        "eval",
        json!({ "split": a.split.to_string(), "auc": report.auc, "hr@3": report.hr_at_k, "ndcg@3": report.ndcg_at_k, "n_eval": report.n_eval }),
    );
    Ok(())
}

fn seed_list(ctx: &Ctx, cfg: &TrainConfig, n: u64) -> CliResult<Vec<u64>> {
    if n == 0 {
        return Err(bad("--seeds must be positive"));
    }
    let base = ctx.seed.unwrap_or(cfg.seed);
    Ok((0..n).map(|i| base + i).collect())
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> CliResult<()> {
    let out = ctx.out()?;
    let cfg = train_config(ctx, &a.train, Stage::Dpo, None)?;
    let data = load_data(&a.data, None)?;
    let seeds = seed_list(ctx, &cfg, a.seeds)?;
    let report = ablation_suite(&cfg, &data, &seeds)?;
    create_dir(out)?;
    write_resolved(out, RESOLVED_FILE, "ablate", &cfg, &[("data", &a.data)], cfg.seed)?;
    write_json(&out.join("ablation.json"), &report)?;
    print!("{}", report.render());
    ctx.log.info("ablate", json!({ "out": out, "seeds": seeds, "hard_pair_margin": report.hard_pair_margin }));
    Ok(())
}

fn sweep_cmd(ctx: &Ctx, a: &SweepArgs) -> CliResult<()> {
    let out = ctx.out()?;
    let cfg = train_config(ctx, &a.train, Stage::Dpo, None)?;
    let data = load_data(&a.data, None)?;
    let mut grid = SweepGrid::default();
    if let Some(v) = &a.topk_values {
        grid.topk = v.clone();
    }
    if let Some(v) = &a.noise_sigma_values {
        grid.noise_sigma = v.clone();
    }
    if let Some(v) = &a.beta0_values {
        grid.beta0 = v.clone();
    }
    grid.seeds = seed_list(ctx, &cfg, a.seeds.unwrap_or(1))?;
    let rows = sweep(&cfg, &data, &grid)?;
    create_dir(out)?;
    write_resolved(out, RESOLVED_FILE, "sweep", &json!({ "train": cfg, "grid": grid }), &[("data", &a.data)], cfg.seed)?;
    write_json(&out.join("sweep.json"), &rows)?;
    println!("{:>5} {:>11} {:>6} {:>6} {:>8} {:>8} {:>8}", "topk", "noise_sigma", "beta0", "seed", "auc", "hr@3", "ndcg@3");
    for r in &rows {
        println!(
            "{:>5} {:>11} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}",
            r.topk, r.noise_sigma, r.beta0, r.seed, r.auc, r.hr_at_k, r.ndcg_at_k
        );
    }
    ctx.log.info("sweep", json!({ "out": out, "rows": rows.len() }));
    Ok(())
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> CliResult<()> {
    let seed = ctx.seed_or(None);
    let report = hanorec_core::experiment::gradcheck(a.trials, seed)?;
    if let Some(out) = ctx.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    println!(
        "max relative error {:.3e} over {} checks ({} trials); worst: {} in trial {}; tolerance {:.0e}: {}",
        report.max_rel_err,
        report.checks,
        report.trials,
        report.worst_loss,
        report.worst_trial,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:e} exceeds {:e}",
            report.max_rel_err, report.tolerance
        )))
    }
}
