//! `report.json` and `curve.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, modality_trend, DEFAULT_K};
use crate::corpus::{ItemMeta, SftSample};
use crate::embed_store::EmbeddingTable;
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::policy::AdapterState;
use crate::trainer::Stage;

/// Metrics and modality trend after one epoch (epoch 0 is the initial state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub auc: f64,
    pub hr: f64,
    pub ndcg: f64,
    pub mean_projected_modality_sim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ambiguous_projected_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normal_projected_sim: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn epoch_record(
    stage: Stage,
    epoch: usize,
    loss: Option<f64>,
    samples: &[SftSample],
    table: &EmbeddingTable,
    policy: &AdapterState,
    items: Option<&[ItemMeta]>,
) -> Result<EpochRecord> {
    let m = evaluate(samples, table, policy, DEFAULT_K)?;
    let trend = modality_trend(table, policy, items)?;
    Ok(EpochRecord {
        stage,
        epoch,
        loss,
        auc: m.auc,
        hr: m.hr,
        ndcg: m.ndcg,
        mean_projected_modality_sim: trend.mean_projected_modality_sim,
        ambiguous_projected_sim: trend.ambiguous,
        normal_projected_sim: trend.normal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    #[serde(rename = "hr@3")]
    pub hr_at_k: f64,
    #[serde(rename = "ndcg@3")]
    pub ndcg_at_k: f64,
    pub k: usize,
    pub n_eval: usize,
    /// Mean reward gap over hard-labeled training pairs, when labels exist.
    #[serde(default)]
    pub hard_pair_margin: Option<f64>,
    pub per_epoch: Vec<EpochRecord>,
}

impl MetricsReport {
    pub fn new(variant: &str, seed: u64, samples: &[SftSample], table: &EmbeddingTable, policy: &AdapterState) -> Result<Self> {
        let m = evaluate(samples, table, policy, DEFAULT_K)?;
        Ok(Self {
            variant: variant.to_string(),
            seed,
            auc: m.auc,
            hr_at_k: m.hr,
            ndcg_at_k: m.ndcg,
            k: m.k,
            n_eval: m.n_eval,
            hard_pair_margin: None,
            per_epoch: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        let ok = in_unit(self.auc)
            && in_unit(self.hr_at_k)
            && in_unit(self.ndcg_at_k)
            && self.ndcg_at_k <= self.hr_at_k
            && self.per_epoch.iter().all(|e| in_unit(e.auc) && in_unit(e.hr) && in_unit(e.ndcg) && e.ndcg <= e.hr);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("metrics outside [0, 1] or NDCG above HR".into()))
        }
    }
}

/// Writes `report.json` and `curve.json` into a completed run directory.
pub fn emit_report(run_dir: &Path, report: &MetricsReport) -> Result<()> {
    let ckpt = run_dir.join("checkpoints").join("checkpoint.json");
    if !ckpt.is_file() {
        return Err(Error::MissingRunArtifacts(ckpt));
    }
    report.validate()?;
    write_json(&run_dir.join("report.json"), report)?;
    write_json(&run_dir.join("curve.json"), &report.per_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_sft_samples, synth_generate, SynthConfig};
    use crate::rng::SeedStream;
    use crate::trainer::{init_sft_state, TrainConfig};

    fn small() -> (crate::corpus::SynthCorpus, Vec<SftSample>) {
        let cfg = SynthConfig {
            items: 120,
            users: 150,
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&cfg, &SeedStream::new(3, "synth")).unwrap();
        let samples = build_sft_samples(&corpus.sequences, &corpus.catalog(), &SeedStream::new(3, "sft")).unwrap();
        (corpus, samples)
    }

    #[test]
    fn epoch_zero_trend_is_the_raw_similarity() {
        let (corpus, samples) = small();
        let state = init_sft_state(&TrainConfig::default(), corpus.table.dim()).unwrap();
        let rec = epoch_record(Stage::Sft, 0, None, &samples, &corpus.table, &state.policy, Some(&corpus.items)).unwrap();
        let trend = modality_trend(&corpus.table, &state.policy, Some(&corpus.items)).unwrap();
        assert!((trend.mean_projected_modality_sim - trend.mean_raw_modality_sim).abs() < 1e-12);
        assert_eq!(rec.mean_projected_modality_sim, trend.mean_projected_modality_sim);
        assert!(rec.ambiguous_projected_sim.unwrap() < rec.normal_projected_sim.unwrap());
    }

    #[test]
    fn report_json_round_trips_and_needs_a_checkpoint() {
        let (corpus, samples) = small();
        let state = init_sft_state(&TrainConfig::default(), corpus.table.dim()).unwrap();
        let mut report = MetricsReport::new("sft_only", 7, &samples, &corpus.table, &state.policy).unwrap();
        report
            .per_epoch
            .push(epoch_record(Stage::Sft, 0, None, &samples, &corpus.table, &state.policy, Some(&corpus.items)).unwrap());
        report.validate().unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
        for key in ["\"variant\"", "\"seed\"", "\"auc\"", "\"hr@3\"", "\"ndcg@3\"", "\"n_eval\"", "\"per_epoch\""] {
            assert!(json.contains(key), "{key}");
        }

        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(dir.path(), &report), Err(Error::MissingRunArtifacts(_))));
        std::fs::create_dir(dir.path().join("checkpoints")).unwrap();
        std::fs::write(dir.path().join("checkpoints/checkpoint.json"), "{}").unwrap();
        emit_report(dir.path(), &report).unwrap();
        let on_disk: MetricsReport = crate::io::read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(on_disk, report);
        assert!(dir.path().join("curve.json").is_file());
    }
}
