//! The five-variant ablation with per-variant medians.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::median;
use super::report::MetricsReport;
use crate::corpus::Split;
use crate::error::Result;
use crate::experiment::{ignore_epochs, run_sft, run_variant, Dataset};
use crate::trainer::{TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMedians {
    pub variant: String,
    pub auc: f64,
    #[serde(rename = "hr@3")]
    pub hr_at_k: f64,
    #[serde(rename = "ndcg@3")]
    pub ndcg_at_k: f64,
    pub hard_pair_margin: Option<f64>,
}

/// Median end-of-training reward gap on hard-labeled pairs, `hanorec`
/// against `dpo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginComparison {
    pub hanorec: Option<f64>,
    pub dpo: Option<f64>,
    pub hanorec_exceeds_dpo: Option<bool>,
}

/// Compact metrics row for one (variant, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    #[serde(rename = "hr@3")]
    pub hr_at_k: f64,
    #[serde(rename = "ndcg@3")]
    pub ndcg_at_k: f64,
    pub hard_pair_margin: Option<f64>,
}

impl From<&MetricsReport> for AblationRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            variant: r.variant.clone(),
            seed: r.seed,
            auc: r.auc,
            hr_at_k: r.hr_at_k,
            ndcg_at_k: r.ndcg_at_k,
            hard_pair_margin: r.hard_pair_margin,
        }
    }
}

/// Contents of `ablation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricsReport>,
    pub medians: Vec<VariantMedians>,
    pub hard_pair_margin: MarginComparison,
}

impl AblationReport {
    pub fn rows(&self) -> Vec<AblationRow> {
        self.reports.iter().map(AblationRow::from).collect()
    }

    /// Plain-text table of the rows and medians.
    pub fn render(&self) -> String {
        let fmt_opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:+.6}"));
        let mut out = format!(
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>12}\n",
            "variant", "seed", "auc", "hr@3", "ndcg@3", "hard_margin"
        );
        for r in self.rows() {
            out.push_str(&format!(
                "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>12}\n",
                r.variant,
                r.seed,
                r.auc,
                r.hr_at_k,
                r.ndcg_at_k,
                fmt_opt(r.hard_pair_margin)
            ));
        }
        for m in &self.medians {
            out.push_str(&format!(
                "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>12}\n",
                m.variant,
                "median",
                m.auc,
                m.hr_at_k,
                m.ndcg_at_k,
                fmt_opt(m.hard_pair_margin)
            ));
        }
        let c = &self.hard_pair_margin;
        out.push_str(&format!(
            "median hard-pair margin: hanorec {} vs dpo {} -> hanorec higher: {}\n",
            fmt_opt(c.hanorec),
            fmt_opt(c.dpo),
            c.hanorec_exceeds_dpo.map_or("n/a".to_string(), |b| b.to_string())
        ));
        out
    }
}

pub fn medians_of(reports: &[MetricsReport]) -> Vec<VariantMedians> {
    Variant::ABLATION
        .iter()
        .filter_map(|v| {
            let rows: Vec<&MetricsReport> = reports.iter().filter(|r| r.variant == v.as_str()).collect();
            if rows.is_empty() {
                return None;
            }
            let col = |f: fn(&MetricsReport) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            let margins: Vec<f64> = rows.iter().filter_map(|r| r.hard_pair_margin).collect();
            Some(VariantMedians {
                variant: v.as_str().to_string(),
                auc: col(|r| r.auc),
                hr_at_k: col(|r| r.hr_at_k),
                ndcg_at_k: col(|r| r.ndcg_at_k),
                hard_pair_margin: median(&margins),
            })
        })
        .collect()
}

pub fn compare_margins(medians: &[VariantMedians]) -> MarginComparison {
    let of = |v: Variant| medians.iter().find(|m| m.variant == v.as_str()).and_then(|m| m.hard_pair_margin);
    let (hanorec, dpo) = (of(Variant::Hanorec), of(Variant::Dpo));
    MarginComparison {
        hanorec,
        dpo,
        hanorec_exceeds_dpo: hanorec.zip(dpo).map(|(h, d)| h > d),
    }
}

/// Runs every ablation variant for each seed. The supervised stage is run
/// once per seed and shared by that seed's variants. Reports are ordered by
/// seed, then by variant in [`Variant::ABLATION`] order.
pub fn ablation_suite(base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<AblationReport> {
    let eval = data.split(Split::Test);
    let sft = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            Ok(run_sft(&cfg, data, &eval, None, &mut ignore_epochs)?.outcome.state.policy)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, Variant)> = (0..seeds.len())
        .flat_map(|s| Variant::ABLATION.into_iter().map(move |v| (s, v)))
        .collect();
    let reports = cells
        .par_iter()
        .map(|&(s, variant)| {
            let cfg = TrainConfig {
                seed: seeds[s],
                variant,
                ..base.clone()
            };
            run_variant(&cfg, data, &sft[s], &eval)
        })
        .collect::<Result<Vec<_>>>()?;
    let medians = medians_of(&reports);
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        hard_pair_margin: compare_margins(&medians),
        reports,
        medians,
    })
}
