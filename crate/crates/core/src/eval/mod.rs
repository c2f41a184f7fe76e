//! Ranking metrics, AUC, the modality-similarity trend and the hard-pair
//! reward margin.

pub mod ablation;
pub mod report;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemMeta, SampleMode, SftSample};
use crate::embed_store::EmbeddingTable;
use crate::error::{Error, Result};
use crate::objective::{reward_gaps, EncodedPair};
use crate::policy::{modality_similarity_report, raw_score, score_candidates, sequence_repr, AdapterState};

pub use ablation::{ablation_suite, AblationReport, AblationRow, MarginComparison, VariantMedians};
pub use report::{emit_report, EpochRecord, MetricsReport};

pub const DEFAULT_K: usize = 3;

/// 1-based rank of `target` after sorting by logit descending, ties broken by
/// ascending item id.
pub fn rank_of(candidates: &[String], logits: &[f64], target: &str) -> Result<usize> {
    let t = candidates
        .iter()
        .position(|c| c == target)
        .ok_or_else(|| Error::TargetNotInCandidates(target.to_string()))?;
    let ahead = candidates
        .iter()
        .zip(logits)
        .filter(|(c, z)| **z > logits[t] || (**z == logits[t] && c.as_str() < target))
        .count();
    Ok(ahead + 1)
}

/// `(hit, gain)` of a single target at `rank` with cutoff `k`.
pub fn hit_and_gain(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub hr: f64,
    pub ndcg: f64,
    pub k: usize,
    pub n: usize,
}

/// HR@K and NDCG@K over the ranking samples in `samples`.
pub fn rank_metrics(samples: &[SftSample], table: &EmbeddingTable, policy: &AdapterState, k: usize) -> Result<RankMetrics> {
    let ranks: Vec<usize> = samples
        .par_iter()
        .filter(|s| s.mode == SampleMode::Ranking)
        .map(|s| {
            let u = sequence_repr(&s.history, table)?;
            let scored = score_candidates(&u, &s.candidates, table, policy, None)?;
            rank_of(&s.candidates, &scored.logits, &s.target)
        })
        .collect::<Result<_>>()?;
    if ranks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for &r in &ranks {
        let (h, g) = hit_and_gain(r, k);
        hr += h;
        ndcg += g;
    }
    let n = ranks.len();
    Ok(RankMetrics {
        hr: hr / n as f64,
        ndcg: ndcg / n as f64,
        k,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub score: f64,
    pub label: bool,
}

/// Mann–Whitney AUC with ties counted as one half.
pub fn auc(instances: &[Scored]) -> Result<f64> {
    let pos = instances.iter().filter(|s| s.label).count();
    let neg = instances.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    if instances.iter().any(|s| s.score.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let mut sorted: Vec<&Scored> = instances.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|s| s.label).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One positive (the target) and one negative per binary sample, scored by
/// the raw bilinear score.
pub fn auc_instances(samples: &[SftSample], table: &EmbeddingTable, policy: &AdapterState) -> Result<Vec<Scored>> {
    let per: Vec<[Scored; 2]> = samples
        .par_iter()
        .filter(|s| s.mode == SampleMode::Binary)
        .map(|s| {
            let u = sequence_repr(&s.history, table)?;
            let neg = s
                .binary_negative()
                .ok_or_else(|| Error::Invalid(format!("binary sample for {} has no negative", s.user)))?;
            Ok([
                Scored {
                    score: raw_score(&u, table.index_of(&s.target)?, table, policy),
                    label: true,
                },
                Scored {
                    score: raw_score(&u, table.index_of(neg)?, table, policy),
                    label: false,
                },
            ])
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub hr: f64,
    pub ndcg: f64,
    pub k: usize,
    pub n_eval: usize,
}

pub fn evaluate(samples: &[SftSample], table: &EmbeddingTable, policy: &AdapterState, k: usize) -> Result<Metrics> {
    let rm = rank_metrics(samples, table, policy, k)?;
    let a = auc(&auc_instances(samples, table, policy)?)?;
    Ok(Metrics {
        auc: a,
        hr: rm.hr,
        ndcg: rm.ndcg,
        k,
        n_eval: rm.n,
    })
}

/// Mean projected text/image cosine, overall and per item group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityTrend {
    pub mean_projected_modality_sim: f64,
    pub mean_raw_modality_sim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ambiguous: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normal: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn modality_trend(table: &EmbeddingTable, policy: &AdapterState, items: Option<&[ItemMeta]>) -> Result<ModalityTrend> {
    let records = modality_similarity_report(table, policy)?;
    let ambiguous: Option<HashMap<&str, bool>> =
        items.map(|m| m.iter().map(|i| (i.item.as_str(), i.ambiguous)).collect());
    let group = |flag: bool| {
        let amb = ambiguous.as_ref()?;
        mean_of(
            records
                .iter()
                .filter(|r| amb.get(r.item.as_str()) == Some(&flag))
                .map(|r| r.projected_sim),
        )
    };
    Ok(ModalityTrend {
        mean_projected_modality_sim: mean_of(records.iter().map(|r| r.projected_sim)).unwrap_or(0.0),
        mean_raw_modality_sim: mean_of(records.iter().map(|r| r.raw_sim)).unwrap_or(0.0),
        ambiguous: group(true),
        normal: group(false),
    })
}

/// Mean implicit reward gap `R_i` (temperature `beta0`) over hard-labeled
/// pairs, or `None` when no pair is labeled hard.
pub fn hard_pair_margin(
    pairs: &[EncodedPair],
    table: &EmbeddingTable,
    policy: &AdapterState,
    beta0: f64,
) -> Result<Option<f64>> {
    let hard: Vec<EncodedPair> = pairs.iter().filter(|p| p.hard_label == Some(true)).cloned().collect();
    if hard.is_empty() {
        return Ok(None);
    }
    let gaps = reward_gaps(&hard, table, policy, beta0)?;
    Ok(mean_of(gaps.into_iter()))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn ideal_second_and_missed_ranks() {
        let c = ids(10);
        let mut z = vec![0.0; 10];
        z[4] = 5.0;
        assert_eq!(rank_of(&c, &z, "c4").unwrap(), 1);
        assert_eq!(hit_and_gain(1, 3), (1.0, 1.0));
        z[7] = 6.0;
        assert_eq!(rank_of(&c, &z, "c4").unwrap(), 2);
        let (h, g) = hit_and_gain(2, 3);
        assert_eq!(h, 1.0);
        // 1 / log2(3) = 0.630929753571457437...
        assert!((g - 0.630_929_753_571_457_4).abs() < 1e-15);
        assert_eq!(hit_and_gain(4, 3), (0.0, 0.0));
        assert!(matches!(rank_of(&c, &z, "zz"), Err(Error::TargetNotInCandidates(_))));
    }

    #[test]
    fn ties_rank_by_ascending_id() {
        let c: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
        let z = [1.0, 1.0, 1.0];
        assert_eq!(rank_of(&c, &z, "a").unwrap(), 1);
        assert_eq!(rank_of(&c, &z, "b").unwrap(), 2);
        assert_eq!(rank_of(&c, &z, "c").unwrap(), 3);
    }

    fn sc(score: f64, label: bool) -> Scored {
        Scored { score, label }
    }

    #[test]
    fn auc_worked_examples() {
        let worked = [sc(0.9, true), sc(0.4, true), sc(0.5, false), sc(0.1, false)];
        assert_eq!(auc(&worked).unwrap(), 0.75);
        let separated = [sc(3.0, true), sc(2.0, true), sc(1.0, false), sc(-1.0, false)];
        assert_eq!(auc(&separated).unwrap(), 1.0);
        let flat = [sc(0.2, true), sc(0.2, false), sc(0.2, true), sc(0.2, false), sc(0.2, false)];
        assert_eq!(auc(&flat).unwrap(), 0.5);
        assert!(matches!(auc(&[sc(1.0, true)]), Err(Error::DegenerateLabels)));
        assert!(matches!(auc(&[]), Err(Error::DegenerateLabels)));
    }

    fn pairwise_auc(xs: &[Scored]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for p in xs.iter().filter(|s| s.label) {
            for n in xs.iter().filter(|s| !s.label) {
                den += 1.0;
                num += if p.score > n.score {
                    1.0
                } else if p.score == n.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn random_hr_at_3_is_three_tenths() {
        let mut rng = SeedStream::new(5, "random-hr").rng();
        let c = ids(10);
        let trials = 10_000;
        let hits: Vec<f64> = (0..trials)
            .map(|_| {
                let z: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
                let t = rng.random_range(0..10);
                hit_and_gain(rank_of(&c, &z, &c[t]).unwrap(), 3).0
            })
            .collect();
        let mean = hits.iter().sum::<f64>() / trials as f64;
        let se = (0.3f64 * 0.7 / trials as f64).sqrt();
        assert!((mean - 0.3).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(raw in prop::collection::vec((0i32..20, any::<bool>()), 2..60)) {
            let xs: Vec<Scored> = raw.iter().map(|(s, l)| sc(f64::from(*s) / 4.0, *l)).collect();
            prop_assume!(xs.iter().any(|s| s.label) && xs.iter().any(|s| !s.label));
            prop_assert!((auc(&xs).unwrap() - pairwise_auc(&xs)).abs() < 1e-12);
        }

        #[test]
        fn auc_is_invariant_to_increasing_maps(raw in prop::collection::vec((-50i32..50, any::<bool>()), 2..60)) {
            let xs: Vec<Scored> = raw.iter().map(|(s, l)| sc(f64::from(*s) / 10.0, *l)).collect();
            prop_assume!(xs.iter().any(|s| s.label) && xs.iter().any(|s| !s.label));
            let ys: Vec<Scored> = xs.iter().map(|s| sc(s.score.exp() * 3.0 + 1.0, s.label)).collect();
            prop_assert_eq!(auc(&xs).unwrap(), auc(&ys).unwrap());
        }

        #[test]
        fn rank_is_shift_invariant(z in prop::collection::vec(-8i32..8, 10), t in 0usize..10, shift in -100i32..100) {
            let c = ids(10);
            let a: Vec<f64> = z.iter().map(|v| f64::from(*v) / 4.0).collect();
            let b: Vec<f64> = a.iter().map(|v| v + f64::from(shift) / 8.0).collect();
            prop_assert_eq!(rank_of(&c, &a, &c[t]).unwrap(), rank_of(&c, &b, &c[t]).unwrap());
        }

        #[test]
        fn ndcg_never_exceeds_hit(rank in 1usize..12, k in 1usize..11) {
            let (h, g) = hit_and_gain(rank, k);
            prop_assert!(g <= h && (0.0..=1.0).contains(&g));
        }
    }
}
