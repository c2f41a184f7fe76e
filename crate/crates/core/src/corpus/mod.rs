//! Interaction data: ingestion, filtering, splitting and sample construction.

mod prompt;
mod synth;

pub use prompt::{render_prompt, BINARY_QUESTION, RANKING_INSTRUCTION};
pub use synth::{label_pairs, synth_generate, ItemMeta, SynthConfig, SynthCorpus, UserTruth};

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Interactions kept per sample: five history items plus the target.
pub const WINDOW: usize = 6;
pub const DEFAULT_MIN_SEQ_LEN: usize = 6;
/// Sampled negatives per ranking candidate set.
pub const NEGATIVES: usize = 9;
pub const CANDIDATES: usize = NEGATIVES + 1;

/// One line of `interactions.jsonl`; items are oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user: String,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Binary,
    Ranking,
}

/// A supervised sample. Ranking samples carry the target plus nine unobserved
/// negatives; binary samples carry `[target, negative]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub user: String,
    pub history: Vec<String>,
    pub candidates: Vec<String>,
    pub target: String,
    pub mode: SampleMode,
}

impl SftSample {
    /// The sampled negative of a binary sample.
    pub fn binary_negative(&self) -> Option<&str> {
        match self.mode {
            SampleMode::Binary => self.candidates.get(1).map(String::as_str),
            SampleMode::Ranking => None,
        }
    }
}

/// One line of `pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub user: String,
    pub history: Vec<String>,
    pub candidates: Vec<String>,
    pub chosen: String,
    pub rejected: String,
    #[serde(rename = "lambda")]
    pub hardness: Option<f64>,
    pub hard_label: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSample {
    pub split: Split,
    #[serde(flatten)]
    pub sample: SftSample,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitManifest {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train.iter().any(|x| x == id) {
            Some(Split::Train)
        } else if self.validation.iter().any(|x| x == id) {
            Some(Split::Validation)
        } else if self.test.iter().any(|x| x == id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub read: usize,
    pub kept: usize,
    pub dropped_short: usize,
    pub collapsed_repeats: usize,
}

/// Collapses consecutive repeats and drops sequences shorter than `min_len`.
pub fn clean_sequences(
    raw: impl IntoIterator<Item = InteractionSequence>,
    min_len: usize,
) -> (Vec<InteractionSequence>, IngestStats) {
    let mut stats = IngestStats::default();
    let mut kept = Vec::new();
    for mut seq in raw {
        stats.read += 1;
        let before = seq.items.len();
        seq.items.dedup();
        stats.collapsed_repeats += before - seq.items.len();
        if seq.items.len() < min_len {
            stats.dropped_short += 1;
        } else {
            kept.push(seq);
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

pub fn load_interactions(path: &Path, min_len: usize) -> Result<(Vec<InteractionSequence>, IngestStats)> {
    let raw: Vec<InteractionSequence> = crate::io::read_jsonl(path)?;
    Ok(clean_sequences(raw, min_len))
}

/// The most recent six interactions as `(history, target)`.
pub fn truncate_history(seq: &InteractionSequence) -> Result<(Vec<String>, String)> {
    let n = seq.items.len();
    if n < WINDOW {
        return Err(Error::SequenceTooShort { len: n, min: WINDOW });
    }
    let window = &seq.items[n - WINDOW..];
    Ok((window[..WINDOW - 1].to_vec(), window[WINDOW - 1].clone()))
}

fn unobserved<'a>(seq: &InteractionSequence, catalog: &'a [String]) -> Vec<&'a String> {
    let seen: HashSet<&str> = seq.items.iter().map(String::as_str).collect();
    catalog.iter().filter(|c| !seen.contains(c.as_str())).collect()
}

/// Builds one ranking and one binary sample per sequence (ranking first).
///
/// Negatives are drawn uniformly without replacement from the catalog items
/// the user never interacted with. Sequence `i` uses substream `i`.
pub fn build_sft_samples(
    seqs: &[InteractionSequence],
    catalog: &[String],
    stream: &SeedStream,
) -> Result<Vec<SftSample>> {
    if catalog.len() < CANDIDATES + 1 {
        return Err(Error::Invalid(format!(
            "catalog has {} items, at least {} required",
            catalog.len(),
            CANDIDATES + 1
        )));
    }
    let catalog_set: HashSet<&str> = catalog.iter().map(String::as_str).collect();
    let per_seq: Vec<Result<[SftSample; 2]>> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            if let Some(bad) = seq.items.iter().find(|it| !catalog_set.contains(it.as_str())) {
                return Err(Error::UnknownItem(bad.clone()));
            }
            let (history, target) = truncate_history(seq)?;
            let pool = unobserved(seq, catalog);
            if pool.len() < NEGATIVES {
                return Err(Error::CatalogExhausted {
                    user: seq.user.clone(),
                    available: pool.len(),
                    needed: NEGATIVES,
                });
            }
            let mut rng = stream.substream(i as u64).rng();
            let mut candidates: Vec<String> = index::sample(&mut rng, pool.len(), NEGATIVES)
                .into_iter()
                .map(|j| pool[j].clone())
                .collect();
            candidates.push(target.clone());
            candidates.shuffle(&mut rng);
            let negative = pool[rng.random_range(0..pool.len())].clone();
            Ok([
                SftSample {
                    user: seq.user.clone(),
                    history: history.clone(),
                    candidates,
                    target: target.clone(),
                    mode: SampleMode::Ranking,
                },
                SftSample {
                    user: seq.user.clone(),
                    history,
                    candidates: vec![target.clone(), negative],
                    target,
                    mode: SampleMode::Binary,
                },
            ])
        })
        .collect();
    let mut out = Vec::with_capacity(seqs.len() * 2);
    for r in per_seq {
        out.extend(r?);
    }
    Ok(out)
}

/// Emits `negatives_per_target` preference pairs per ranking sample, each
/// rejecting a distinct non-target candidate.
pub fn build_dpo_pairs(
    samples: &[SftSample],
    negatives_per_target: usize,
    stream: &SeedStream,
) -> Result<Vec<PreferenceSample>> {
    if !(1..=NEGATIVES).contains(&negatives_per_target) {
        return Err(Error::Invalid(format!(
            "negatives per target must be in [1, {NEGATIVES}], got {negatives_per_target}"
        )));
    }
    let ranking: Vec<&SftSample> = samples.iter().filter(|s| s.mode == SampleMode::Ranking).collect();
    let per_sample: Vec<Result<Vec<PreferenceSample>>> = ranking
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            if !s.candidates.contains(&s.target) {
                return Err(Error::TargetNotInCandidates(s.target.clone()));
            }
            let others: Vec<&String> = s.candidates.iter().filter(|c| **c != s.target).collect();
            if others.len() < negatives_per_target {
                return Err(Error::Invalid(format!(
                    "sample for user {} has only {} non-target candidates",
                    s.user,
                    others.len()
                )));
            }
            let mut rng = stream.substream(i as u64).rng();
            Ok(index::sample(&mut rng, others.len(), negatives_per_target)
                .into_iter()
                .map(|j| PreferenceSample {
                    user: s.user.clone(),
                    history: s.history.clone(),
                    candidates: s.candidates.clone(),
                    chosen: s.target.clone(),
                    rejected: others[j].clone(),
                    hardness: None,
                    hard_label: None,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per_sample {
        out.extend(r?);
    }
    Ok(out)
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::BadRatios(format!("ratios must be positive, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(format!("ratios sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Shuffles sequence ids and assigns floor-allocated validation/test blocks;
/// the remainder goes to train.
pub fn split_sequences(ids: &[String], ratios: [f64; 3], stream: &SeedStream) -> Result<SplitManifest> {
    validate_ratios(ratios)?;
    let n = ids.len();
    let alloc = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_val = alloc(ratios[1]);
    let n_test = alloc(ratios[2]);
    let mut order: Vec<&String> = ids.iter().collect();
    order.shuffle(&mut stream.rng());
    let n_train = n - n_val - n_test;
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|s| (*s).clone()).collect::<Vec<_>>();
    Ok(SplitManifest {
        train: take(0..n_train),
        validation: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
        ratios,
        seed: stream.seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: &str, items: &[&str]) -> InteractionSequence {
        InteractionSequence {
            user: user.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn catalog(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i:03}")).collect()
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn truncate_exactly_six() {
        let (h, t) = truncate_history(&seq("u", &["a", "b", "c", "d", "e", "f"])).unwrap();
        assert_eq!(h, strs(&["a", "b", "c", "d", "e"]));
        assert_eq!(t, "f");
    }

    #[test]
    fn truncate_keeps_most_recent_six() {
        let (h, t) = truncate_history(&seq("u", &["a", "b", "c", "d", "e", "f", "g", "h"])).unwrap();
        assert_eq!(h, strs(&["c", "d", "e", "f", "g"]));
        assert_eq!(t, "h");
    }

    #[test]
    fn truncate_too_short() {
        let err = truncate_history(&seq("u", &["a", "b", "c", "d", "e"])).unwrap_err();
        assert!(matches!(err, Error::SequenceTooShort { len: 5, min: 6 }));
    }

    #[test]
    fn cleaning_collapses_repeats_then_filters() {
        let raw = vec![
            seq("a", &["x", "x", "y", "z", "w", "v", "u"]),
            seq("b", &["x", "y", "y", "z", "w", "v"]),
            seq("c", &["1", "2", "3", "4", "5", "6"]),
        ];
        let (kept, stats) = clean_sequences(raw, 6);
        assert_eq!(kept.iter().map(|s| s.user.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(kept[0].items.len(), 6);
        assert_eq!(stats, IngestStats { read: 3, kept: 2, dropped_short: 1, collapsed_repeats: 2 });
    }

    #[test]
    fn catalog_exhausted_when_too_few_unobserved() {
        let cat = catalog(11);
        let s = seq("u", &["c000", "c001", "c002", "c003", "c004", "c005"]);
        let err = build_sft_samples(&[s], &cat, &SeedStream::new(1, "sft")).unwrap_err();
        assert!(matches!(err, Error::CatalogExhausted { available: 5, needed: 9, .. }));
    }

    #[test]
    fn negatives_drawn_from_unobserved_items() {
        // 16-item catalog, six observed: the nine negatives must come from the
        // ten unobserved items. Enumerate the unobserved set and check each draw.
        let cat = catalog(16);
        let s = seq("u", &["c000", "c001", "c002", "c003", "c004", "c005"]);
        let unseen: HashSet<String> = cat[6..].iter().cloned().collect();
        let mut union = HashSet::new();
        for seed in 0..50 {
            let out = build_sft_samples(std::slice::from_ref(&s), &cat, &SeedStream::new(seed, "sft")).unwrap();
            let ranking = &out[0];
            assert_eq!(ranking.mode, SampleMode::Ranking);
            assert_eq!(ranking.candidates.len(), CANDIDATES);
            let negs: Vec<_> = ranking.candidates.iter().filter(|c| **c != ranking.target).collect();
            assert_eq!(negs.len(), NEGATIVES);
            assert_eq!(negs.iter().collect::<HashSet<_>>().len(), NEGATIVES);
            assert!(negs.iter().all(|c| unseen.contains(*c)));
            union.extend(negs.into_iter().cloned());
            assert!(unseen.contains(out[1].binary_negative().unwrap()));
        }
        assert_eq!(union, unseen);
    }

    #[test]
    fn eleven_item_catalog_forces_negatives() {
        // Two distinct observed items leave exactly nine unobserved.
        let cat = catalog(11);
        let s = seq("u", &["c000", "c001", "c000", "c001", "c000", "c001"]);
        let out = build_sft_samples(&[s], &cat, &SeedStream::new(3, "sft")).unwrap();
        let mut negs: Vec<String> = out[0].candidates.iter().filter(|c| **c != "c001").cloned().collect();
        negs.sort();
        assert_eq!(negs, cat[2..].to_vec());
    }

    #[test]
    fn sft_samples_are_deterministic() {
        let cat = catalog(40);
        let seqs: Vec<_> = (0..20)
            .map(|u| {
                let items: Vec<String> = (0..7).map(|k| format!("c{:03}", (u * 3 + k) % 40)).collect();
                InteractionSequence { user: format!("u{u}"), items }
            })
            .collect();
        let a = build_sft_samples(&seqs, &cat, &SeedStream::new(9, "sft")).unwrap();
        let b = build_sft_samples(&seqs, &cat, &SeedStream::new(9, "sft")).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = build_sft_samples(&seqs, &cat, &SeedStream::new(10, "sft")).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_catalog_item() {
        let cat = catalog(20);
        let s = seq("u", &["c000", "c001", "c002", "c003", "c004", "zzz"]);
        assert!(matches!(
            build_sft_samples(&[s], &cat, &SeedStream::new(1, "sft")),
            Err(Error::UnknownItem(_))
        ));
    }

    fn ranking_samples(n: usize) -> Vec<SftSample> {
        let cat = catalog(60);
        let seqs: Vec<_> = (0..n)
            .map(|u| InteractionSequence {
                user: format!("u{u}"),
                items: (0..6).map(|k| format!("c{:03}", (u * 5 + k) % 60)).collect(),
            })
            .collect();
        build_sft_samples(&seqs, &cat, &SeedStream::new(4, "sft")).unwrap()
    }

    #[test]
    fn one_pair_per_sample() {
        let samples = ranking_samples(10);
        let pairs = build_dpo_pairs(&samples, 1, &SeedStream::new(1, "dpo")).unwrap();
        assert_eq!(pairs.len(), 10);
        for p in &pairs {
            assert_ne!(p.chosen, p.rejected);
            assert!(p.candidates.contains(&p.rejected));
            assert!(p.hardness.is_none());
        }
    }

    #[test]
    fn nine_pairs_cover_all_negatives() {
        let samples = ranking_samples(6);
        let pairs = build_dpo_pairs(&samples, 9, &SeedStream::new(1, "dpo")).unwrap();
        assert_eq!(pairs.len(), 54);
        for chunk in pairs.chunks(9) {
            let mut rejected: Vec<_> = chunk.iter().map(|p| p.rejected.clone()).collect();
            rejected.sort();
            let mut expect: Vec<_> = chunk[0].candidates.iter().filter(|c| **c != chunk[0].chosen).cloned().collect();
            expect.sort();
            assert_eq!(rejected, expect);
        }
    }

    #[test]
    fn rejected_never_duplicated_within_sample() {
        let samples = ranking_samples(30);
        for n in 1..=9 {
            let pairs = build_dpo_pairs(&samples, n, &SeedStream::new(n as u64, "dpo")).unwrap();
            for chunk in pairs.chunks(n) {
                let set: HashSet<_> = chunk.iter().map(|p| &p.rejected).collect();
                assert_eq!(set.len(), n);
                assert!(chunk.iter().all(|p| p.user == chunk[0].user));
            }
        }
    }

    #[test]
    fn pair_count_bounds() {
        let samples = ranking_samples(2);
        assert!(build_dpo_pairs(&samples, 0, &SeedStream::new(1, "dpo")).is_err());
        assert!(build_dpo_pairs(&samples, 10, &SeedStream::new(1, "dpo")).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn split_sizes_eight_one_one() {
        let m = split_sequences(&ids(10), [0.8, 0.1, 0.1], &SeedStream::new(1, "split")).unwrap();
        assert_eq!((m.train.len(), m.validation.len(), m.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_small_n_goes_to_train() {
        let m = split_sequences(&ids(3), [0.8, 0.1, 0.1], &SeedStream::new(1, "split")).unwrap();
        assert_eq!((m.train.len(), m.validation.len(), m.test.len()), (3, 0, 0));
    }

    #[test]
    fn split_bad_ratios() {
        let s = SeedStream::new(1, "split");
        assert!(matches!(split_sequences(&ids(3), [0.5, 0.5, 0.5], &s), Err(Error::BadRatios(_))));
        assert!(matches!(split_sequences(&ids(3), [1.0, 0.0, 0.0], &s), Err(Error::BadRatios(_))));
    }

    #[test]
    fn split_partitions_ids() {
        for n in [0, 1, 7, 10, 101, 999] {
            let all = ids(n);
            let m = split_sequences(&all, [0.7, 0.2, 0.1], &SeedStream::new(n as u64, "split")).unwrap();
            let mut union: Vec<String> = m.train.iter().chain(&m.validation).chain(&m.test).cloned().collect();
            assert_eq!(union.len(), n);
            union.sort();
            let mut sorted = all.clone();
            sorted.sort();
            assert_eq!(union, sorted);
            for id in &all {
                assert!(m.split_of(id).is_some());
            }
        }
    }

    #[test]
    fn pairs_json_schema() {
        let p = PreferenceSample {
            user: "u".into(),
            history: strs(&["a"]),
            candidates: strs(&["b", "c"]),
            chosen: "b".into(),
            rejected: "c".into(),
            hardness: None,
            hard_label: Some(true),
        };
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert!(v["lambda"].is_null());
        assert_eq!(v["hard_label"], serde_json::json!(true));
        let back: PreferenceSample = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
