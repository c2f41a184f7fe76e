//! Synthetic corpus generator with known genre structure and injected
//! title/image mismatch.
//!
//! Items belong to genres whose latent clusters differ in tightness; each
//! item's text and image vectors are noisy views of its latent vector, and an
//! ambiguous fraction gets a much noisier image. Users prefer two adjacent
//! genres and consume items only from them.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{InteractionSequence, PreferenceSample};
use crate::embed_store::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub genres: usize,
    pub dim: usize,
    pub items: usize,
    pub users: usize,
    /// Fraction of items whose image vector is heavily perturbed.
    pub p_amb: f64,
    pub latent_noise: f64,
    /// Relative spread of per-genre latent noise: genre `g` uses
    /// `latent_noise * (1 + skew * (2g/(G-1) - 1))`.
    pub genre_spread_skew: f64,
    pub text_noise: f64,
    pub image_noise: f64,
    pub ambiguous_image_noise: f64,
    /// Lower bound on text/image cosine for non-ambiguous items.
    pub min_modality_similarity: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            genres: 8,
            dim: 32,
            items: 500,
            users: 2000,
            p_amb: 0.2,
            latent_noise: 0.3,
            genre_spread_skew: 0.5,
            text_noise: 0.1,
            image_noise: 0.1,
            ambiguous_image_noise: 0.8,
            min_modality_similarity: 0.9,
            seq_len_min: 6,
            seq_len_max: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSynthConfig(m));
        if self.genres < 2 {
            return bad(format!("need at least 2 genres, got {}", self.genres));
        }
        if self.dim < 4 {
            return bad(format!("need dimension >= 4, got {}", self.dim));
        }
        if self.items < 10 * self.genres {
            return bad(format!("need at least {} items for {} genres", 10 * self.genres, self.genres));
        }
        if self.users == 0 {
            return bad("need at least one user".into());
        }
        if !(0.0..=1.0).contains(&self.p_amb) {
            return bad(format!("p_amb must be in [0, 1], got {}", self.p_amb));
        }
        for (name, v) in [
            ("latent_noise", self.latent_noise),
            ("text_noise", self.text_noise),
            ("image_noise", self.image_noise),
            ("ambiguous_image_noise", self.ambiguous_image_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.genre_spread_skew) {
            return bad(format!("genre_spread_skew must be in [0, 1), got {}", self.genre_spread_skew));
        }
        if self.text_noise >= 1.0 || self.image_noise >= 1.0 {
            return bad("text and image noise must stay below the unit latent norm".into());
        }
        let worst = (self.text_noise.asin() + self.image_noise.asin()).cos();
        if self.min_modality_similarity > worst {
            return bad(format!(
                "min_modality_similarity {} is unreachable; noise levels guarantee only {worst:.4}",
                self.min_modality_similarity
            ));
        }
        let smallest_genre = self.items / self.genres;
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max || self.seq_len_max > 2 * smallest_genre {
            return bad(format!(
                "sequence lengths [{}, {}] must be non-empty and at most {}",
                self.seq_len_min,
                self.seq_len_max,
                2 * smallest_genre
            ));
        }
        Ok(())
    }

    fn genre_spread(&self, g: usize) -> f64 {
        let t = 2.0 * g as f64 / (self.genres - 1) as f64 - 1.0;
        self.latent_noise * (1.0 + self.genre_spread_skew * t)
    }
}

/// Metadata written to `items.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item: String,
    pub genre: usize,
    pub ambiguous: bool,
    pub title: String,
}

/// Ground truth written to `users.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user: String,
    pub genres: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub items: Vec<ItemMeta>,
    pub table: EmbeddingTable,
    pub sequences: Vec<InteractionSequence>,
    pub users: Vec<UserTruth>,
}

impl SynthCorpus {
    pub fn catalog(&self) -> Vec<String> {
        self.items.iter().map(|m| m.item.clone()).collect()
    }
}

fn gaussian(rng: &mut StreamRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// `base + radius * (uniform random direction)`.
fn perturb(rng: &mut StreamRng, base: &[f64], radius: f64) -> Vec<f64> {
    if radius == 0.0 {
        return base.to_vec();
    }
    let dir = unit(gaussian(rng, base.len(), 1.0));
    base.iter().zip(dir).map(|(b, e)| b + radius * e).collect()
}

const GENRE_NAMES: [&str; 8] = [
    "Drama", "Comedy", "Thriller", "Documentary", "Animation", "Romance", "Horror", "Adventure",
];

fn genre_name(g: usize) -> String {
    match GENRE_NAMES.get(g) {
        Some(name) => (*name).to_string(),
        None => format!("Genre{g}"),
    }
}

pub fn synth_generate(config: &SynthConfig, stream: &SeedStream) -> Result<SynthCorpus> {
    config.validate()?;
    let d = config.dim;
    let width = (config.items - 1).to_string().len().max(4);

    let mut rng = stream.named("centers").rng();
    let centers: Vec<Vec<f64>> = (0..config.genres).map(|_| unit(gaussian(&mut rng, d, 1.0))).collect();

    let n_amb = (config.p_amb * config.items as f64).round() as usize;
    let mut ambiguous = vec![false; config.items];
    for j in index::sample(&mut stream.named("ambiguous").rng(), config.items, n_amb) {
        ambiguous[j] = true;
    }

    let item_stream = stream.named("items");
    let mut items = Vec::with_capacity(config.items);
    let mut table = EmbeddingTable::new(d)?;
    for j in 0..config.items {
        let genre = j % config.genres;
        let id = format!("i{j:0width$}");
        let mut rng = item_stream.substream(j as u64).rng();
        let spread = config.genre_spread(genre) / (d as f64).sqrt();
        let noise = gaussian(&mut rng, d, spread);
        let latent = unit(centers[genre].iter().zip(noise).map(|(c, e)| c + e).collect());
        let image_radius = if ambiguous[j] { config.ambiguous_image_noise } else { config.image_noise };
        let mut attempts = 0;
        let (text, image) = loop {
            let text = perturb(&mut rng, &latent, config.text_noise);
            let image = perturb(&mut rng, &latent, image_radius);
            if ambiguous[j] || cosine(&text, &image)? >= config.min_modality_similarity {
                break (text, image);
            }
            attempts += 1;
            if attempts >= 1000 {
                return Err(Error::BadSynthConfig(format!(
                    "could not reach modality similarity {} for item {id}",
                    config.min_modality_similarity
                )));
            }
        };
        table.insert(id.clone(), text, image)?;
        let title = if ambiguous[j] {
            format!("{}", j)
        } else {
            format!("{} Story {}", genre_name(genre), j)
        };
        items.push(ItemMeta {
            item: id,
            genre,
            ambiguous: ambiguous[j],
            title,
        });
    }

    let mut by_genre: Vec<Vec<usize>> = vec![Vec::new(); config.genres];
    for (j, m) in items.iter().enumerate() {
        by_genre[m.genre].push(j);
    }

    let user_stream = stream.named("users");
    let uwidth = (config.users - 1).to_string().len().max(5);
    let mut users = Vec::with_capacity(config.users);
    let mut sequences = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let mut rng = user_stream.substream(u as u64).rng();
        let first = rng.random_range(0..config.genres);
        let second = if first == 0 {
            1
        } else if first == config.genres - 1 || rng.random_bool(0.5) {
            first - 1
        } else {
            first + 1
        };
        let len = rng.random_range(config.seq_len_min..=config.seq_len_max);
        let mut pools = [by_genre[first].clone(), by_genre[second].clone()];
        let mut seq = Vec::with_capacity(len);
        while seq.len() < len {
            let pick = rng.random_range(0..2usize);
            let pool = if pools[pick].is_empty() { &mut pools[1 - pick] } else { &mut pools[pick] };
            let k = rng.random_range(0..pool.len());
            seq.push(items[pool.swap_remove(k)].item.clone());
        }
        let user = format!("u{u:0uwidth$}");
        users.push(UserTruth {
            user: user.clone(),
            genres: [first, second],
        });
        sequences.push(InteractionSequence { user, items: seq });
    }

    Ok(SynthCorpus {
        items,
        table,
        sequences,
        users,
    })
}

/// Marks each pair hard when its rejected item belongs to one of the user's
/// preferred genres. Pairs whose user or item is unknown stay unlabeled.
pub fn label_pairs(pairs: &mut [PreferenceSample], users: &[UserTruth], items: &[ItemMeta]) {
    let genre_of: HashMap<&str, usize> = items.iter().map(|m| (m.item.as_str(), m.genre)).collect();
    let prefs: HashMap<&str, [usize; 2]> = users.iter().map(|u| (u.user.as_str(), u.genres)).collect();
    for p in pairs {
        p.hard_label = match (prefs.get(p.user.as_str()), genre_of.get(p.rejected.as_str())) {
            (Some(g), Some(r)) => Some(g.contains(r)),
            _ => None,
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_dpo_pairs, build_sft_samples};

    fn small() -> SynthConfig {
        SynthConfig {
            genres: 2,
            dim: 4,
            items: 20,
            users: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn minimal_config_partitions_catalog() {
        let c = synth_generate(&small(), &SeedStream::new(1, "synth")).unwrap();
        assert_eq!(c.items.len(), 20);
        assert_eq!(c.table.len(), 20);
        let counts = c.items.iter().fold([0usize; 2], |mut acc, m| {
            acc[m.genre] += 1;
            acc
        });
        assert_eq!(counts, [10, 10]);
        for s in &c.sequences {
            assert!(s.items.len() >= 6);
            assert!(s.items.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { genres: 1, ..small() },
            SynthConfig { dim: 3, ..small() },
            SynthConfig { items: 19, ..small() },
            SynthConfig { p_amb: 1.5, ..small() },
            SynthConfig { min_modality_similarity: 0.999, ..small() },
        ] {
            assert!(matches!(synth_generate(&cfg, &SeedStream::new(1, "s")), Err(Error::BadSynthConfig(_))));
        }
    }

    #[test]
    fn no_ambiguity_respects_similarity_floor() {
        let cfg = SynthConfig { p_amb: 0.0, ..SynthConfig::default() };
        let c = synth_generate(&cfg, &SeedStream::new(5, "synth")).unwrap();
        for j in 0..c.table.len() {
            let s = cosine(c.table.text_at(j), c.table.image_at(j)).unwrap();
            assert!(s >= cfg.min_modality_similarity, "item {j}: {s}");
        }
    }

    #[test]
    fn ambiguous_fraction_is_exact() {
        let c = synth_generate(&SynthConfig::default(), &SeedStream::new(5, "synth")).unwrap();
        assert_eq!(c.items.iter().filter(|m| m.ambiguous).count(), 100);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small(), &SeedStream::new(3, "synth")).unwrap();
        let b = synth_generate(&small(), &SeedStream::new(3, "synth")).unwrap();
        let dump = |c: &SynthCorpus| serde_json::to_string(&c.table.records().collect::<Vec<_>>()).unwrap();
        assert_eq!(dump(&a), dump(&b));
        assert_eq!(a.sequences, b.sequences);
        let c = synth_generate(&small(), &SeedStream::new(4, "synth")).unwrap();
        assert_ne!(dump(&a), dump(&c));
    }

    #[test]
    fn hard_pairs_are_closer_than_easy_pairs() {
        let c = synth_generate(&SynthConfig::default(), &SeedStream::new(7, "synth")).unwrap();
        let samples = build_sft_samples(&c.sequences[..600], &c.catalog(), &SeedStream::new(7, "sft")).unwrap();
        let mut pairs = build_dpo_pairs(&samples, 1, &SeedStream::new(7, "pairs")).unwrap();
        label_pairs(&mut pairs, &c.users, &c.items);
        let (mut hard, mut easy) = (Vec::new(), Vec::new());
        for p in &pairs {
            let s = cosine(c.table.combined(&p.chosen).unwrap(), c.table.combined(&p.rejected).unwrap()).unwrap();
            match p.hard_label {
                Some(true) => hard.push(s),
                Some(false) => easy.push(s),
                None => panic!("unlabeled pair"),
            }
        }
        assert!(hard.len() + easy.len() >= 500);
        assert!(!hard.is_empty() && !easy.is_empty());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&hard) > mean(&easy), "{} vs {}", mean(&hard), mean(&easy));
    }
}
