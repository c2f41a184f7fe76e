//! Per-item text and image embeddings with exhaustive cosine Top-K retrieval.
//!
//! Similarity between items is measured on the combined vector `text + image`.
//! Tables load from `embeddings.jsonl` or from the compact `HNRE` binary cache.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

pub const CACHE_MAGIC: &[u8; 4] = b"HNRE";

/// One line of `embeddings.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub item: String,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub item: String,
    pub index: usize,
    pub score: f64,
}

/// The K nearest items to an anchor, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub anchor: String,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    text: Vec<f64>,
    image: Vec<f64>,
    combined: Vec<f64>,
    combined_norm: Vec<f64>,
}

/// `h + x`, rejecting the zero vector.
pub fn combine(text: &[f64], image: &[f64]) -> Result<Vec<f64>> {
    if text.len() != image.len() {
        return Err(Error::LengthMismatch {
            left: text.len(),
            right: image.len(),
        });
    }
    let sum: Vec<f64> = text.iter().zip(image).map(|(a, b)| a + b).collect();
    if norm(&sum) == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(sum)
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            ..Default::default()
        })
    }

    pub fn from_records(records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self> {
        let mut iter = records.into_iter().peekable();
        let dim = iter.peek().map(|r| r.text.len()).ok_or(Error::EmptyDataset)?;
        let mut table = Self::new(dim)?;
        for r in iter {
            table.insert(r.item, r.text, r.image)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, item: String, text: Vec<f64>, image: Vec<f64>) -> Result<()> {
        for v in [&text, &image] {
            if v.len() != self.dim {
                return Err(Error::LengthMismatch {
                    left: v.len(),
                    right: self.dim,
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("item `{item}` has a non-finite embedding")));
            }
        }
        if self.index.contains_key(&item) {
            return Err(Error::Invalid(format!("duplicate item `{item}`")));
        }
        let combined = combine(&text, &image)?;
        self.combined_norm.push(norm(&combined));
        self.combined.extend_from_slice(&combined);
        self.text.extend_from_slice(&text);
        self.image.extend_from_slice(&image);
        self.index.insert(item.clone(), self.ids.len());
        self.ids.push(item);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, item: &str) -> bool {
        self.index.contains_key(item)
    }

    pub fn index_of(&self, item: &str) -> Result<usize> {
        self.index
            .get(item)
            .copied()
            .ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn text_at(&self, index: usize) -> &[f64] {
        &self.text[index * self.dim..(index + 1) * self.dim]
    }

    pub fn image_at(&self, index: usize) -> &[f64] {
        &self.image[index * self.dim..(index + 1) * self.dim]
    }

    pub fn combined_at(&self, index: usize) -> &[f64] {
        &self.combined[index * self.dim..(index + 1) * self.dim]
    }

    pub fn combined(&self, item: &str) -> Result<&[f64]> {
        Ok(self.combined_at(self.index_of(item)?))
    }

    pub fn text(&self, item: &str) -> Result<&[f64]> {
        Ok(self.text_at(self.index_of(item)?))
    }

    pub fn image(&self, item: &str) -> Result<&[f64]> {
        Ok(self.image_at(self.index_of(item)?))
    }

    /// Cosine between the combined vectors of two stored items.
    pub fn similarity_at(&self, a: usize, b: usize) -> f64 {
        let s = dot(self.combined_at(a), self.combined_at(b))
            / (self.combined_norm[a] * self.combined_norm[b]);
        s.clamp(-1.0, 1.0)
    }

    /// The `k` items most similar to `anchor` (anchor excluded), ties broken by
    /// ascending item id.
    pub fn top_k_similar(&self, anchor: &str, k: usize) -> Result<NeighborSet> {
        let a = self.index_of(anchor)?;
        self.top_k_similar_at(a, k)
    }

    pub fn top_k_similar_at(&self, anchor: usize, k: usize) -> Result<NeighborSet> {
        let max = self.len().saturating_sub(1);
        if k == 0 || k > max {
            return Err(Error::KOutOfRange { k, max });
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&j| j != anchor)
            .map(|j| (j, self.similarity_at(anchor, j)))
            .collect();
        let by_rank = |x: &(usize, f64), y: &(usize, f64)| {
            y.1.total_cmp(&x.1).then_with(|| self.ids[x.0].cmp(&self.ids[y.0]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(NeighborSet {
            anchor: self.ids[anchor].clone(),
            neighbors: scored
                .into_iter()
                .map(|(j, score)| Neighbor {
                    item: self.ids[j].clone(),
                    index: j,
                    score,
                })
                .collect(),
        })
    }

    /// Copy with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut out = Self::new(self.dim)?;
        for (i, id) in self.ids.iter().enumerate() {
            let t = self.text_at(i).iter().map(|v| v * factor).collect();
            let x = self.image_at(i).iter().map(|v| v * factor).collect();
            out.insert(id.clone(), t, x)?;
        }
        Ok(out)
    }

    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        (0..self.len()).map(|i| EmbeddingRecord {
            item: self.ids[i].clone(),
            text: self.text_at(i).to_vec(),
            image: self.image_at(i).to_vec(),
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_jsonl(path, self.records())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_records(crate::io::read_jsonl::<EmbeddingRecord>(path)?)
    }

    /// Loads either format, sniffing the cache magic.
    pub fn load(path: &Path) -> Result<Self> {
        let mut head = [0u8; 4];
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
        if n == 4 && &head == CACHE_MAGIC {
            Self::read_cache(path)
        } else {
            Self::read_jsonl(path)
        }
    }

    /// Writes the binary cache. Values are narrowed to f32.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.encode_cache(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn encode_cache<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let too_big = |what: &str| std::io::Error::new(std::io::ErrorKind::InvalidInput, what.to_string());
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(u32::try_from(self.len()).map_err(|_| too_big("too many items"))?)?;
        w.write_u32::<LittleEndian>(u32::try_from(self.dim).map_err(|_| too_big("dimension too large"))?)?;
        for i in 0..self.len() {
            let id = self.ids[i].as_bytes();
            w.write_u16::<LittleEndian>(u16::try_from(id.len()).map_err(|_| too_big("item id too long"))?)?;
            w.write_all(id)?;
            for v in self.text_at(i).iter().chain(self.image_at(i)) {
                w.write_f32::<LittleEndian>(*v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode_cache(&mut BufReader::new(f)).map_err(|e| match e {
            CacheError::Io(e) => Error::io(path, e),
            CacheError::Table(e) => e,
        })
    }

    fn decode_cache<R: BufRead>(r: &mut R) -> std::result::Result<Self, CacheError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(CacheError::Table(Error::Invalid("missing HNRE magic".into())));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let mut table = Self::new(dim)?;
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id)
                .map_err(|_| CacheError::Table(Error::Invalid("item id is not UTF-8".into())))?;
            let mut read_vec = || -> std::io::Result<Vec<f64>> {
                (0..dim).map(|_| r.read_f32::<LittleEndian>().map(f64::from)).collect()
            };
            let text = read_vec()?;
            let image = read_vec()?;
            table.insert(id, text, image)?;
        }
        Ok(table)
    }
}

enum CacheError {
    Io(std::io::Error),
    Table(Error),
}

impl From<std::io::Error> for CacheError {
    fn from(e: std::io::Error) -> Self {
        CacheError::Io(e)
    }
}

impl From<Error> for CacheError {
    fn from(e: Error) -> Self {
        CacheError::Table(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;
    use proptest::prelude::*;

    fn table(rows: &[(&str, Vec<f64>, Vec<f64>)]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(rows[0].1.len()).unwrap();
        for (id, h, x) in rows {
            t.insert(id.to_string(), h.clone(), x.clone()).unwrap();
        }
        t
    }

    fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable {
        use rand::Rng;
        let mut rng = crate::rng::SeedStream::new(seed, "test-table").rng();
        let mut t = EmbeddingTable::new(d).unwrap();
        for i in 0..n {
            let h = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            t.insert(format!("i{i:04}"), h, x).unwrap();
        }
        t
    }

    /// Brute force: score everything with the free cosine, full sort.
    fn brute_top_k(t: &EmbeddingTable, anchor: usize, k: usize) -> Vec<(String, f64)> {
        let a = t.combined_at(anchor).to_vec();
        let mut all: Vec<(String, f64)> = (0..t.len())
            .filter(|&j| j != anchor)
            .map(|j| (t.id(j).to_string(), cosine(&a, t.combined_at(j)).unwrap()))
            .collect();
        all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn combined_is_componentwise_sum() {
        let t = table(&[("a", vec![1.0, 0.0], vec![0.0, 1.0])]);
        assert_eq!(t.combined("a").unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_combined_vector_is_rejected() {
        let mut t = EmbeddingTable::new(2).unwrap();
        let err = t.insert("z".into(), vec![0.0, 0.0], vec![0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::ZeroVector));
        assert!(matches!(combine(&[1.0], &[-1.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn unknown_item() {
        let t = table(&[("a", vec![1.0, 0.0], vec![0.0, 1.0])]);
        assert!(matches!(t.combined("nope"), Err(Error::UnknownItem(_))));
        assert!(matches!(t.top_k_similar("nope", 1), Err(Error::UnknownItem(_))));
    }

    #[test]
    fn three_item_store_exhaustive() {
        let t = table(&[
            ("a", vec![1.0, 0.0], vec![0.0, 0.0]),
            ("b", vec![0.0, 1.0], vec![0.0, 0.0]),
            ("c", vec![1.0, 0.1], vec![0.0, 0.0]),
        ]);
        let n = t.top_k_similar("a", 2).unwrap();
        let ids: Vec<_> = n.neighbors.iter().map(|x| x.item.as_str()).collect();
        assert_eq!(ids, ["c", "b"]);
        assert!(n.neighbors[0].score >= n.neighbors[1].score);
    }

    #[test]
    fn k_bounds() {
        let t = random_table(5, 3, 1);
        assert!(matches!(t.top_k_similar("i0000", 5), Err(Error::KOutOfRange { .. })));
        assert!(matches!(t.top_k_similar("i0000", 0), Err(Error::KOutOfRange { .. })));
        assert_eq!(t.top_k_similar("i0000", 4).unwrap().neighbors.len(), 4);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let t = table(&[
            ("a", vec![1.0, 0.0], vec![0.0, 0.0]),
            ("z", vec![0.0, 1.0], vec![0.0, 0.0]),
            ("m", vec![0.0, 2.0], vec![0.0, 0.0]),
        ]);
        let ids: Vec<_> = t.top_k_similar("a", 2).unwrap().neighbors.into_iter().map(|n| n.item).collect();
        assert_eq!(ids, ["m", "z"]);
    }

    #[test]
    fn top_k_matches_brute_force_scan() {
        let t = random_table(100, 8, 3);
        for anchor in 0..t.len() {
            for k in [1, 5, 99] {
                let got: Vec<(String, f64)> = t
                    .top_k_similar_at(anchor, k)
                    .unwrap()
                    .neighbors
                    .into_iter()
                    .map(|n| (n.item, n.score))
                    .collect();
                let want = brute_top_k(&t, anchor, k);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!(g.0, w.0);
                    assert!((g.1 - w.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cache_round_trip_narrows_to_f32() {
        let t = random_table(7, 5, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        t.write_cache(&p).unwrap();
        let back = EmbeddingTable::load(&p).unwrap();
        assert_eq!(back.ids(), t.ids());
        for i in 0..t.len() {
            for (a, b) in back.text_at(i).iter().zip(t.text_at(i)) {
                assert_eq!(*a, (*b as f32) as f64);
            }
        }
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"HNRE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 7);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 12 + 7 * (2 + 5 + 2 * 5 * 4));
    }

    #[test]
    fn truncated_cache_is_an_error() {
        let t = random_table(3, 4, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        t.write_cache(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(EmbeddingTable::read_cache(&p).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let t = random_table(6, 4, 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        t.write_jsonl(&p).unwrap();
        let back = EmbeddingTable::load(&p).unwrap();
        assert_eq!(back.records().collect::<Vec<_>>(), t.records().collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            u in proptest::collection::vec(-1e3f64..1e3, 6),
            v in proptest::collection::vec(-1e3f64..1e3, 6),
        ) {
            prop_assume!(norm(&u) > 1e-9 && norm(&v) > 1e-9);
            let a = cosine(&u, &v).unwrap();
            let b = cosine(&v, &u).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn neighbor_sets_are_scale_invariant(seed in 0u64..1000, factor in 0.01f64..100.0) {
            let t = random_table(30, 4, seed);
            let s = t.scaled(factor).unwrap();
            for anchor in 0..t.len() {
                let a = t.top_k_similar_at(anchor, 5).unwrap();
                let b = s.top_k_similar_at(anchor, 5).unwrap();
                for (x, y) in a.neighbors.iter().zip(&b.neighbors) {
                    prop_assert_eq!(&x.item, &y.item);
                    prop_assert!((x.score - y.score).abs() <= 1e-12);
                }
            }
        }
    }
}
