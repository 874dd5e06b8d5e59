//! Generation cache keyed by canonical request hash, with a nearest-neighbour
//! fallback over embeddings of the request text.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LadderError, Result};
use crate::llm_gateway::GenerationExchange;
use crate::mixed_mode::normalize;
use crate::prompt_tree::NodeId;

pub const DEFAULT_CAPACITY: usize = 1024;
pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const LEXICAL_DIM: usize = 256;

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing of normalized word pieces and piece bigrams.
#[derive(Copy, Clone, Debug, Default)]
pub struct LexicalEmbedder;

impl LexicalEmbedder {
    fn bucket(feature: &str) -> (usize, f64) {
        let h = Sha256::digest(feature.as_bytes());
        let idx = u16::from_le_bytes([h[0], h[1]]) as usize % LEXICAL_DIM;
        let sign = if h[2] & 1 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }
}

impl Embedder for LexicalEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; LEXICAL_DIM];
        let pieces = normalize(text);
        for p in &pieces {
            let (i, s) = Self::bucket(p);
            v[i] += s;
        }
        for w in pieces.windows(2) {
            let (i, s) = Self::bucket(&format!("{} {}", w[0], w[1]));
            v[i] += 0.5 * s;
        }
        unit(v)
    }
}

/// Scales to unit length; the zero vector maps to the first basis vector so
/// every stored embedding has norm 1.
pub fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub canonical_key: String,
    pub embedding: Vec<f64>,
    pub exchange: GenerationExchange,
    pub block: Option<NodeId>,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheLookup<'a> {
    Exact(&'a CacheEntry),
    Semantic { entry: &'a CacheEntry, similarity: f64 },
    Miss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenCache {
    capacity: usize,
    threshold: f64,
    next_seq: u64,
    entries: VecDeque<CacheEntry>,
}

impl Default for GenCache {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY, DEFAULT_THRESHOLD)
    }
}

impl GenCache {
    pub fn new(capacity: usize, threshold: f64) -> Self {
        GenCache {
            capacity: capacity.max(1),
            threshold,
            next_seq: 0,
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter()
    }

    pub fn insert(&mut self, exchange: GenerationExchange, query_text: &str, block: Option<NodeId>) -> u64 {
        let embedding = LexicalEmbedder.embed(query_text);
        self.insert_embedded(exchange, embedding, block)
    }

    /// Inserts with a caller-supplied embedding, normalized here.
    pub fn insert_embedded(&mut self, exchange: GenerationExchange, embedding: Vec<f64>, block: Option<NodeId>) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push_back(CacheEntry {
            canonical_key: exchange.key.clone(),
            embedding: unit(embedding),
            exchange,
            block,
            seq,
        });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        seq
    }

    pub fn lookup(&self, key: &str, query_text: &str) -> CacheLookup<'_> {
        if let Some(e) = self.entries.iter().rev().find(|e| e.canonical_key == key) {
            return CacheLookup::Exact(e);
        }
        self.nearest(&LexicalEmbedder.embed(query_text))
    }

    /// Nearest entry by cosine; ties go to the most recent insertion.
    pub fn nearest(&self, query: &[f64]) -> CacheLookup<'_> {
        let query = unit(query.to_vec());
        let mut best: Option<(&CacheEntry, f64)> = None;
        for e in &self.entries {
            let s = cosine(&e.embedding, &query);
            match best {
                Some((b, bs)) if s < bs || (s == bs && e.seq < b.seq) => {}
                _ => best = Some((e, s)),
            }
        }
        match best {
            Some((entry, similarity)) if similarity >= self.threshold => CacheLookup::Semantic { entry, similarity },
            _ => CacheLookup::Miss,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self).expect("cache serializes");
        text.push('\n');
        crate::fsutil::write_atomic(path, text.as_bytes())
    }

    /// Unreadable or malformed files degrade to an empty cache.
    pub fn load_or_default(path: &Path) -> Self {
        match fs::read_to_string(path) {
            Ok(text) => match serde_json::from_str(&text) {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable cache");
                    Self::default()
                }
            },
            Err(_) => Self::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| LadderError::parse(path.display().to_string(), e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::DecodingParams;

    fn exchange(key: &str) -> GenerationExchange {
        GenerationExchange {
            key: key.to_string(),
            template: "t".into(),
            messages: vec![],
            params: DecodingParams::default(),
            response: format!("resp {key}"),
            backend_id: "mock".into(),
            latency_ms: 0,
        }
    }

    #[test]
    fn empty_cache_misses() {
        assert_eq!(GenCache::default().lookup("k", "anything"), CacheLookup::Miss);
    }

    #[test]
    fn exact_hit_after_insert() {
        let mut c = GenCache::default();
        c.insert(exchange("k1"), "Train Regression Model", None);
        assert!(matches!(c.lookup("k1", "unrelated"), CacheLookup::Exact(e) if e.canonical_key == "k1"));
    }

    #[test]
    fn capacity_evicts_oldest() {
        let mut c = GenCache::new(DEFAULT_CAPACITY, DEFAULT_THRESHOLD);
        for i in 0..1025 {
            c.insert(exchange(&format!("k{i}")), "x", None);
        }
        assert_eq!(c.len(), 1024);
        assert_eq!(c.entries().next().unwrap().seq, 1);
        assert_eq!(c.entries().last().unwrap().canonical_key, "k1024");
    }

    #[test]
    fn nearer_entry_wins() {
        let mut c = GenCache::new(8, 0.95);
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        c.insert_embedded(exchange("a"), a, None);
        c.insert_embedded(exchange("b"), b, None);
        // cos with a = 0.97, with b = 0.2
        let q = vec![0.97, 0.2, (1.0f64 - 0.97 * 0.97 - 0.04).sqrt()];
        match c.nearest(&q) {
            CacheLookup::Semantic { entry, similarity } => {
                assert_eq!(entry.canonical_key, "a");
                assert!((similarity - 0.97).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lexical_embedding_is_unit_and_stable() {
        let e = LexicalEmbedder;
        let v = e.embed("Train Regression Model");
        let n: f64 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(v, e.embed("train  regression model"));
        assert_eq!(e.embed("")[0], 1.0);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let mut c = GenCache::default();
        c.insert(exchange("k"), "Plot Loss Curve", Some(NodeId::new(7)));
        c.save(&path).unwrap();
        assert_eq!(GenCache::load(&path).unwrap(), c);
        fs::write(&path, "{").unwrap();
        assert!(GenCache::load_or_default(&path).is_empty());
    }
}
