//! Brute-force nearest-neighbour oracle for the generation cache.

use ladder_core::gen_cache::{CacheLookup, GenCache, DEFAULT_THRESHOLD};
use ladder_core::llm_gateway::{DecodingParams, GenerationExchange};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn exchange(key: &str) -> GenerationExchange {
    GenerationExchange {
        key: key.into(),
        template: "t".into(),
        messages: Vec::new(),
        params: DecodingParams::default(),
        response: format!("response for {key}"),
        backend_id: "test".into(),
        latency_ms: 0,
    }
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, v: &[f64], eps: f64) -> Vec<f64> {
    v.iter().map(|x| x + rng.gen_range(-eps..eps)).collect()
}

/// One random entry set plus queries; returns the number of queries whose
/// answer the oracle confirmed, and how many of those were hits.
pub fn check_entry_set(rng: &mut ChaCha8Rng) -> Result<(usize, usize), String> {
    let dim = rng.gen_range(4..24);
    let n = rng.gen_range(1..40);
    let mut cache = GenCache::new(1024, DEFAULT_THRESHOLD);
    let mut stored: Vec<(u64, Vec<f64>)> = Vec::new();
    for i in 0..n {
        let v = match stored.len() {
            0 => random_vec(rng, dim),
            k => match rng.gen_range(0..4) {
                0 => stored[rng.gen_range(0..k)].1.clone(),
                1 => {
                    let j = rng.gen_range(0..k);
                    jitter(rng, &stored[j].1, 0.05)
                }
                _ => random_vec(rng, dim),
            },
        };
        let seq = cache.insert_embedded(exchange(&format!("k{i}")), v.clone(), None);
        stored.push((seq, v));
    }
    let mut checked = 0;
    let mut hits = 0;
    for _ in 0..10 {
        let q = if rng.gen_bool(0.5) {
            let j = rng.gen_range(0..stored.len());
            jitter(rng, &stored[j].1, 0.02)
        } else {
            random_vec(rng, dim)
        };
        let mut best: Option<(u64, f64)> = None;
        for (seq, v) in &stored {
            let s = plain_cosine(v, &q);
            best = match best {
                Some((bseq, bs)) if s < bs - 1e-12 || ((s - bs).abs() <= 1e-12 && *seq < bseq) => Some((bseq, bs)),
                _ => Some((*seq, s)),
            };
        }
        let (bseq, bs) = best.unwrap();
        if (bs - DEFAULT_THRESHOLD).abs() < 1e-9 {
            continue;
        }
        match (cache.nearest(&q), bs >= DEFAULT_THRESHOLD) {
            (CacheLookup::Semantic { entry, similarity }, true) => {
                if (similarity - bs).abs() > 1e-9 {
                    return Err(format!("similarity {similarity} vs oracle {bs}"));
                }
                // Exact duplicates tie; any of them is acceptable only if it is the newest.
                if entry.seq != bseq {
                    return Err(format!("picked seq {} vs oracle seq {bseq}", entry.seq));
                }
                hits += 1;
            }
            (CacheLookup::Miss, false) => {}
            (got, want_hit) => return Err(format!("lookup {got:?}, oracle best {bs} (hit: {want_hit})")),
        }
        checked += 1;
    }
    Ok((checked, hits))
}
