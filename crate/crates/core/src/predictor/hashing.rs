//! Signed feature hashing of lowercase unigrams and adjacent bigrams.

use std::collections::BTreeMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

pub const DEFAULT_HASH_DIM: usize = 1 << 16;

/// Sparse vector with strictly increasing indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn bucket(gram: &str, hash_dim: usize) -> (u32, f64) {
    let mut h = FnvHasher::default();
    h.write(gram.as_bytes());
    let h = h.finish();
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    ((h & (hash_dim as u64 - 1)) as u32, sign)
}

/// Un-normalised signed bucket counts. Buckets whose signed count cancels to
/// zero are dropped.
pub fn hashed_counts(text: &str, hash_dim: usize) -> BTreeMap<u32, f64> {
    assert!(hash_dim.is_power_of_two(), "hash_dim must be a power of two");
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    let mut counts = BTreeMap::new();
    let mut add = |gram: &str| {
        let (b, s) = bucket(gram, hash_dim);
        *counts.entry(b).or_insert(0.0) += s;
    };
    for t in &tokens {
        add(t);
    }
    let mut bigram = String::new();
    for pair in tokens.windows(2) {
        bigram.clear();
        bigram.push_str(pair[0]);
        bigram.push(' ');
        bigram.push_str(pair[1]);
        add(&bigram);
    }
    counts.retain(|_, v| *v != 0.0);
    counts
}

/// L2-normalised hashed n-gram vector of `text`.
pub fn encode(text: &str, hash_dim: usize) -> SparseVector {
    let counts = hashed_counts(text, hash_dim);
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    let (indices, values) = counts.into_iter().map(|(i, v)| (i, v / norm)).unzip();
    SparseVector { indices, values }
}
