//! Deterministic feature-hashed text embeddings.
//!
//! Tokens are lowercased and split on non-alphanumeric characters, each token
//! is bucketed by a fixed 64-bit FNV-1a hash modulo the dimension, bucket
//! counts accumulate, and the vector is L2-normalized. Identical text always
//! produces a bitwise-identical vector; vocabulary overlap raises cosine
//! similarity, which is the only geometric property the rest of the lab
//! depends on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default embedding dimension. Low collision rate at desk-corpus vocabulary sizes.
pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("text contains no tokens after trimming")]
    EmptyText,
}

/// Unit-L2-norm vector produced by [`embed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Wrap raw values without normalizing. Callers are responsible for the
    /// unit-norm invariant; used by snapshot import and tests that construct
    /// exact geometries.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        debug_assert_eq!(self.dimension(), other.dimension());
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Lowercased alphanumeric tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Hash bucket for a single token at the given dimension.
pub fn token_bucket(token: &str, dimension: usize) -> usize {
    (fnv1a64(token.as_bytes()) % dimension as u64) as usize
}

/// Embed text at the default dimension.
pub fn embed(text: &str) -> Result<EmbeddingVector, EmbedError> {
    embed_with_dimension(text, DEFAULT_DIMENSION)
}

/// Feature-hashed bag-of-tokens embedding, L2-normalized.
pub fn embed_with_dimension(text: &str, dimension: usize) -> Result<EmbeddingVector, EmbedError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut values = vec![0.0f64; dimension];
    for token in &tokens {
        values[token_bucket(token, dimension)] += 1.0;
    }
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in values.iter_mut() {
        *x /= norm;
    }
    Ok(EmbeddingVector { values })
}

/// Cosine similarity of two unit vectors: their dot product.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.dot(b)
}

/// Cosine distance `1 - dot(a, b)`, clamped to [0, 2].
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    (1.0 - a.dot(b)).clamp(0.0, 2.0)
}
