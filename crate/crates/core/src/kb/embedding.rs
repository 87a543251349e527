use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dimension of every stored and query vector.
pub const EMBEDDING_DIM: usize = 1536;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("expected {EMBEDDING_DIM} components, got {0}")]
    WrongLength(usize),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("record {record_id}: {message}")]
    Record { record_id: String, message: String },
}

/// Fixed-length embedding with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.len() != EMBEDDING_DIM {
            return Err(EmbeddingError::WrongLength(values.len()));
        }
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Cosine similarity, clamped to [-1, 1]. Zero vectors score 0.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, self.norm, &other.values, other.norm)
    }
}

pub(crate) fn cosine(a: &[f32], norm_a: f64, b: &[f32], norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// Mixed into the FNV offset so the buckets differ from a plain FNV-1a.
const SEED: u64 = 0x666f_616d_666c_6f77;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET ^ SEED, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Deterministic offline embedding: lowercase alphanumeric tokens are hashed
/// into signed buckets and the result is L2-normalised.
pub fn hash_embedding(text: &str) -> Result<EmbeddingVector, EmbeddingError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let lower = trimmed.to_lowercase();
    let mut tokens: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        tokens.push(&lower);
    }
    let mut values = vec![0f64; EMBEDDING_DIM];
    for token in tokens {
        let h = fnv1a(token.as_bytes());
        let bucket = (h % EMBEDDING_DIM as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        values[bucket] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = values.into_iter().map(|v| (v / norm) as f32).collect();
    EmbeddingVector::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedding_is_deterministic_and_unit_length() {
        let a = hash_embedding("lid driven cavity").unwrap();
        assert_eq!(a, hash_embedding("lid driven cavity").unwrap());
        assert_eq!(a.values().len(), EMBEDDING_DIM);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn case_and_punctuation_do_not_matter() {
        assert_eq!(
            hash_embedding("Lid-Driven, cavity!").unwrap(),
            hash_embedding("lid driven cavity").unwrap()
        );
    }

    #[test]
    fn distinct_texts_are_not_identical() {
        let a = hash_embedding("a").unwrap();
        let b = hash_embedding("completely different text").unwrap();
        assert!(a.cosine(&b) < 1.0);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert_eq!(
            hash_embedding("  \n").unwrap_err(),
            EmbeddingError::EmptyText
        );
        assert!(hash_embedding("{}").unwrap().norm() > 0.0);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert_eq!(
            EmbeddingVector::new(vec![1.0; 3]).unwrap_err(),
            EmbeddingError::WrongLength(3)
        );
    }
}
