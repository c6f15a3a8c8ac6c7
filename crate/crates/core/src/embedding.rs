//! Embedding vectors, batches, and similarity primitives.
//!
//! Every other module works on these types: a [`TokenBatch`] is the set of
//! candidate image-token embeddings for one (scene, expression) instance,
//! and an [`ExpressionEmbedding`] is the query vector the tokens are scored
//! against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM_FLOOR: f64 = 1e-30;

/// L2-normalize a vector, preserving direction.
///
/// Fails with [`Error::ZeroVector`] when the norm underflows below 1e-30,
/// and with [`Error::NonFinite`] on NaN/Inf entries.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let norm = l2_norm(v);
    if norm < ZERO_NORM_FLOOR {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// L2 norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product; the caller guarantees equal lengths.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity between two raw vectors, clamped to [-1, 1] to absorb
/// rounding. Symmetric in its arguments.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < ZERO_NORM_FLOOR || nb < ZERO_NORM_FLOOR {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One candidate image-token embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding {
    values: Vec<f64>,
}

impl TokenEmbedding {
    /// Wrap a raw vector; entries must be finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { values })
    }

    /// Wrap and L2-normalize in one step.
    pub fn normalized(values: &[f64]) -> Result<Self> {
        Ok(Self {
            values: normalize(values)?,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// What the query vector stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryKind {
    /// The masked referring expression (class token removed, attribute
    /// semantics kept).
    MaskedExpression,
    /// A bare class embedding, for the class-agnostic variant.
    ClassOnly,
}

/// The query embedding tokens are scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionEmbedding {
    values: Vec<f64>,
    kind: QueryKind,
}

impl ExpressionEmbedding {
    pub fn new(values: Vec<f64>, kind: QueryKind) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { values, kind })
    }

    /// Wrap and L2-normalize in one step.
    pub fn normalized(values: &[f64], kind: QueryKind) -> Result<Self> {
        Ok(Self {
            values: normalize(values)?,
            kind,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> QueryKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Cosine similarity between a token and a query embedding.
pub fn cosine_similarity(z: &TokenEmbedding, t: &ExpressionEmbedding) -> Result<f64> {
    cosine(z.values(), t.values())
}

/// Ground-truth record attached to one token.
///
/// `class` and `attribute` are `None` for background tokens that carry no
/// object. `is_target` marks whether the token is a true target of the
/// instance's expression (in a scenario's canonical batch it marks real
/// objects; [`crate::synthworld::Scenario::batch_for_query`] rewrites it
/// relative to a specific query).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLabel {
    pub class: Option<usize>,
    pub attribute: Option<usize>,
    pub is_target: bool,
}

/// The set `I` of token embeddings for one (scene, expression) instance,
/// with optional ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    tokens: Vec<TokenEmbedding>,
    labels: Option<Vec<TokenLabel>>,
    instance_id: String,
}

impl TokenBatch {
    /// Build a batch, enforcing non-emptiness, a shared dimension, and
    /// label/token alignment.
    pub fn new(
        tokens: Vec<TokenEmbedding>,
        labels: Option<Vec<TokenLabel>>,
        instance_id: impl Into<String>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dim = tokens[0].dim();
        for t in &tokens {
            if t.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: t.dim(),
                });
            }
        }
        if let Some(ref l) = labels {
            if l.len() != tokens.len() {
                return Err(Error::LabelLengthMismatch {
                    tokens: tokens.len(),
                    labels: l.len(),
                });
            }
        }
        Ok(Self {
            tokens,
            labels,
            instance_id: instance_id.into(),
        })
    }

    pub fn tokens(&self) -> &[TokenEmbedding] {
        &self.tokens
    }

    pub fn labels(&self) -> Option<&[TokenLabel]> {
        self.labels.as_deref()
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Shared embedding dimension.
    pub fn dim(&self) -> usize {
        self.tokens[0].dim()
    }

    /// Overwrite one coordinate of one token. Used by finite-difference
    /// probes and the trainer's update step.
    pub fn set_value(&mut self, token: usize, coord: usize, value: f64) {
        self.tokens[token].values[coord] = value;
    }

    /// Replace a token's full value vector (dimension must match).
    pub fn set_token_values(&mut self, token: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: values.len(),
            });
        }
        self.tokens[token].values.copy_from_slice(values);
        Ok(())
    }

    /// Replace the labels wholesale (length must match).
    pub fn with_labels(mut self, labels: Vec<TokenLabel>) -> Result<Self> {
        if labels.len() != self.tokens.len() {
            return Err(Error::LabelLengthMismatch {
                tokens: self.tokens.len(),
                labels: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_instance_id(mut self, id: impl Into<String>) -> Self {
        self.instance_id = id.into();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four_five() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_already_unit() {
        let v = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        assert_eq!(normalize(&[0.0, 0.0]).unwrap_err(), Error::ZeroVector);
    }

    #[test]
    fn normalize_rejects_nan() {
        assert_eq!(normalize(&[f64::NAN, 1.0]).unwrap_err(), Error::NonFinite);
    }

    #[test]
    fn cosine_identity_and_orthogonal() {
        let z = TokenEmbedding::normalized(&[0.3, -0.9, 0.1]).unwrap();
        let t = ExpressionEmbedding::new(z.values().to_vec(), QueryKind::MaskedExpression).unwrap();
        assert!((cosine_similarity(&z, &t).unwrap() - 1.0).abs() < 1e-12);

        let z = TokenEmbedding::new(vec![1.0, 0.0]).unwrap();
        let t = ExpressionEmbedding::new(vec![0.0, 1.0], QueryKind::MaskedExpression).unwrap();
        assert_eq!(cosine_similarity(&z, &t).unwrap(), 0.0);
    }

    #[test]
    fn cosine_forty_five_degrees() {
        let s = 1.0 / 2.0_f64.sqrt();
        let z = TokenEmbedding::new(vec![s, s]).unwrap();
        let t = ExpressionEmbedding::new(vec![1.0, 0.0], QueryKind::MaskedExpression).unwrap();
        // Direct evaluation of the dot-product formula: (1,1)/sqrt(2) . (1,0).
        assert!((cosine_similarity(&z, &t).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        assert!(matches!(
            cosine(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_rejects_empty_and_misaligned_labels() {
        assert_eq!(
            TokenBatch::new(vec![], None, "x").unwrap_err(),
            Error::EmptyBatch
        );
        let t = TokenEmbedding::new(vec![1.0, 0.0]).unwrap();
        let err = TokenBatch::new(
            vec![t],
            Some(vec![]),
            "x",
        )
        .unwrap_err();
        assert_eq!(err, Error::LabelLengthMismatch { tokens: 1, labels: 0 });
    }

    #[test]
    fn batch_rejects_mixed_dims() {
        let a = TokenEmbedding::new(vec![1.0, 0.0]).unwrap();
        let b = TokenEmbedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            TokenBatch::new(vec![a, b], None, "x"),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
