use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// A vector in the scorer's joint image/text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    data: Vec<f64>,
    degenerate: bool,
}

impl EmbeddingVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("embedding must have at least one dimension".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite values".into()));
        }
        let degenerate = norm(&data) < DEGENERATE_NORM;
        Ok(Self { data, degenerate })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when the norm is effectively zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    /// `self - other`, e.g. an edit direction.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        Self::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.data.iter().map(|v| v * factor).collect())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("dim {}", a.dim()),
            actual: format!("dim {}", b.dim()),
        });
    }
    Ok(())
}

/// Cosine similarity, or `None` when either vector is degenerate.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<Option<f64>> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(None);
    }
    let dot: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// `1 - cos(a, b)` in `[0, 2]`; a degenerate operand yields 1.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(cosine_similarity(a, b)?.map_or(1.0, |s| 1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(cosine_distance(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_distance(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 1.0);
        let oracle = 1.0 - 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(
            cosine_distance(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap(),
            oracle,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(oracle, 0.29289, epsilon = 1e-5);
    }

    #[test]
    fn degenerate_is_neutral() {
        let zero = v(&[0.0, 0.0]);
        assert!(zero.is_degenerate());
        assert_eq!(cosine_distance(&zero, &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&zero, &v(&[1.0, 0.0])).unwrap(), None);
    }

    #[test]
    fn dim_mismatch_rejected() {
        assert!(cosine_distance(&v(&[1.0]), &v(&[1.0, 0.0])).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 5)
            .prop_filter("non-degenerate", |d| norm(d) > 1e-3)
    }

    proptest! {
        #[test]
        fn self_and_opposite(a in vec_strategy()) {
            let va = v(&a);
            let neg = va.scaled(-1.0).unwrap();
            prop_assert!(cosine_distance(&va, &va).unwrap().abs() < 1e-12);
            prop_assert!((cosine_distance(&va, &neg).unwrap() - 2.0).abs() < 1e-12);
        }

        #[test]
        fn scale_invariant(a in vec_strategy(), b in vec_strategy(), l in 0.01f64..100.0, m in 0.01f64..100.0) {
            let base = cosine_distance(&v(&a), &v(&b)).unwrap();
            let scaled = cosine_distance(&v(&a).scaled(l).unwrap(), &v(&b).scaled(m).unwrap()).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
            prop_assert!((0.0..=2.0).contains(&base));
        }
    }
}
