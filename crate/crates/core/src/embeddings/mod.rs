//! Feature vectors, the text classifier, the `.vcre` file format and the
//! encoder backends that turn `(image, view)` pairs into unit vectors.

mod backend;
mod classifier;
mod store;
pub mod synthetic;

pub use backend::{Encoder, FileBackend, SyntheticBackend};
pub use classifier::{build_text_classifier, TextClassifier};
pub use store::{
    load_embedding_file, sidecar_path, write_atomic, write_embedding_file, AdapterParams, CropKey,
    EmbeddingStore, ImageEntry, Manifest, ManifestRow, SelectionRecord, ScaleChoice, MAGIC,
    VERSION,
};

use crate::error::{Result, VcrError};

/// Tolerance on `|‖v‖ - 1|` for vectors that claim to be normalized.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// A finite, L2-normalized embedding of dimension at least 2.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    /// Normalizes `values` to unit length. Accumulation is in `f64`.
    pub fn normalize(values: &[f32]) -> Result<Self> {
        check_shape(values)?;
        let norm = norm_f64(values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(VcrError::invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self(values.iter().map(|&v| (f64::from(v) / norm) as f32).collect()))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(VcrError::invalid(format!(
                "feature dimension must be at least 2, got {}",
                values.len()
            )));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(VcrError::invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self(values.iter().map(|&v| (v / norm) as f32).collect()))
    }

    /// Wraps values that are already unit length, checking the tolerance.
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        check_shape(&values)?;
        let norm = norm_f64(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(VcrError::Validation(format!("vector norm {norm} is not unit")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn norm(&self) -> f64 {
        norm_f64(&self.0)
    }

    /// Cosine similarity; both operands are unit so this is a dot product.
    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub(crate) fn norm_f64(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

fn check_shape(values: &[f32]) -> Result<()> {
    if values.len() < 2 {
        return Err(VcrError::invalid(format!(
            "feature dimension must be at least 2, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(VcrError::invalid(format!("non-finite component at index {i}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(FeatureVector::normalize(&[1.0]).is_err());
        assert!(FeatureVector::normalize(&[0.0, 0.0]).is_err());
        assert!(FeatureVector::normalize(&[f32::NAN, 1.0]).is_err());
        assert!(FeatureVector::from_unit(vec![2.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_gives_unit_norm(v in prop::collection::vec(-100.0f32..100.0, 2..64)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let f = FeatureVector::normalize(&v).unwrap();
            prop_assert!((f.norm() - 1.0).abs() <= UNIT_NORM_TOL);
        }

        #[test]
        fn cosine_is_bounded(
            a in prop::collection::vec(-1.0f32..1.0, 8),
            b in prop::collection::vec(-1.0f32..1.0, 8),
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let (a, b) = (FeatureVector::normalize(&a).unwrap(), FeatureVector::normalize(&b).unwrap());
            let c = a.cosine(&b);
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
        }
    }
}
