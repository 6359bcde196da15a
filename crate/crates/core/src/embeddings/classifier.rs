use std::collections::HashSet;
use std::path::Path;

use super::store::{load_embedding_file, write_embedding_file, EmbeddingStore};
use super::FeatureVector;
use crate::error::{Result, VcrError};

/// Class text embeddings with a temperature.
///
/// Rows are unit length so `cos⟨v, w_c⟩ / τ` is a dot product divided by τ.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    class_names: Vec<String>,
    weights: Vec<FeatureVector>,
    tau: f64,
}

impl TextClassifier {
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn weights(&self) -> &[FeatureVector] {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].dim()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// The weights as a store whose sidecar carries `classes` and `tau`.
    pub fn to_store(&self) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(self.dim())?;
        for w in &self.weights {
            store.push_row(w.as_slice())?;
        }
        store.set_classes(self.class_names.clone(), Some(self.tau));
        Ok(store)
    }

    /// Reads a classifier store. Rows are kept bit-for-bit.
    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let manifest = store.manifest();
        let classes = manifest
            .classes
            .clone()
            .ok_or_else(|| VcrError::Validation("classifier manifest has no `classes`".into()))?;
        let tau = manifest
            .tau
            .ok_or_else(|| VcrError::Validation("classifier manifest has no `tau`".into()))?;
        if classes.len() != store.len() {
            return Err(VcrError::Validation(format!(
                "{} classes but {} weight rows",
                classes.len(),
                store.len()
            )));
        }
        let rows: Vec<Vec<f32>> = (0..store.len()).map(|i| store.row(i).to_vec()).collect();
        let mut clf = build_text_classifier(classes, rows.clone(), tau)?;
        clf.weights = rows
            .into_iter()
            .map(FeatureVector::from_unit)
            .collect::<Result<Vec<_>>>()?;
        Ok(clf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_embedding_file(&self.to_store()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&load_embedding_file(path)?)
    }

    /// Same weights and names with a different temperature.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            tau,
            ..self.clone()
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(VcrError::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Builds a classifier, re-normalizing every row.
pub fn build_text_classifier(
    class_names: Vec<String>,
    weights: Vec<Vec<f32>>,
    tau: f64,
) -> Result<TextClassifier> {
    if class_names.len() < 2 {
        return Err(VcrError::invalid(format!(
            "a classifier needs at least 2 classes, got {}",
            class_names.len()
        )));
    }
    if weights.len() != class_names.len() {
        return Err(VcrError::invalid(format!(
            "{} weight rows for {} classes",
            weights.len(),
            class_names.len()
        )));
    }
    check_tau(tau)?;
    let mut seen = HashSet::new();
    for name in &class_names {
        if !seen.insert(name.as_str()) {
            return Err(VcrError::Validation(format!("duplicate class name `{name}`")));
        }
    }
    let dim = weights[0].len();
    if let Some(i) = weights.iter().position(|w| w.len() != dim) {
        return Err(VcrError::invalid(format!(
            "weight row {i} has dimension {} but row 0 has {dim}",
            weights[i].len()
        )));
    }
    let weights = weights
        .iter()
        .map(|w| FeatureVector::normalize(w))
        .collect::<Result<Vec<_>>>()?;
    Ok(TextClassifier {
        class_names,
        weights,
        tau,
    })
}
