//! Training-free and gradient-trained cache classifiers.
//!
//! The cache holds few-shot training features as keys and their one-hot
//! labels as values. A query's cache logits are
//! `φ(cos⟨f, keys⟩) · values` with `φ(z) = exp(−β(1 − z))`, and the final
//! prediction adds them to the zero-shot logits with weight `α`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{
    dot, load_embedding_file, write_embedding_file, AdapterParams, EmbeddingStore, FeatureVector,
    TextClassifier,
};
use crate::error::{Result, VcrError};
use crate::refine::{zero_shot_logits, Logits};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    keys: Vec<FeatureVector>,
    labels: Vec<usize>,
    class_count: usize,
}

impl CacheModel {
    pub fn keys(&self) -> &[FeatureVector] {
        &self.keys
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys[0].dim()
    }

    /// The `N × C` one-hot value matrix.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|&l| {
                let mut row = vec![0.0; self.class_count];
                row[l] = 1.0;
                row
            })
            .collect()
    }

    /// Number of keys per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_store(&self, params: Option<AdapterParams>) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(self.dim())?;
        for k in &self.keys {
            store.push_row(k.as_slice())?;
        }
        store.set_labels(self.labels.clone(), params);
        store
            .manifest_mut_extra()
            .insert("class_count".into(), self.class_count.into());
        Ok(store)
    }

    pub fn from_store(store: &EmbeddingStore) -> Result<(Self, Option<AdapterParams>)> {
        let manifest = store.manifest();
        let labels = manifest
            .labels
            .clone()
            .ok_or_else(|| VcrError::Validation("cache manifest has no `labels`".into()))?;
        if labels.len() != store.len() {
            return Err(VcrError::Validation(format!(
                "{} labels for {} cache rows",
                labels.len(),
                store.len()
            )));
        }
        let class_count = match manifest.extra.get("class_count") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| VcrError::Validation("`class_count` must be an integer".into()))?
                as usize,
            None => labels.iter().max().map_or(0, |m| m + 1),
        };
        let features = (0..store.len())
            .map(|i| FeatureVector::from_unit(store.row(i).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((build_cache(features, labels, class_count)?, manifest.adapter))
    }

    pub fn save(&self, path: impl AsRef<Path>, params: Option<AdapterParams>) -> Result<()> {
        write_embedding_file(&self.to_store(params)?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<AdapterParams>)> {
        Self::from_store(&load_embedding_file(path)?)
    }
}

pub fn build_cache(features: Vec<FeatureVector>, labels: Vec<usize>, class_count: usize) -> Result<CacheModel> {
    if features.is_empty() {
        return Err(VcrError::invalid("cache needs at least one training sample"));
    }
    if features.len() != labels.len() {
        return Err(VcrError::invalid(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(VcrError::invalid(format!("label {bad} out of range for {class_count} classes")));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(VcrError::invalid("cache features have mixed dimensions"));
    }
    Ok(CacheModel {
        keys: features,
        labels,
        class_count,
    })
}

/// `φ(z) = exp(−β(1 − z))`.
pub fn affinity(z: f64, beta: f64) -> f64 {
    (-beta * (1.0 - z)).exp()
}

pub fn cache_logits(feature: &FeatureVector, cache: &CacheModel, beta: f64) -> Result<Logits> {
    if feature.dim() != cache.dim() {
        return Err(VcrError::invalid(format!(
            "feature dimension {} does not match cache dimension {}",
            feature.dim(),
            cache.dim()
        )));
    }
    let mut out = vec![0.0; cache.class_count];
    for (key, &label) in cache.keys.iter().zip(&cache.labels) {
        out[label] += affinity(dot(feature.as_slice(), key.as_slice()), beta);
    }
    Logits::new(out)
}

/// `clip + α · cache`.
pub fn adapter_logits(clip: &Logits, cache: &Logits, alpha: f64) -> Result<Logits> {
    if clip.len() != cache.len() {
        return Err(VcrError::invalid(format!(
            "zero-shot logits have {} classes but cache logits have {}",
            clip.len(),
            cache.len()
        )));
    }
    Logits::new(
        clip.values()
            .iter()
            .zip(cache.values())
            .map(|(c, k)| c + alpha * k)
            .collect(),
    )
}

/// Ranges for the `(α, β)` search. Each axis is sampled at `steps` evenly
/// spaced points including both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alpha: (0.1, 5.0),
            beta: (1.0, 10.0),
            steps: 20,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(VcrError::invalid("grid needs at least one step"));
        }
        let (a0, a1) = self.alpha;
        let (b0, b1) = self.beta;
        if !(a0 >= 0.0 && a0 <= a1) {
            return Err(VcrError::invalid(format!("alpha range [{a0}, {a1}] invalid")));
        }
        if !(b0 > 0.0 && b0 <= b1) {
            return Err(VcrError::invalid(format!("beta range [{b0}, {b1}] invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub alpha: f64,
    pub beta: f64,
    pub grid: Option<GridSpec>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            grid: None,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(VcrError::invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(VcrError::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if let Some(grid) = &self.grid {
            grid.validate()?;
        }
        Ok(())
    }
}

pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![lo],
        _ => (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    }
}

/// Zero-shot prediction, or cache-adapted when a cache is given.
pub fn predict(
    feature: &FeatureVector,
    clf: &TextClassifier,
    cache: Option<&CacheModel>,
    alpha: f64,
    beta: f64,
) -> Result<usize> {
    let clip = zero_shot_logits(feature, clf)?;
    match cache {
        Some(cache) => Ok(adapter_logits(&clip, &cache_logits(feature, cache, beta)?, alpha)?.argmax()),
        None => Ok(clip.argmax()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
}

/// Exhaustive `(α, β)` search maximizing validation accuracy. Ties go to the
/// smallest α, then the smallest β.
pub fn grid_search(
    cache: &CacheModel,
    clf: &TextClassifier,
    validation: &[(FeatureVector, usize)],
    grid: &GridSpec,
) -> Result<GridResult> {
    if validation.is_empty() {
        return Err(VcrError::invalid("grid search needs a non-empty validation set"));
    }
    grid.validate()?;
    let prepared = validation
        .iter()
        .map(|(f, label)| {
            let clip = zero_shot_logits(f, clf)?;
            if f.dim() != cache.dim() {
                return Err(VcrError::invalid("validation feature dimension does not match cache"));
            }
            let sims: Vec<f64> = cache.keys.iter().map(|k| dot(f.as_slice(), k.as_slice())).collect();
            Ok((clip, sims, *label))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<GridResult> = None;
    let mut scores = vec![0.0; cache.class_count];
    for &alpha in &linspace(grid.alpha.0, grid.alpha.1, grid.steps) {
        for &beta in &linspace(grid.beta.0, grid.beta.1, grid.steps) {
            let mut correct = 0usize;
            for (clip, sims, label) in &prepared {
                scores.iter_mut().for_each(|s| *s = 0.0);
                for (&sim, &l) in sims.iter().zip(&cache.labels) {
                    scores[l] += affinity(sim, beta);
                }
                let logits: Vec<f64> = clip
                    .values()
                    .iter()
                    .zip(&scores)
                    .map(|(c, k)| c + alpha * k)
                    .collect();
                if Logits::new(logits)?.argmax() == *label {
                    correct += 1;
                }
            }
            let accuracy = correct as f64 / prepared.len() as f64;
            if best.is_none_or(|b| accuracy > b.accuracy) {
                best = Some(GridResult { alpha, beta, accuracy });
            }
        }
    }
    Ok(best.expect("grid has at least one point"))
}

/// Mean cross-entropy of `softmax(clip + α·φ(x·K)·L)` over `train`, and its
/// gradient with respect to every key entry.
///
/// Keys are used as given (no normalization inside), so the gradient is
/// exact for the function evaluated here.
pub fn cache_loss_and_grad(
    keys: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    clip: &[Vec<f64>],
    train: &[(Vec<f64>, usize)],
    alpha: f64,
    beta: f64,
) -> (f64, Vec<Vec<f64>>) {
    let n = train.len() as f64;
    let dim = keys.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; dim]; keys.len()];
    let mut loss = 0.0;
    let mut logits = vec![0.0; class_count];
    let mut phis = vec![0.0; keys.len()];
    for ((x, y), clip) in train.iter().zip(clip) {
        logits.copy_from_slice(clip);
        for (j, (k, &l)) in keys.iter().zip(labels).enumerate() {
            let z: f64 = x.iter().zip(k).map(|(a, b)| a * b).sum();
            phis[j] = affinity(z, beta);
            logits[l] += alpha * phis[j];
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[*y];
        for (j, &l) in labels.iter().enumerate() {
            let p = (logits[l] - lse).exp();
            let residual = p - if l == *y { 1.0 } else { 0.0 };
            let coeff = alpha * beta * phis[j] * residual / n;
            for (g, xi) in grad[j].iter_mut().zip(x) {
                *g += coeff * xi;
            }
        }
    }
    (loss / n, grad)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cache: CacheModel,
    /// Loss before each step, then after the last one (`epochs + 1` values).
    pub losses: Vec<f64>,
}

/// Fine-tunes cache keys by full-batch gradient descent. Values stay frozen
/// and keys are re-normalized after every step. Runs single-threaded in a
/// fixed order, so the result does not depend on the thread pool.
pub fn train_cache_keys(
    cache: &CacheModel,
    clf: &TextClassifier,
    train: &[(FeatureVector, usize)],
    config: &AdapterConfig,
    lr: f64,
    epochs: usize,
) -> Result<TrainOutcome> {
    if epochs == 0 {
        return Ok(TrainOutcome {
            cache: cache.clone(),
            losses: vec![],
        });
    }
    if !(lr > 0.0) {
        return Err(VcrError::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if train.is_empty() {
        return Err(VcrError::invalid("training set is empty"));
    }
    config.validate()?;
    if let Some((_, bad)) = train.iter().find(|(_, l)| *l >= cache.class_count) {
        return Err(VcrError::invalid(format!("training label {bad} out of range")));
    }
    let clip = train
        .iter()
        .map(|(f, _)| zero_shot_logits(f, clf).map(|l| l.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<(Vec<f64>, usize)> = train.iter().map(|(f, l)| (f.to_f64(), *l)).collect();
    let mut keys: Vec<Vec<f64>> = cache.keys.iter().map(FeatureVector::to_f64).collect();
    let mut losses = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (loss, grad) =
            cache_loss_and_grad(&keys, &cache.labels, cache.class_count, &clip, &samples, config.alpha, config.beta);
        losses.push(loss);
        for (k, g) in keys.iter_mut().zip(&grad) {
            for (kv, gv) in k.iter_mut().zip(g) {
                *kv -= lr * gv;
            }
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            k.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let (loss, _) =
        cache_loss_and_grad(&keys, &cache.labels, cache.class_count, &clip, &samples, config.alpha, config.beta);
    losses.push(loss);
    let keys = keys
        .iter()
        .map(|k| FeatureVector::from_f64(k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome {
        cache: CacheModel {
            keys,
            labels: cache.labels.clone(),
            class_count: cache.class_count,
        },
        losses,
    })
}
