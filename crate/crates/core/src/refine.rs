//! Zero-shot scoring, prediction margins, per-scale view selection and
//! scale-weighted feature merging.

use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, Encoder, FeatureVector, ScaleChoice, SelectionRecord, TextClassifier};
use crate::error::{Result, VcrError};
use crate::geometry::{self, CropRect, ScaleSet, View, ViewSet};
use crate::rng::{self, Stream};

/// Raw classification scores, `cos / τ` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(VcrError::invalid("logits must have at least one class"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VcrError::invalid(format!("non-finite logit at class {i}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

pub fn zero_shot_logits(feature: &FeatureVector, clf: &TextClassifier) -> Result<Logits> {
    if feature.dim() != clf.dim() {
        return Err(VcrError::invalid(format!(
            "feature dimension {} does not match classifier dimension {}",
            feature.dim(),
            clf.dim()
        )));
    }
    let inv_tau = 1.0 / clf.tau();
    Logits::new(
        clf.weights()
            .iter()
            .map(|w| dot(feature.as_slice(), w.as_slice()) * inv_tau)
            .collect(),
    )
}

/// Top-1 minus top-2 of the raw logits.
pub fn prediction_margin(logits: &Logits) -> Result<f64> {
    if logits.len() < 2 {
        return Err(VcrError::invalid("margin needs at least 2 classes"));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in logits.values() {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(first - second)
}

/// Natural-log Shannon entropy of `softmax(logits)`.
///
/// Evaluated as `Σ p_i · (lse − l_i)` with a shifted log-sum-exp so that
/// nearly one-hot distributions keep full relative precision.
pub fn softmax_entropy(logits: &Logits) -> f64 {
    let max = logits.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gaps: Vec<f64> = logits.values().iter().map(|&l| max - l).collect();
    let tail: f64 = gaps.iter().filter(|&&g| g > 0.0).map(|&g| (-g).exp()).sum();
    let ties = gaps.iter().filter(|&&g| g == 0.0).count() as f64;
    // lse − max
    let lse = (ties + tail).ln();
    let z = ties + tail;
    gaps.iter().map(|&g| (-g).exp() / z * (lse + g)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MaxMargin,
    MinMargin,
    MinEntropy,
    Random,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::MaxMargin => "max_margin",
            Criterion::MinMargin => "min_margin",
            Criterion::MinEntropy => "min_entropy",
            Criterion::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "max_margin" => Ok(Criterion::MaxMargin),
            "min_margin" => Ok(Criterion::MinMargin),
            "min_entropy" => Ok(Criterion::MinEntropy),
            "random" => Ok(Criterion::Random),
            _ => Err(VcrError::invalid(format!("unknown criterion `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `Σ s_i f_i / Σ s_i`.
    ScaleWeighted,
    /// Plain mean of the selected features.
    Uniform,
    /// The global feature alone.
    GlobalOnly,
}

impl Weighting {
    pub fn name(&self) -> &'static str {
        match self {
            Weighting::ScaleWeighted => "scale_weighted",
            Weighting::Uniform => "uniform",
            Weighting::GlobalOnly => "global_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "scale" | "scale_weighted" => Ok(Weighting::ScaleWeighted),
            "uniform" => Ok(Weighting::Uniform),
            "global" | "global_only" => Ok(Weighting::GlobalOnly),
            _ => Err(VcrError::invalid(format!("unknown weighting `{s}`"))),
        }
    }
}

/// Picks one view out of `view_logits` and returns `(index, score)`.
///
/// The score is the margin for margin criteria, the entropy for
/// `MinEntropy`, and the chosen view's margin for `Random`. Deterministic
/// criteria break ties toward the lowest index.
pub fn select_view(view_logits: &[Logits], criterion: Criterion, tie_seed: u64) -> Result<(usize, f64)> {
    let first = view_logits
        .first()
        .ok_or_else(|| VcrError::invalid("cannot select from an empty view list"))?;
    let classes = first.len();
    if classes < 2 || view_logits.iter().any(|l| l.len() != classes) {
        return Err(VcrError::invalid("all views need the same number (≥ 2) of classes"));
    }
    let pick = |scores: Vec<f64>, better: fn(f64, f64) -> bool| {
        let mut best = 0;
        for i in 1..scores.len() {
            if better(scores[i], scores[best]) {
                best = i;
            }
        }
        (best, scores[best])
    };
    let margins = || -> Result<Vec<f64>> { view_logits.iter().map(prediction_margin).collect() };
    Ok(match criterion {
        Criterion::MaxMargin => pick(margins()?, |a, b| a > b),
        Criterion::MinMargin => pick(margins()?, |a, b| a < b),
        Criterion::MinEntropy => pick(view_logits.iter().map(softmax_entropy).collect(), |a, b| a < b),
        Criterion::Random => {
            let k = Stream::new(tie_seed, 0).below(view_logits.len() as u64) as usize;
            (k, prediction_margin(&view_logits[k])?)
        }
    })
}

fn check_merge_inputs(selected: &[(f64, FeatureVector)]) -> Result<usize> {
    let (_, first) = selected
        .first()
        .ok_or_else(|| VcrError::invalid("cannot merge an empty feature list"))?;
    let dim = first.dim();
    for (i, (scale, f)) in selected.iter().enumerate() {
        if f.dim() != dim {
            return Err(VcrError::invalid(format!(
                "feature {i} has dimension {} but feature 0 has {dim}",
                f.dim()
            )));
        }
        if !(*scale > 0.0 && *scale <= 1.0) {
            return Err(VcrError::invalid(format!("scale {scale} outside (0, 1]")));
        }
        if selected[..i].iter().any(|(s, _)| s == scale) {
            return Err(VcrError::invalid(format!("scale {scale} appears twice")));
        }
    }
    Ok(dim)
}

/// The weighted combination before normalization. Not defined for
/// `GlobalOnly`, which does not combine anything.
pub fn merge_unnormalized(selected: &[(f64, FeatureVector)], weighting: Weighting) -> Result<Vec<f64>> {
    let dim = check_merge_inputs(selected)?;
    let weights: Vec<f64> = match weighting {
        Weighting::ScaleWeighted => {
            let total: f64 = selected.iter().map(|(s, _)| s).sum();
            selected.iter().map(|(s, _)| s / total).collect()
        }
        Weighting::Uniform => vec![1.0 / selected.len() as f64; selected.len()],
        Weighting::GlobalOnly => {
            return Err(VcrError::invalid("global-only weighting does not combine features"))
        }
    };
    let mut acc = vec![0.0f64; dim];
    for ((_, f), w) in selected.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(f.as_slice()) {
            *a += w * f64::from(v);
        }
    }
    Ok(acc)
}

/// Merges per-scale features into one unit vector.
///
/// A single entry, or the scale-1 entry under `GlobalOnly`, is returned
/// unchanged.
pub fn merge_features(selected: &[(f64, FeatureVector)], weighting: Weighting) -> Result<FeatureVector> {
    check_merge_inputs(selected)?;
    if weighting == Weighting::GlobalOnly {
        return selected
            .iter()
            .find(|(s, _)| *s == 1.0)
            .map(|(_, f)| f.clone())
            .ok_or_else(|| VcrError::invalid("global-only weighting needs a scale-1 feature"));
    }
    if selected.len() == 1 {
        return Ok(selected[0].1.clone());
    }
    FeatureVector::from_f64(&merge_unnormalized(selected, weighting)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSelection {
    pub scale: f64,
    pub k: usize,
    pub margin: f64,
    pub score: f64,
    pub crop: CropRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub criterion: Criterion,
    pub per_scale: Vec<ScaleSelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedFeature {
    pub vector: FeatureVector,
    pub selection: SelectionResult,
    pub weighting: Weighting,
}

impl RefinedFeature {
    pub fn to_record(&self) -> SelectionRecord {
        SelectionRecord {
            criterion: self.selection.criterion.name().to_string(),
            weighting: self.weighting.name().to_string(),
            scales: self
                .selection
                .per_scale
                .iter()
                .map(|s| ScaleChoice {
                    scale: s.scale,
                    k: s.k,
                    margin: s.margin,
                    score: s.score,
                    crop: s.crop.as_array(),
                })
                .collect(),
        }
    }
}

/// Salt separating view-selection draws from crop-sampling draws.
const SELECT_TAG: u64 = 0x73656c;

/// Every view of one image's decomposition, encoded and scored once.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    views: ViewSet,
    image_seed: u64,
    local_features: Vec<Vec<FeatureVector>>,
    local_logits: Vec<Vec<Logits>>,
    global_feature: FeatureVector,
    global_logits: Logits,
}

impl EncodedImage {
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        backend: &dyn Encoder,
        clf: &TextClassifier,
        image_id: &str,
        dims: (u32, u32),
        scale_set: &ScaleSet,
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        let views = geometry::decompose(image_id, dims.0, dims.1, scale_set, m, seed)?;
        let mut local_features = Vec::with_capacity(views.local().len());
        let mut local_logits = Vec::with_capacity(views.local().len());
        for sv in views.local() {
            let feats = sv
                .crops
                .iter()
                .map(|&c| backend.encode(image_id, View::Crop(c)))
                .collect::<Result<Vec<_>>>()?;
            let logits = feats
                .iter()
                .map(|f| zero_shot_logits(f, clf))
                .collect::<Result<Vec<_>>>()?;
            local_features.push(feats);
            local_logits.push(logits);
        }
        let global_feature = backend.encode(image_id, View::Global)?;
        let global_logits = zero_shot_logits(&global_feature, clf)?;
        Ok(Self {
            views,
            image_seed: rng::image_seed(seed, image_id),
            local_features,
            local_logits,
            global_feature,
            global_logits,
        })
    }

    pub fn views(&self) -> &ViewSet {
        &self.views
    }

    pub fn image_seed(&self) -> u64 {
        self.image_seed
    }

    pub fn local_features(&self) -> &[Vec<FeatureVector>] {
        &self.local_features
    }

    pub fn local_logits(&self) -> &[Vec<Logits>] {
        &self.local_logits
    }

    pub fn global_feature(&self) -> &FeatureVector {
        &self.global_feature
    }

    pub fn global_logits(&self) -> &Logits {
        &self.global_logits
    }

    /// Seed for the random draw at local scale `scale_pos` in repetition `rep`.
    pub fn selection_seed(&self, rep: u64, scale_pos: usize) -> u64 {
        rng::derive(self.image_seed, &[SELECT_TAG, rep, scale_pos as u64])
    }

    /// Selects one view per local scale.
    pub fn select(&self, criterion: Criterion, rep: u64) -> Result<SelectionResult> {
        let mut per_scale = Vec::with_capacity(self.local_logits.len());
        for (i, (logits, sv)) in self.local_logits.iter().zip(self.views.local()).enumerate() {
            let (k, score) = select_view(logits, criterion, self.selection_seed(rep, i))?;
            per_scale.push(ScaleSelection {
                scale: sv.scale,
                k,
                margin: prediction_margin(&logits[k])?,
                score,
                crop: sv.crops[k],
            });
        }
        Ok(SelectionResult {
            criterion,
            per_scale,
        })
    }

    /// Selection followed by merging with the untouched global view.
    pub fn refine(&self, criterion: Criterion, weighting: Weighting, rep: u64) -> Result<RefinedFeature> {
        let selection = self.select(criterion, rep)?;
        let mut selected: Vec<(f64, FeatureVector)> = selection
            .per_scale
            .iter()
            .zip(&self.local_features)
            .map(|(s, feats)| (s.scale, feats[s.k].clone()))
            .collect();
        selected.push((self.views.global().scale, self.global_feature.clone()));
        Ok(RefinedFeature {
            vector: merge_features(&selected, weighting)?,
            selection,
            weighting,
        })
    }
}

/// Full refinement of one image: decompose, encode, score, select, merge.
#[allow(clippy::too_many_arguments)]
pub fn refine_image(
    backend: &dyn Encoder,
    clf: &TextClassifier,
    image_id: &str,
    dims: (u32, u32),
    scale_set: &ScaleSet,
    m: usize,
    criterion: Criterion,
    weighting: Weighting,
    seed: u64,
) -> Result<RefinedFeature> {
    EncodedImage::encode(backend, clf, image_id, dims, scale_set, m, seed)?.refine(criterion, weighting, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::build_text_classifier;
    use proptest::prelude::*;

    fn logits(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    fn eye_classifier(c: usize, d: usize, tau: f64) -> TextClassifier {
        let weights = (0..c)
            .map(|i| {
                let mut w = vec![0.0f32; d];
                w[i] = 1.0;
                w
            })
            .collect();
        build_text_classifier((0..c).map(|i| format!("c{i}")).collect(), weights, tau).unwrap()
    }

    fn unit(v: &[f32]) -> FeatureVector {
        FeatureVector::normalize(v).unwrap()
    }

    #[test]
    fn cosine_identity_logits() {
        let clf = eye_classifier(3, 4, 1.0);
        let l = zero_shot_logits(&unit(&[1.0, 0.0, 0.0, 0.0]), &clf).unwrap();
        assert_eq!(l.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn halving_tau_doubles_logits() {
        let f = unit(&[0.3, -0.5, 0.2, 0.7]);
        let a = zero_shot_logits(&f, &eye_classifier(3, 4, 1.0)).unwrap();
        let b = zero_shot_logits(&f, &eye_classifier(3, 4, 0.5)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let clf = eye_classifier(2, 4, 1.0);
        assert!(zero_shot_logits(&unit(&[1.0, 0.0]), &clf).is_err());
    }

    #[test]
    fn margins() {
        assert_eq!(prediction_margin(&logits(&[3.0, 1.0, 0.5])).unwrap(), 2.0);
        assert_eq!(prediction_margin(&logits(&[2.0, 2.0, 2.0])).unwrap(), 0.0);
        assert_eq!(prediction_margin(&logits(&[0.5, 3.0, 3.0])).unwrap(), 0.0);
        assert!(prediction_margin(&logits(&[1.0])).is_err());
    }

    #[test]
    fn selection_rules() {
        let views = vec![logits(&[1.5, 1.0]), logits(&[3.0, 1.0]), logits(&[2.0, 1.0])];
        assert_eq!(select_view(&views, Criterion::MaxMargin, 0).unwrap(), (1, 2.0));
        assert_eq!(select_view(&views, Criterion::MinMargin, 0).unwrap(), (0, 0.5));
        let flat = vec![logits(&[1.0, 0.0]), logits(&[2.0, 1.0]), logits(&[5.0, 4.0])];
        assert_eq!(select_view(&flat, Criterion::MaxMargin, 0).unwrap().0, 0);
        assert_eq!(select_view(&flat, Criterion::MinEntropy, 0).unwrap().0, 0);
        assert!(select_view(&[], Criterion::MaxMargin, 0).is_err());
        assert!(select_view(&[logits(&[1.0, 2.0]), logits(&[1.0])], Criterion::MaxMargin, 0).is_err());
    }

    #[test]
    fn random_selection_is_seeded() {
        let views: Vec<Logits> = (0..10).map(|i| logits(&[i as f64, 0.0])).collect();
        let a = select_view(&views, Criterion::Random, 42).unwrap();
        let b = select_view(&views, Criterion::Random, 42).unwrap();
        assert_eq!(a, b);
        let picks: std::collections::HashSet<usize> =
            (0..50).map(|s| select_view(&views, Criterion::Random, s).unwrap().0).collect();
        assert!(picks.len() > 3);
    }

    #[test]
    fn entropy_matches_naive_softmax() {
        for v in [vec![0.0, 0.0], vec![1.0, 2.0, 3.0], vec![-4.0, 10.0, 9.5, 0.0]] {
            let l = logits(&v);
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            let naive: f64 = v.iter().map(|x| x.exp() / z).map(|p| -p * p.ln()).sum();
            assert!((softmax_entropy(&l) - naive).abs() < 1e-12);
        }
        assert!((softmax_entropy(&logits(&[7.0, 7.0])) - 2f64.ln()).abs() < 1e-15);
        // saturated distributions stay positive and ordered
        let sharp = softmax_entropy(&logits(&[100.0, 0.0]));
        let sharper = softmax_entropy(&logits(&[120.0, 0.0]));
        assert!(sharp > 0.0 && sharper > 0.0 && sharper < sharp);
    }

    #[test]
    fn merge_examples() {
        let v = unit(&[0.6, 0.8]);
        let same = vec![(0.5, v.clone()), (1.0, v.clone())];
        let m = merge_features(&same, Weighting::ScaleWeighted).unwrap();
        assert!((m.cosine(&v) - 1.0).abs() < 1e-6);

        let pair = vec![(0.5, unit(&[1.0, 0.0])), (1.0, unit(&[0.0, 1.0]))];
        let m = merge_features(&pair, Weighting::ScaleWeighted).unwrap();
        let n = (1.0f64 / 9.0 + 4.0 / 9.0).sqrt();
        assert!((f64::from(m.as_slice()[0]) - (1.0 / 3.0) / n).abs() < 1e-6);
        assert!((f64::from(m.as_slice()[1]) - (2.0 / 3.0) / n).abs() < 1e-6);
        let u = merge_features(&pair, Weighting::Uniform).unwrap();
        assert!((u.as_slice()[0] - u.as_slice()[1]).abs() < 1e-7);

        let single = vec![(1.0, unit(&[0.3, 0.4]))];
        for w in [Weighting::ScaleWeighted, Weighting::Uniform, Weighting::GlobalOnly] {
            assert_eq!(merge_features(&single, w).unwrap(), single[0].1);
        }
        assert_eq!(merge_features(&pair, Weighting::GlobalOnly).unwrap(), pair[1].1);
    }

    #[test]
    fn merge_errors() {
        assert!(merge_features(&[], Weighting::Uniform).is_err());
        let mixed = vec![(0.5, unit(&[1.0, 0.0])), (1.0, unit(&[0.0, 1.0, 0.0]))];
        assert!(merge_features(&mixed, Weighting::Uniform).is_err());
        let dup = vec![(0.5, unit(&[1.0, 0.0])), (0.5, unit(&[0.0, 1.0]))];
        assert!(merge_features(&dup, Weighting::Uniform).is_err());
        let no_global = vec![(0.5, unit(&[1.0, 0.0]))];
        assert!(merge_features(&no_global, Weighting::GlobalOnly).is_err());
    }

    #[test]
    fn names_round_trip() {
        for c in [Criterion::MaxMargin, Criterion::MinMargin, Criterion::MinEntropy, Criterion::Random] {
            assert_eq!(Criterion::parse(c.name()).unwrap(), c);
        }
        assert_eq!(Criterion::parse("max-margin").unwrap(), Criterion::MaxMargin);
        assert_eq!(Weighting::parse("scale").unwrap(), Weighting::ScaleWeighted);
        assert_eq!(Weighting::parse("global").unwrap(), Weighting::GlobalOnly);
        assert!(Weighting::parse("median").is_err());
    }

    fn arb_logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, c)
    }

    proptest! {
        #[test]
        fn margin_is_non_negative_and_shift_invariant(v in arb_logits(6), k in -100.0f64..100.0) {
            let m = prediction_margin(&logits(&v)).unwrap();
            prop_assert!(m >= 0.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
            prop_assert!((prediction_margin(&logits(&shifted)).unwrap() - m).abs() < 1e-9);
        }

        #[test]
        fn margin_scales_linearly(v in arb_logits(5), c in 0.01f64..100.0) {
            let m = prediction_margin(&logits(&v)).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let ms = prediction_margin(&logits(&scaled)).unwrap();
            prop_assert!((ms - c * m).abs() <= 1e-9 * (1.0 + c * m));
        }

        #[test]
        fn merged_vector_is_convex_and_bounded(
            raw in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 8), 1..8),
            uniform in any::<bool>(),
        ) {
            prop_assume!(raw.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
            let n = raw.len();
            let selected: Vec<(f64, FeatureVector)> = raw
                .iter()
                .enumerate()
                .map(|(i, v)| ((i + 1) as f64 / n as f64, unit(v)))
                .collect();
            let weighting = if uniform { Weighting::Uniform } else { Weighting::ScaleWeighted };
            let merged = merge_unnormalized(&selected, weighting).unwrap();
            let norm = merged.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm <= 1.0 + 1e-6);
            // each coordinate lies between the extremes of the inputs
            for (j, &mj) in merged.iter().enumerate() {
                let lo = selected.iter().map(|(_, f)| f64::from(f.as_slice()[j])).fold(f64::INFINITY, f64::min);
                let hi = selected.iter().map(|(_, f)| f64::from(f.as_slice()[j])).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mj >= lo - 1e-9 && mj <= hi + 1e-9);
            }
            if norm > 1e-6 {
                let out = merge_features(&selected, weighting).unwrap();
                prop_assert!((out.norm() - 1.0).abs() <= 1e-4);
            }
        }
    }
}
