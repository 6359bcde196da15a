//! Ablation modes and the evaluation loop shared by few-shot, ablation and
//! domain-generalization runs.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetManifest;
use super::episode::Episode;
use super::metrics::evaluate;
use crate::adapter::{self, build_cache, grid_search, train_cache_keys, AdapterConfig, CacheModel};
use crate::embeddings::{Encoder, FeatureVector, TextClassifier};
use crate::error::{Result, VcrError};
use crate::geometry::{self, build_scale_set, View};
use crate::refine::{Criterion, EncodedImage, Weighting};
use crate::rng::{self, Stream};

/// Number of runs averaged for modes that involve random view choices.
pub const RANDOM_REPEATS: usize = 10;

/// How a test image is turned into the feature that gets classified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// The global view only.
    GlobalBaseline,
    /// Four corners and center, each also flipped, averaged.
    TenCrop,
    /// `m` views drawn from random scales of the decomposition, averaged.
    MultiCropAvg,
    /// One random view at a single scale.
    PerScale(f64),
    /// One random view per local scale plus the global view, averaged.
    RandomPerScaleAvg,
    /// Max-margin view per local scale plus the global view, averaged.
    SelectedUniformAvg,
    /// Max-margin view per local scale plus the global view, scale weighted.
    SelectedScaleWeighted,
    /// Scale-weighted merge with the given selection criterion.
    Criterion(Criterion),
    /// Max-margin, scale-weighted, with a different number of scales.
    Scales(usize),
    /// The run's configured criterion and weighting.
    Configured,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(v) = s.strip_prefix("per_scale:") {
            let scale: f64 = v
                .parse()
                .map_err(|_| VcrError::invalid(format!("bad scale in mode `{s}`")))?;
            return Ok(Mode::PerScale(scale));
        }
        if let Some(v) = s.strip_prefix("n:") {
            let n: usize = v
                .parse()
                .map_err(|_| VcrError::invalid(format!("bad scale count in mode `{s}`")))?;
            if n == 0 {
                return Err(VcrError::invalid("mode `n:0` needs at least one scale"));
            }
            return Ok(Mode::Scales(n));
        }
        Ok(match s {
            "global_baseline" => Mode::GlobalBaseline,
            "ten_crop" => Mode::TenCrop,
            "multi_crop_avg" => Mode::MultiCropAvg,
            "random_per_scale_avg" => Mode::RandomPerScaleAvg,
            "selected_uniform_avg" => Mode::SelectedUniformAvg,
            "selected_scale_weighted" => Mode::SelectedScaleWeighted,
            "vcr" => Mode::Configured,
            other => match Criterion::parse(other) {
                Ok(c) => Mode::Criterion(c),
                Err(_) => return Err(VcrError::invalid(format!("unknown mode `{other}`"))),
            },
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Mode::parse).collect()
    }

    pub fn name(&self) -> String {
        match self {
            Mode::GlobalBaseline => "global_baseline".into(),
            Mode::TenCrop => "ten_crop".into(),
            Mode::MultiCropAvg => "multi_crop_avg".into(),
            Mode::PerScale(s) => format!("per_scale:{s}"),
            Mode::RandomPerScaleAvg => "random_per_scale_avg".into(),
            Mode::SelectedUniformAvg => "selected_uniform_avg".into(),
            Mode::SelectedScaleWeighted => "selected_scale_weighted".into(),
            Mode::Criterion(c) => c.name().into(),
            Mode::Scales(n) => format!("n:{n}"),
            Mode::Configured => "vcr".into(),
        }
    }

    /// Criterion and weighting recorded in reports.
    pub fn descriptor(&self, config: &EvalConfig) -> (Option<Criterion>, Weighting, usize) {
        match *self {
            Mode::GlobalBaseline => (None, Weighting::GlobalOnly, config.n),
            Mode::TenCrop | Mode::MultiCropAvg => (None, Weighting::Uniform, config.n),
            Mode::PerScale(_) => (Some(Criterion::Random), Weighting::Uniform, config.n),
            Mode::RandomPerScaleAvg => (Some(Criterion::Random), Weighting::Uniform, config.n),
            Mode::SelectedUniformAvg => (Some(Criterion::MaxMargin), Weighting::Uniform, config.n),
            Mode::SelectedScaleWeighted => (Some(Criterion::MaxMargin), Weighting::ScaleWeighted, config.n),
            Mode::Criterion(c) => (Some(c), Weighting::ScaleWeighted, config.n),
            Mode::Scales(n) => (Some(Criterion::MaxMargin), Weighting::ScaleWeighted, n),
            Mode::Configured => (Some(config.criterion), config.weighting, config.n),
        }
    }

    pub fn is_random(&self, config: &EvalConfig) -> bool {
        match self {
            Mode::MultiCropAvg | Mode::PerScale(_) | Mode::RandomPerScaleAvg => true,
            Mode::Criterion(c) => *c == Criterion::Random,
            Mode::Configured => config.criterion == Criterion::Random,
            _ => false,
        }
    }

    fn repeats(&self, config: &EvalConfig) -> usize {
        if self.is_random(config) {
            config.repeats
        } else {
            1
        }
    }

    /// Number of scales whose decomposition the mode reads, if any.
    fn decomposition(&self, config: &EvalConfig) -> Option<usize> {
        match self {
            Mode::GlobalBaseline | Mode::TenCrop => None,
            Mode::Scales(n) => Some(*n),
            _ => Some(config.n),
        }
    }
}

/// Modes of the component ablation: baseline, ten-crop, random per-scale
/// average, max-margin average, max-margin scale-weighted.
pub fn component_modes() -> Vec<Mode> {
    vec![
        Mode::GlobalBaseline,
        Mode::TenCrop,
        Mode::RandomPerScaleAvg,
        Mode::SelectedUniformAvg,
        Mode::SelectedScaleWeighted,
    ]
}

/// Selection-criterion comparison.
pub fn criterion_modes() -> Vec<Mode> {
    vec![
        Mode::GlobalBaseline,
        Mode::Criterion(Criterion::MinMargin),
        Mode::Criterion(Criterion::MinEntropy),
        Mode::Criterion(Criterion::MaxMargin),
    ]
}

/// Every ablation: components, one random view per scale, multi-crop,
/// criteria and the 5/10/20 scale counts.
pub fn full_matrix(n: usize) -> Result<Vec<Mode>> {
    let mut modes = component_modes();
    modes.push(Mode::MultiCropAvg);
    for &s in build_scale_set(n)?.scales() {
        modes.push(Mode::PerScale(s));
    }
    modes.extend([
        Mode::Criterion(Criterion::MinMargin),
        Mode::Criterion(Criterion::MinEntropy),
        Mode::Criterion(Criterion::MaxMargin),
        Mode::Criterion(Criterion::Random),
        Mode::Scales(5),
        Mode::Scales(10),
        Mode::Scales(20),
    ]);
    Ok(modes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n: usize,
    pub m: usize,
    pub criterion: Criterion,
    pub weighting: Weighting,
    pub seed: u64,
    pub adapter: AdapterConfig,
    /// Gradient steps on the cache keys; 0 keeps the cache training-free.
    pub epochs: usize,
    pub lr: f64,
    /// Refine training images with the configured pipeline before caching.
    pub refine_cache_keys: bool,
    /// Not serialized: results never depend on it.
    #[serde(skip_serializing, default = "one")]
    pub workers: usize,
    pub repeats: usize,
    /// Record wall time in reports (makes them non-reproducible byte-wise).
    pub timing: bool,
}

fn one() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 10,
            m: 100,
            criterion: Criterion::MaxMargin,
            weighting: Weighting::ScaleWeighted,
            seed: 0,
            adapter: AdapterConfig::default(),
            epochs: 0,
            lr: 0.01,
            refine_cache_keys: false,
            workers: 1,
            repeats: RANDOM_REPEATS,
            timing: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(VcrError::invalid("n must be at least 1"));
        }
        if self.m == 0 {
            return Err(VcrError::invalid("m must be at least 1"));
        }
        if self.workers == 0 {
            return Err(VcrError::invalid("workers must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(VcrError::invalid("repeats must be at least 1"));
        }
        if self.epochs > 0 && !(self.lr > 0.0) {
            return Err(VcrError::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.adapter.validate()
    }
}

/// Accuracy part of a report; equal results serialize to equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub top1_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean number of correct predictions over repeats.
    pub correct: f64,
    pub total: usize,
    /// Predictions of the first repeat, in test order.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub dataset: Option<String>,
    pub criterion: Option<Criterion>,
    pub weighting: Weighting,
    pub n: usize,
    pub m: usize,
    pub shots: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub repeats: usize,
    pub cache: String,
    pub validation: Option<String>,
    pub results: EvalResults,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Features and timing for one image under every requested mode.
struct ImageOutput {
    features: Vec<Vec<FeatureVector>>,
    time: Vec<Duration>,
}

const MULTI_CROP_TAG: u64 = 0x6d75_6c74;
const PER_SCALE_TAG: u64 = 0x7363_616c;

fn average(features: &[FeatureVector]) -> Result<FeatureVector> {
    let dim = features[0].dim();
    let mut acc = vec![0.0f64; dim];
    for f in features {
        for (a, &v) in acc.iter_mut().zip(f.as_slice()) {
            *a += f64::from(v);
        }
    }
    let n = features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FeatureVector::from_f64(&acc)
}

fn mode_features(
    mode: Mode,
    config: &EvalConfig,
    backend: &dyn Encoder,
    image_id: &str,
    dims: (u32, u32),
    encoded: Option<&EncodedImage>,
    global: &FeatureVector,
) -> Result<Vec<FeatureVector>> {
    let reps = mode.repeats(config) as u64;
    let enc = || encoded.expect("decomposition computed for this mode");
    match mode {
        Mode::GlobalBaseline => Ok(vec![global.clone()]),
        Mode::TenCrop => {
            let views = geometry::ten_crop_views(dims.0, dims.1)
                .into_iter()
                .map(|v| backend.encode(image_id, v))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![average(&views)?])
        }
        Mode::MultiCropAvg => {
            let e = enc();
            let scales = e.views().per_scale.len() as u64;
            (0..reps)
                .map(|rep| {
                    let mut s = Stream::new(rng::derive(e.image_seed(), &[MULTI_CROP_TAG, rep]), 0);
                    let picks = (0..config.m)
                        .map(|_| {
                            let pos = s.below(scales) as usize;
                            if pos + 1 == scales as usize {
                                global.clone()
                            } else {
                                let feats = &e.local_features()[pos];
                                feats[s.below(feats.len() as u64) as usize].clone()
                            }
                        })
                        .collect::<Vec<_>>();
                    average(&picks)
                })
                .collect()
        }
        Mode::PerScale(scale) => {
            let e = enc();
            let pos = e
                .views()
                .per_scale
                .iter()
                .position(|sv| (sv.scale - scale).abs() < 1e-9)
                .ok_or_else(|| VcrError::invalid(format!("scale {scale} is not in the {}-scale set", config.n)))?;
            if pos + 1 == e.views().per_scale.len() {
                return Ok(vec![global.clone(); reps as usize]);
            }
            let feats = &e.local_features()[pos];
            Ok((0..reps)
                .map(|rep| {
                    let seed = rng::derive(e.image_seed(), &[PER_SCALE_TAG, rep, pos as u64]);
                    feats[Stream::new(seed, 0).below(feats.len() as u64) as usize].clone()
                })
                .collect())
        }
        _ => {
            let (criterion, weighting, _) = mode.descriptor(config);
            let criterion = criterion.expect("selection modes carry a criterion");
            (0..reps)
                .map(|rep| Ok(enc().refine(criterion, weighting, rep)?.vector))
                .collect()
        }
    }
}

fn image_output(
    backend: &dyn Encoder,
    clf: &TextClassifier,
    image_id: &str,
    modes: &[Mode],
    config: &EvalConfig,
) -> Result<ImageOutput> {
    let dims = backend.image_dims(image_id)?;
    let mut encoded: BTreeMap<usize, (EncodedImage, Duration)> = BTreeMap::new();
    let started = Instant::now();
    let global = backend.encode(image_id, View::Global)?;
    let global_time = started.elapsed();
    let mut features = Vec::with_capacity(modes.len());
    let mut time = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut spent = global_time;
        let enc = match mode.decomposition(config) {
            Some(n) => {
                if let Entry::Vacant(slot) = encoded.entry(n) {
                    let t = Instant::now();
                    let scale_set = build_scale_set(n)?;
                    let e = EncodedImage::encode(backend, clf, image_id, dims, &scale_set, config.m, config.seed)?;
                    slot.insert((e, t.elapsed()));
                }
                let (e, t) = &encoded[&n];
                spent += *t;
                Some(e)
            }
            None => None,
        };
        let t = Instant::now();
        features.push(mode_features(mode, config, backend, image_id, dims, enc, &global)?);
        time.push(spent + t.elapsed());
    }
    Ok(ImageOutput { features, time })
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| VcrError::invalid(format!("cannot start {workers} workers: {e}")))
}

/// Per-image outputs in input order, whatever the worker count.
fn collect_outputs(
    pool: &rayon::ThreadPool,
    backend: &dyn Encoder,
    clf: &TextClassifier,
    ids: &[String],
    modes: &[Mode],
    config: &EvalConfig,
) -> Result<Vec<ImageOutput>> {
    pool.install(|| {
        ids.par_iter()
            .map(|id| image_output(backend, clf, id, modes, config))
            .collect()
    })
}

/// Builds the cache from the episode's training images, training the keys
/// when `config.epochs > 0`. Returns `None` for zero-shot episodes.
pub fn prepare_cache(
    train: &[(String, usize)],
    backend: &dyn Encoder,
    clf: &TextClassifier,
    config: &EvalConfig,
) -> Result<Option<CacheModel>> {
    if train.is_empty() {
        return Ok(None);
    }
    let mode = if config.refine_cache_keys {
        Mode::Configured
    } else {
        Mode::GlobalBaseline
    };
    let ids: Vec<String> = train.iter().map(|(id, _)| id.clone()).collect();
    let outputs = collect_outputs(&thread_pool(config.workers)?, backend, clf, &ids, &[mode], config)?;
    let features: Vec<FeatureVector> = outputs.into_iter().map(|mut o| o.features.remove(0).remove(0)).collect();
    let labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    let cache = build_cache(features.clone(), labels.clone(), clf.num_classes())?;
    if config.epochs == 0 {
        return Ok(Some(cache));
    }
    let pairs: Vec<(FeatureVector, usize)> = features.into_iter().zip(labels).collect();
    Ok(Some(train_cache_keys(&cache, clf, &pairs, &config.adapter, config.lr, config.epochs)?.cache))
}

fn cache_label(cache: Option<&CacheModel>, config: &EvalConfig) -> String {
    match (cache, config.epochs) {
        (None, _) => "none".into(),
        (Some(_), 0) => "training_free".into(),
        (Some(_), e) => format!("trained:{e}"),
    }
}

/// Validation items, their outputs and where they came from.
type Validation<'a> = (&'a [(String, usize)], &'a [ImageOutput], &'a str);

/// `(alpha, beta, validation source)` for one mode.
fn tune(
    cache: Option<&CacheModel>,
    clf: &TextClassifier,
    val: Option<Validation<'_>>,
    mode_index: usize,
    config: &EvalConfig,
) -> Result<(f64, f64, Option<String>)> {
    let (alpha, beta) = (config.adapter.alpha, config.adapter.beta);
    let (Some(cache), Some(grid), Some((items, outputs, source))) = (cache, &config.adapter.grid, val) else {
        return Ok((alpha, beta, None));
    };
    let set: Vec<(FeatureVector, usize)> = items
        .iter()
        .zip(outputs)
        .map(|((_, l), o)| (o.features[mode_index][0].clone(), *l))
        .collect();
    let best = grid_search(cache, clf, &set, grid)?;
    Ok((best.alpha, best.beta, Some(source.to_string())))
}

#[allow(clippy::too_many_arguments)]
fn score_mode(
    mode: Mode,
    mode_index: usize,
    items: &[(String, usize)],
    outputs: &[ImageOutput],
    clf: &TextClassifier,
    cache: Option<&CacheModel>,
    alpha: f64,
    beta: f64,
    config: &EvalConfig,
) -> Result<EvalResults> {
    if items.is_empty() {
        return Err(VcrError::invalid("no test images to evaluate"));
    }
    let labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
    let reps = mode.repeats(config);
    let classes = clf.num_classes();
    // integer counts summed over repeats and divided once, so identical
    // predictions give identical bytes whatever the repeat count
    let mut hits = vec![0usize; classes];
    let mut class_totals = vec![0usize; classes];
    let mut first = Vec::new();
    for rep in 0..reps {
        let preds = outputs
            .iter()
            .map(|o| adapter::predict(&o.features[mode_index][rep], clf, cache, alpha, beta))
            .collect::<Result<Vec<_>>>()?;
        evaluate(&preds, &labels, classes)?;
        for (&p, &l) in preds.iter().zip(&labels) {
            class_totals[l] += 1;
            if p == l {
                hits[l] += 1;
            }
        }
        if rep == 0 {
            first = preds;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(EvalResults {
        top1_accuracy: correct as f64 / (reps * items.len()) as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&class_totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        correct: correct as f64 / reps as f64,
        total: items.len(),
        predictions: first,
    })
}

/// Runs each mode over the episode's test split.
///
/// All modes see the same crops (the decomposition depends only on the seed
/// and image id). Modes with random view choices are averaged over
/// `config.repeats` runs.
pub fn run_ablation(
    episode: &Episode,
    backend: &dyn Encoder,
    clf: &TextClassifier,
    modes: &[Mode],
    config: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    if modes.is_empty() {
        return Err(VcrError::invalid("no modes requested"));
    }
    let pool = thread_pool(config.workers)?;
    let cache = prepare_cache(&episode.train, backend, clf, config)?;

    let test_ids: Vec<String> = episode.test.iter().map(|(id, _)| id.clone()).collect();
    let test = collect_outputs(&pool, backend, clf, &test_ids, modes, config)?;

    let (val_items, val_source) = if episode.val.is_empty() {
        (&episode.train, "train_reused")
    } else {
        (&episode.val, "val")
    };
    let val_outputs = if cache.is_some() && config.adapter.grid.is_some() {
        let ids: Vec<String> = val_items.iter().map(|(id, _)| id.clone()).collect();
        Some(collect_outputs(&pool, backend, clf, &ids, modes, config)?)
    } else {
        None
    };

    modes
        .iter()
        .enumerate()
        .map(|(i, &mode)| {
            let val = val_outputs
                .as_deref()
                .map(|o| (val_items.as_slice(), o, val_source));
            let (alpha, beta, validation) = tune(cache.as_ref(), clf, val, i, config)?;
            let results = score_mode(mode, i, &episode.test, &test, clf, cache.as_ref(), alpha, beta, config)?;
            Ok(report(mode, None, episode.shots, alpha, beta, validation, cache.as_ref(), results, &test, i, config))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn report(
    mode: Mode,
    dataset: Option<String>,
    shots: usize,
    alpha: f64,
    beta: f64,
    validation: Option<String>,
    cache: Option<&CacheModel>,
    results: EvalResults,
    outputs: &[ImageOutput],
    mode_index: usize,
    config: &EvalConfig,
) -> EvalReport {
    let (criterion, weighting, n) = mode.descriptor(config);
    let wall_time = config.timing.then(|| {
        outputs.iter().map(|o| o.time[mode_index].as_secs_f64()).sum::<f64>() / outputs.len() as f64
    });
    EvalReport {
        mode: mode.name(),
        dataset,
        criterion,
        weighting,
        n,
        m: config.m,
        shots,
        alpha: if cache.is_some() { alpha } else { 0.0 },
        beta,
        seed: config.seed,
        repeats: mode.repeats(config),
        cache: cache_label(cache, config),
        validation,
        results,
        wall_time,
    }
}

/// A shifted-domain test set sharing the source class list.
pub struct DomainTarget<'a> {
    pub name: String,
    pub manifest: DatasetManifest,
    pub backend: &'a dyn Encoder,
}

/// Builds the cache from the source episode only and evaluates `mode` on
/// every image of every target.
pub fn run_domain_generalization(
    source: &DatasetManifest,
    episode: &Episode,
    source_backend: &dyn Encoder,
    targets: &[DomainTarget<'_>],
    clf: &TextClassifier,
    mode: Mode,
    config: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    for t in targets {
        source.check_same_classes(&t.manifest)?;
    }
    let pool = thread_pool(config.workers)?;
    let cache = prepare_cache(&episode.train, source_backend, clf, config)?;
    let modes = [mode];

    let (val_items, val_source) = if episode.val.is_empty() {
        (&episode.train, "train_reused")
    } else {
        (&episode.val, "val")
    };
    let val_outputs = if cache.is_some() && config.adapter.grid.is_some() {
        let ids: Vec<String> = val_items.iter().map(|(id, _)| id.clone()).collect();
        Some(collect_outputs(&pool, source_backend, clf, &ids, &modes, config)?)
    } else {
        None
    };
    let val = val_outputs.as_deref().map(|o| (val_items.as_slice(), o, val_source));
    let (alpha, beta, validation) = tune(cache.as_ref(), clf, val, 0, config)?;

    targets
        .iter()
        .map(|t| {
            let items = t.manifest.items();
            let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
            let outputs = collect_outputs(&pool, t.backend, clf, &ids, &modes, config)?;
            let results = score_mode(mode, 0, &items, &outputs, clf, cache.as_ref(), alpha, beta, config)?;
            Ok(report(
                mode,
                Some(t.name.clone()),
                episode.shots,
                alpha,
                beta,
                validation.clone(),
                cache.as_ref(),
                results,
                &outputs,
                0,
                config,
            ))
        })
        .collect()
}
