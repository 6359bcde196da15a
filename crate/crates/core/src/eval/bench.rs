//! Planted-scene benchmark: random synthetic worlds where the object of
//! interest is small and surrounded by near-zero-margin distractors, so a
//! global view is often misled while a well-chosen crop is not.

use serde::{Deserialize, Serialize};

use super::ablation::{run_ablation, EvalConfig, EvalReport, Mode};
use super::dataset::{DatasetImage, DatasetManifest};
use super::episode::{build_fewshot_episode, Episode};
use crate::embeddings::synthetic::{SceneParams, SyntheticWorld};
use crate::embeddings::SyntheticBackend;
use crate::error::{Result, VcrError};
use crate::refine::Criterion;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub images: usize,
    pub distractors: usize,
    pub n: usize,
    pub m: usize,
    pub noise_amp: f64,
    /// Number of independent worlds; each derives its own seed.
    pub seeds: usize,
    pub dim: usize,
    pub tau: f64,
    /// 0 runs zero-shot on every image.
    pub shots: usize,
    pub width: u32,
    pub height: u32,
    pub object_radius: (f64, f64),
    pub distractor_radius: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        let scene = SceneParams::default();
        Self {
            classes: 8,
            images: 500,
            distractors: 3,
            n: 5,
            m: 20,
            noise_amp: 0.1,
            seeds: 10,
            dim: 64,
            // unsaturated softmax; only entropy-based selection depends on it
            tau: 0.3,
            shots: 0,
            width: scene.width,
            height: scene.height,
            object_radius: scene.object_radius,
            distractor_radius: scene.distractor_radius,
        }
    }
}

impl SynthConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => Ok(Self {
                classes: 4,
                images: 40,
                n: 3,
                m: 6,
                seeds: 2,
                dim: 16,
                width: 96,
                height: 96,
                ..Self::default()
            }),
            // every crop sees the pure prototype
            "clean" => Ok(Self {
                images: 64,
                distractors: 0,
                noise_amp: 0.0,
                seeds: 2,
                object_radius: (1.0, 1.0),
                ..Self::default()
            }),
            other => Err(VcrError::invalid(format!(
                "unknown preset `{other}` (expected default, tiny or clean)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(VcrError::invalid("synthetic benchmark needs at least 2 classes"));
        }
        if self.images == 0 || self.seeds == 0 {
            return Err(VcrError::invalid("images and seeds must be positive"));
        }
        if self.width < 2 || self.height < 2 {
            return Err(VcrError::invalid("images must be at least 2x2 pixels"));
        }
        if !(self.noise_amp >= 0.0) {
            return Err(VcrError::invalid(format!("noise amplitude must be non-negative, got {}", self.noise_amp)));
        }
        if !(self.tau > 0.0) {
            return Err(VcrError::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        for (lo, hi) in [self.object_radius, self.distractor_radius] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(VcrError::invalid(format!("radius range [{lo}, {hi}] invalid")));
            }
        }
        if self.shots > 0 && self.images < self.classes * (self.shots + 1) {
            return Err(VcrError::invalid(format!(
                "{} images cannot hold {} shots plus a test image for each of {} classes",
                self.images, self.shots, self.classes
            )));
        }
        Ok(())
    }

    fn scene_params(&self) -> SceneParams {
        SceneParams {
            width: self.width,
            height: self.height,
            object_radius: self.object_radius,
            distractor_radius: self.distractor_radius,
            distractors: self.distractors,
        }
    }
}

/// Modes run by default: the component ablation plus the criterion set.
pub fn default_synth_modes() -> Vec<Mode> {
    vec![
        Mode::GlobalBaseline,
        Mode::TenCrop,
        Mode::RandomPerScaleAvg,
        Mode::SelectedUniformAvg,
        Mode::SelectedScaleWeighted,
        Mode::Criterion(Criterion::MinMargin),
        Mode::Criterion(Criterion::MinEntropy),
        Mode::Criterion(Criterion::MaxMargin),
    ]
}

/// One generated world: its backend, dataset and episode.
pub struct SynthWorld {
    pub seed: u64,
    pub backend: SyntheticBackend,
    pub manifest: DatasetManifest,
    pub episode: Episode,
}

const WORLD_TAG: u64 = 0x776f_726c;
const SCENE_TAG: u64 = 0x7363_656e;

/// Builds world number `index` of a benchmark run.
pub fn generate_world(config: &SynthConfig, seed: u64, index: usize) -> Result<SynthWorld> {
    config.validate()?;
    let world_seed = rng::derive(seed, &[WORLD_TAG, index as u64]);
    let world = SyntheticWorld::random(config.classes, config.dim, config.tau, world_seed)?;
    let params = config.scene_params();
    let mut scenes = Vec::with_capacity(config.images);
    let mut images = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let id = format!("s{index}_{i:05}");
        let label = i % config.classes;
        let scene = world.random_scene(&id, label, &params, rng::derive(world_seed, &[SCENE_TAG, i as u64]))?;
        images.push(DatasetImage {
            id,
            label,
            width: config.width,
            height: config.height,
        });
        scenes.push(scene);
    }
    let classes = world.prototypes().class_names().to_vec();
    let manifest = DatasetManifest::new(classes, images)?;
    let episode = if config.shots == 0 {
        Episode {
            shots: 0,
            train: vec![],
            val: vec![],
            test: manifest.items(),
            seed: world_seed,
        }
    } else {
        build_fewshot_episode(&manifest, config.shots, 0, world_seed)?
    };
    let backend = SyntheticBackend::new(world, scenes, config.noise_amp)?;
    Ok(SynthWorld {
        seed: world_seed,
        backend,
        manifest,
        episode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: String,
    pub mean_top1: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_top1: f64,
    pub per_seed_top1: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_per_image: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub config: SynthConfig,
    pub eval: EvalConfig,
    pub modes: Vec<ModeAggregate>,
}

impl SynthReport {
    pub fn mode(&self, name: &str) -> Option<&ModeAggregate> {
        self.modes.iter().find(|m| m.mode == name)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `modes` over `config.seeds` generated worlds. `eval.n`, `eval.m`
/// and `eval.seed` are overridden per world from `config`.
pub fn synthetic_benchmark(config: &SynthConfig, modes: &[Mode], eval: &EvalConfig) -> Result<SynthReport> {
    config.validate()?;
    let mut per_mode: Vec<Vec<EvalReport>> = vec![Vec::new(); modes.len()];
    let echo = EvalConfig {
        n: config.n,
        m: config.m,
        ..eval.clone()
    };
    for index in 0..config.seeds {
        let world = generate_world(config, eval.seed, index)?;
        let run = EvalConfig {
            seed: world.seed,
            ..echo.clone()
        };
        let reports = run_ablation(&world.episode, &world.backend, world.backend.world().prototypes(), modes, &run)?;
        for (slot, r) in per_mode.iter_mut().zip(reports) {
            slot.push(r);
        }
    }
    let modes = modes
        .iter()
        .zip(per_mode)
        .map(|(mode, reports)| {
            let per_seed: Vec<f64> = reports.iter().map(|r| r.results.top1_accuracy).collect();
            let (mean, std) = mean_std(&per_seed);
            let times: Option<Vec<f64>> = reports.iter().map(|r| r.wall_time).collect();
            ModeAggregate {
                mode: mode.name(),
                mean_top1: mean,
                std_top1: std,
                per_seed_top1: per_seed,
                wall_time_per_image: times.map(|t| t.iter().sum::<f64>() / t.len() as f64),
            }
        })
        .collect();
    Ok(SynthReport {
        config: config.clone(),
        eval: echo,
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_world_is_perfect() {
        let config = SynthConfig {
            images: 16,
            seeds: 1,
            n: 3,
            m: 4,
            ..SynthConfig::preset("clean").unwrap()
        };
        let report = synthetic_benchmark(&config, &default_synth_modes(), &EvalConfig::default()).unwrap();
        for m in &report.modes {
            assert_eq!(m.mean_top1, 1.0, "{}", m.mode);
        }
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn presets_validate() {
        for p in ["default", "tiny", "clean"] {
            SynthConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(SynthConfig::preset("huge").is_err());
        let bad = SynthConfig {
            classes: 1,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fewshot_world_holds_out_training_images() {
        let config = SynthConfig {
            shots: 2,
            ..SynthConfig::preset("tiny").unwrap()
        };
        let world = generate_world(&config, 3, 0).unwrap();
        assert_eq!(world.episode.train.len(), 2 * config.classes);
        assert_eq!(world.episode.test.len(), config.images - 2 * config.classes);
    }
}
