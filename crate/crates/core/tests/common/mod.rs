#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vcr::embeddings::{write_embedding_file, SyntheticBackend, TextClassifier};
use vcr::eval::{crop_manifest, generate_world, materialize, DatasetManifest, SynthConfig, SynthWorld};

/// A small few-shot-capable world used across the integration tests.
pub fn small_config() -> SynthConfig {
    SynthConfig {
        images: 48,
        shots: 0,
        ..SynthConfig::preset("tiny").unwrap()
    }
}

pub fn world(config: &SynthConfig, seed: u64) -> SynthWorld {
    generate_world(config, seed, 0).unwrap()
}

pub fn classifier(world: &SynthWorld) -> TextClassifier {
    world.backend.world().prototypes().clone()
}

/// On-disk copy of a synthetic world: classifier, dataset manifest and a
/// crop store covering `(n, m, seed)` plus the ten-crop views.
pub struct Files {
    pub dir: tempfile::TempDir,
    pub classifier: PathBuf,
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
}

impl Files {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn write_dataset(path: &Path, dataset: &DatasetManifest) {
    std::fs::write(path, serde_json::to_vec_pretty(dataset).unwrap()).unwrap();
}

pub fn export(backend: &SyntheticBackend, dataset: &DatasetManifest, n: usize, m: usize, seed: u64) -> Files {
    let dir = tempfile::tempdir().unwrap();
    let classifier = dir.path().join("clf.vcre");
    let manifest = dir.path().join("dataset.json");
    let embeddings = dir.path().join("crops.vcre");
    backend.world().prototypes().save(&classifier).unwrap();
    write_dataset(&manifest, dataset);
    let crops = crop_manifest(dataset, n, m, seed, true).unwrap();
    write_embedding_file(&materialize(backend, &crops).unwrap(), &embeddings).unwrap();
    Files {
        dir,
        classifier,
        manifest,
        embeddings,
    }
}
