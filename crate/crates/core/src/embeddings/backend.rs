use std::collections::HashMap;
use std::path::Path;

use super::store::{load_embedding_file, CropKey, EmbeddingStore};
use super::synthetic::{SyntheticScene, SyntheticWorld};
use super::{FeatureVector, TextClassifier};
use crate::error::{Result, VcrError};
use crate::geometry::View;

/// Anything that can embed a view of a known image.
///
/// Implementations must be deterministic for a fixed state so results do not
/// depend on call order or thread count.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn image_dims(&self, image_id: &str) -> Result<(u32, u32)>;

    fn encode(&self, image_id: &str, view: View) -> Result<FeatureVector>;
}

/// Serves precomputed rows from an embedding store.
#[derive(Debug, Clone)]
pub struct FileBackend {
    store: EmbeddingStore,
}

impl FileBackend {
    pub fn new(store: EmbeddingStore) -> Self {
        Self { store }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(load_embedding_file(path)?))
    }

    /// Opens an exporter-produced store and checks it against the classifier
    /// it will be scored with.
    pub fn open_exported(path: impl AsRef<Path>, classifier: &TextClassifier) -> Result<Self> {
        let path = path.as_ref();
        let backend = Self::open(path)?;
        if backend.dim() != classifier.dim() {
            return Err(VcrError::Validation(format!(
                "{}: embedding dimension {} does not match classifier dimension {}",
                path.display(),
                backend.dim(),
                classifier.dim()
            )));
        }
        Ok(backend)
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl Encoder for FileBackend {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn image_dims(&self, image_id: &str) -> Result<(u32, u32)> {
        self.store
            .image(image_id)
            .map(|img| (img.width, img.height))
            .ok_or_else(|| VcrError::NotFound(format!("image `{image_id}`")))
    }

    fn encode(&self, image_id: &str, view: View) -> Result<FeatureVector> {
        let (width, height) = self.image_dims(image_id)?;
        if let View::Crop(r) | View::FlippedCrop(r) = view {
            if !r.fits(width, height) {
                return Err(VcrError::invalid(format!(
                    "crop {view} does not fit {width}x{height} image `{image_id}`"
                )));
            }
        }
        let row = self
            .store
            .get(image_id, CropKey::from(view))
            .ok_or_else(|| VcrError::MissingEmbedding {
                image_id: image_id.to_string(),
                view: view.to_string(),
            })?;
        FeatureVector::from_unit(row.to_vec())
    }
}

/// Encodes views of synthetic scenes on demand.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    world: SyntheticWorld,
    scenes: HashMap<String, SyntheticScene>,
    noise_amp: f64,
}

impl SyntheticBackend {
    pub fn new(world: SyntheticWorld, scenes: Vec<SyntheticScene>, noise_amp: f64) -> Result<Self> {
        if !(noise_amp >= 0.0) {
            return Err(VcrError::invalid(format!("noise amplitude must be non-negative, got {noise_amp}")));
        }
        let classes = world.prototypes().num_classes();
        let mut map = HashMap::with_capacity(scenes.len());
        for scene in scenes {
            scene.validate(classes)?;
            let id = scene.image_id.clone();
            if map.insert(id.clone(), scene).is_some() {
                return Err(VcrError::Validation(format!("duplicate scene `{id}`")));
            }
        }
        Ok(Self {
            world,
            scenes: map,
            noise_amp,
        })
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    pub fn noise_amp(&self) -> f64 {
        self.noise_amp
    }

    pub fn scene(&self, image_id: &str) -> Option<&SyntheticScene> {
        self.scenes.get(image_id)
    }

    /// The same scenes observed with a different noise amplitude.
    pub fn with_noise(&self, noise_amp: f64) -> Result<Self> {
        if !(noise_amp >= 0.0) {
            return Err(VcrError::invalid(format!("noise amplitude must be non-negative, got {noise_amp}")));
        }
        Ok(Self {
            noise_amp,
            ..self.clone()
        })
    }
}

impl Encoder for SyntheticBackend {
    fn dim(&self) -> usize {
        self.world.prototypes().dim()
    }

    fn image_dims(&self, image_id: &str) -> Result<(u32, u32)> {
        self.scenes
            .get(image_id)
            .map(|s| (s.width, s.height))
            .ok_or_else(|| VcrError::NotFound(format!("image `{image_id}`")))
    }

    fn encode(&self, image_id: &str, view: View) -> Result<FeatureVector> {
        let scene = self
            .scenes
            .get(image_id)
            .ok_or_else(|| VcrError::NotFound(format!("image `{image_id}`")))?;
        self.world.encode(scene, view, self.noise_amp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::synthetic::{Disc, SceneParams};
    use crate::geometry::CropRect;

    #[test]
    fn file_backend_lookup_and_errors() {
        let mut store = EmbeddingStore::new(2).unwrap();
        store.add_image("a", 10, 10).unwrap();
        store.insert("a", CropKey::Global, &[0.6, 0.8], None).unwrap();
        let backend = FileBackend::new(store);
        assert_eq!(backend.encode("a", View::Global).unwrap().as_slice(), &[0.6, 0.8]);
        assert!(matches!(backend.encode("b", View::Global), Err(VcrError::NotFound(_))));
        // the full-image crop is a different key from the global row
        let err = backend.encode("a", View::Crop(CropRect::full(10, 10))).unwrap_err();
        assert!(matches!(err, VcrError::MissingEmbedding { .. }));
        assert!(backend.encode("a", View::Crop(CropRect::new(5, 5, 10, 10))).is_err());
    }

    #[test]
    fn synthetic_backend_object_crop_is_prototype() {
        let world = SyntheticWorld::random(4, 16, 0.01, 1).unwrap();
        let scene = SyntheticScene {
            image_id: "x".into(),
            width: 100,
            height: 100,
            class_index: 2,
            object: Disc { cx: 50.0, cy: 50.0, radius: 40.0 },
            distractors: vec![],
            noise_seed: 0,
        };
        let backend = SyntheticBackend::new(world.clone(), vec![scene], 0.0).unwrap();
        let f = backend.encode("x", View::Crop(CropRect::new(40, 40, 20, 20))).unwrap();
        assert_eq!(f.as_slice(), world.prototypes().weights()[2].as_slice());
    }

    #[test]
    fn synthetic_backend_is_deterministic() {
        let world = SyntheticWorld::random(4, 16, 0.01, 2).unwrap();
        let scene = world.random_scene("y", 0, &SceneParams::default(), 4).unwrap();
        let backend = SyntheticBackend::new(world, vec![scene], 0.2).unwrap();
        let view = View::Crop(CropRect::new(3, 7, 120, 90));
        assert_eq!(backend.encode("y", view).unwrap(), backend.encode("y", view).unwrap());
    }
}
