//! Crop manifests: the exact list of views an offline encoder must embed
//! so that a file-backed store can serve every evaluation mode.

use std::collections::HashSet;

use serde_json::json;

use super::dataset::DatasetManifest;
use crate::embeddings::{CropKey, EmbeddingStore, Encoder, ImageEntry, Manifest, ManifestRow};
use crate::error::{Result, VcrError};
use crate::geometry::{build_scale_set, decompose, ten_crop_views, View};

/// Rows for every image of `dataset`: the local crops of an `n`-scale
/// decomposition in scale order, then the global view, then (optionally)
/// the ten-crop views. Crops that repeat within an image are listed once.
pub fn crop_manifest(dataset: &DatasetManifest, n: usize, m: usize, seed: u64, ten_crop: bool) -> Result<Manifest> {
    dataset.validate()?;
    let scale_set = build_scale_set(n)?;
    let mut manifest = Manifest::default();
    for img in &dataset.images {
        manifest.images.push(ImageEntry {
            id: img.id.clone(),
            width: img.width,
            height: img.height,
        });
        let views = decompose(&img.id, img.width, img.height, &scale_set, m, seed)?;
        let mut keys: Vec<CropKey> = views
            .local()
            .iter()
            .flat_map(|sv| sv.crops.iter().map(|&r| CropKey::Rect(r)))
            .collect();
        keys.push(CropKey::Global);
        if ten_crop {
            keys.extend(ten_crop_views(img.width, img.height).into_iter().map(CropKey::from));
        }
        let mut seen = HashSet::new();
        for crop in keys {
            if seen.insert(crop) {
                manifest.rows.push(ManifestRow {
                    image: img.id.clone(),
                    crop,
                    row: manifest.rows.len(),
                    selection: None,
                });
            }
        }
    }
    manifest.extra.insert(
        "decomposition".into(),
        json!({"n": n, "m": m, "seed": seed, "ten_crop": ten_crop}),
    );
    Ok(manifest)
}

fn key_view(key: CropKey) -> Result<View> {
    match key {
        CropKey::Global => Ok(View::Global),
        CropKey::Rect(r) => Ok(View::Crop(r)),
        CropKey::Flip(r) => Ok(View::FlippedCrop(r)),
        CropKey::Refined => Err(VcrError::invalid("a crop manifest cannot contain refined rows")),
    }
}

/// Encodes every row of a crop manifest, in order, into a store.
pub fn materialize(backend: &dyn Encoder, manifest: &Manifest) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(backend.dim())?;
    for img in &manifest.images {
        store.add_image(&img.id, img.width, img.height)?;
    }
    for row in &manifest.rows {
        let feature = backend.encode(&row.image, key_view(row.crop)?)?;
        store.insert(&row.image, row.crop, feature.as_slice(), None)?;
    }
    store.manifest_mut_extra().extend(manifest.extra.clone());
    Ok(store)
}
