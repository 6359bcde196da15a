use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetManifest;
use crate::error::{Result, VcrError};
use crate::rng::{self, Stream};

/// A seeded few-shot split. Items are `(image_id, label)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub shots: usize,
    pub train: Vec<(String, usize)>,
    pub val: Vec<(String, usize)>,
    pub test: Vec<(String, usize)>,
    pub seed: u64,
}

const EPISODE_TAG: u64 = 0x6570_6973;

/// Samples `shots` training and `val_per_class` validation images per
/// class without replacement; everything else is test.
///
/// Class `c` is shuffled on its own stream, so adding images to one class
/// never changes another class's draw. Test keeps manifest order.
pub fn build_fewshot_episode(
    manifest: &DatasetManifest,
    shots: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    manifest.validate()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut held = HashSet::new();
    let base = rng::derive(seed, &[EPISODE_TAG]);
    for (c, name) in manifest.classes.iter().enumerate() {
        let mut members: Vec<&str> = manifest
            .images
            .iter()
            .filter(|i| i.label == c)
            .map(|i| i.id.as_str())
            .collect();
        if members.len() < shots + val_per_class {
            return Err(VcrError::invalid(format!(
                "class `{name}` has {} images, needs {} ({shots} shots + {val_per_class} validation)",
                members.len(),
                shots + val_per_class
            )));
        }
        Stream::new(base, c as u64).shuffle(&mut members);
        for (j, id) in members.iter().take(shots + val_per_class).enumerate() {
            held.insert(*id);
            let item = (id.to_string(), c);
            if j < shots {
                train.push(item);
            } else {
                val.push(item);
            }
        }
    }
    let test = manifest
        .images
        .iter()
        .filter(|i| !held.contains(i.id.as_str()))
        .map(|i| (i.id.clone(), i.label))
        .collect();
    Ok(Episode {
        shots,
        train,
        val,
        test,
        seed,
    })
}
