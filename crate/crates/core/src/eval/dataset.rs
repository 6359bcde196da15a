use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VcrError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetImage {
    pub id: String,
    pub label: usize,
    pub width: u32,
    pub height: u32,
}

/// Labeled images plus the ordered class list their labels index into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub images: Vec<DatasetImage>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, images: Vec<DatasetImage>) -> Result<Self> {
        let manifest = Self { classes, images };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(VcrError::invalid("dataset needs at least 2 classes"));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(VcrError::Validation(format!("duplicate class `{c}`")));
            }
        }
        let mut ids = HashSet::new();
        for img in &self.images {
            if img.label >= self.classes.len() {
                return Err(VcrError::Validation(format!(
                    "image `{}` label {} out of range",
                    img.id, img.label
                )));
            }
            if !ids.insert(img.id.as_str()) {
                return Err(VcrError::Validation(format!("duplicate image `{}`", img.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| VcrError::io(path, e))?;
        let manifest: Self = serde_json::from_slice(&bytes).map_err(|e| VcrError::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn items(&self) -> Vec<(String, usize)> {
        self.images.iter().map(|i| (i.id.clone(), i.label)).collect()
    }

    /// Errors naming the first position where `other`'s class list diverges.
    pub fn check_same_classes(&self, other: &DatasetManifest) -> Result<()> {
        if let Some(i) = (0..self.classes.len().max(other.classes.len()))
            .find(|&i| self.classes.get(i) != other.classes.get(i))
        {
            return Err(VcrError::invalid(format!(
                "class lists diverge at index {i}: source {:?} vs target {:?}",
                self.classes.get(i),
                other.classes.get(i)
            )));
        }
        Ok(())
    }
}
