//! The `.vcre` embedding file and its JSON sidecar manifest.
//!
//! Binary layout, little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `56 43 52 45` (`VCRE`)  |
//! | 4      | 4    | `u32` version, always 1       |
//! | 8      | 4    | `u32` dim                     |
//! | 12     | 8    | `u64` row count               |
//! | 20     | …    | `row_count · dim` `f32`, row-major |
//!
//! The sidecar lives next to the binary with a `.json` extension and maps
//! `(image, crop)` keys to row indices. Classifier and cache files reuse the
//! same layout with their own manifest fields.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{norm_f64, FeatureVector, UNIT_NORM_TOL};
use crate::error::{Result, VcrError};
use crate::geometry::{CropRect, View};

pub const MAGIC: [u8; 4] = *b"VCRE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Key of one row within an image's entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "CropKeyRepr", into = "CropKeyRepr")]
pub enum CropKey {
    Global,
    Refined,
    Rect(CropRect),
    Flip(CropRect),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CropKeyRepr {
    Name(String),
    Rect([u32; 4]),
    Flip { flip: [u32; 4] },
}

impl TryFrom<CropKeyRepr> for CropKey {
    type Error = String;

    fn try_from(repr: CropKeyRepr) -> std::result::Result<Self, String> {
        match repr {
            CropKeyRepr::Name(name) => match name.as_str() {
                "global" => Ok(CropKey::Global),
                "refined" => Ok(CropKey::Refined),
                other => Err(format!("unknown crop key `{other}`")),
            },
            CropKeyRepr::Rect([x, y, w, h]) => Ok(CropKey::Rect(CropRect::new(x, y, w, h))),
            CropKeyRepr::Flip { flip: [x, y, w, h] } => Ok(CropKey::Flip(CropRect::new(x, y, w, h))),
        }
    }
}

impl From<CropKey> for CropKeyRepr {
    fn from(key: CropKey) -> Self {
        match key {
            CropKey::Global => CropKeyRepr::Name("global".into()),
            CropKey::Refined => CropKeyRepr::Name("refined".into()),
            CropKey::Rect(r) => CropKeyRepr::Rect(r.as_array()),
            CropKey::Flip(r) => CropKeyRepr::Flip { flip: r.as_array() },
        }
    }
}

impl From<View> for CropKey {
    fn from(view: View) -> Self {
        match view {
            View::Global => CropKey::Global,
            View::Crop(r) => CropKey::Rect(r),
            View::FlippedCrop(r) => CropKey::Flip(r),
        }
    }
}

impl std::fmt::Display for CropKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CropKey::Global => write!(f, "global"),
            CropKey::Refined => write!(f, "refined"),
            CropKey::Rect(r) => write!(f, "[{},{},{},{}]", r.x, r.y, r.w, r.h),
            CropKey::Flip(r) => write!(f, "flip[{},{},{},{}]", r.x, r.y, r.w, r.h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

/// Audit record of how a refined row was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub criterion: String,
    pub weighting: String,
    pub scales: Vec<ScaleChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleChoice {
    pub scale: f64,
    pub k: usize,
    pub margin: f64,
    pub score: f64,
    pub crop: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image: String,
    pub crop: CropKey,
    pub row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Sidecar manifest. Unknown top-level keys are kept and written back.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<ManifestRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterParams>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// A matrix of unit rows plus the manifest that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    data: Vec<f32>,
    manifest: Manifest,
    index: HashMap<(String, CropKey), usize>,
    images: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(VcrError::invalid(format!("embedding dimension must be at least 2, got {dim}")));
        }
        Ok(Self {
            dim,
            data: Vec::new(),
            manifest: Manifest::default(),
            index: HashMap::new(),
            images: HashMap::new(),
        })
    }

    /// Assembles a store from raw parts and checks every invariant.
    pub fn from_parts(dim: usize, data: Vec<f32>, manifest: Manifest) -> Result<Self> {
        let mut store = Self::new(dim)?;
        if !data.len().is_multiple_of(dim) {
            return Err(VcrError::Validation(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        store.data = data;
        for (i, img) in manifest.images.iter().enumerate() {
            if store.images.insert(img.id.clone(), i).is_some() {
                return Err(VcrError::Validation(format!("duplicate image `{}`", img.id)));
            }
        }
        let count = store.len();
        for entry in &manifest.rows {
            if entry.row >= count {
                return Err(VcrError::Validation(format!(
                    "manifest row index {} out of range for {count} rows",
                    entry.row
                )));
            }
            if !store.images.contains_key(&entry.image) {
                return Err(VcrError::Validation(format!(
                    "manifest row refers to unknown image `{}`",
                    entry.image
                )));
            }
            if store
                .index
                .insert((entry.image.clone(), entry.crop), entry.row)
                .is_some()
            {
                return Err(VcrError::Validation(format!(
                    "duplicate manifest key ({}, {})",
                    entry.image, entry.crop
                )));
            }
        }
        store.manifest = manifest;
        store.check_rows()?;
        Ok(store)
    }

    fn check_rows(&self) -> Result<()> {
        let bad: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let row = self.row(i);
                let norm = norm_f64(row);
                row.iter().any(|v| !v.is_finite()) || !((norm - 1.0).abs() <= UNIT_NORM_TOL)
            })
            .collect();
        if bad.is_empty() {
            return Ok(());
        }
        let shown: Vec<String> = bad.iter().take(20).map(|i| i.to_string()).collect();
        let more = if bad.len() > 20 {
            format!(" (and {} more)", bad.len() - 20)
        } else {
            String::new()
        };
        Err(VcrError::Validation(format!(
            "rows not unit-norm: {}{more}",
            shown.join(", ")
        )))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut_extra(&mut self) -> &mut BTreeMap<String, serde_json::Value> {
        &mut self.manifest.extra
    }

    pub fn set_classes(&mut self, classes: Vec<String>, tau: Option<f64>) {
        self.manifest.classes = Some(classes);
        self.manifest.tau = tau;
    }

    pub fn set_labels(&mut self, labels: Vec<usize>, adapter: Option<AdapterParams>) {
        self.manifest.labels = Some(labels);
        self.manifest.adapter = adapter;
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.manifest.images
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.get(id).map(|&i| &self.manifest.images[i])
    }

    pub fn add_image(&mut self, id: &str, width: u32, height: u32) -> Result<()> {
        if self.images.contains_key(id) {
            return Err(VcrError::Validation(format!("duplicate image `{id}`")));
        }
        self.images.insert(id.to_string(), self.manifest.images.len());
        self.manifest.images.push(ImageEntry {
            id: id.to_string(),
            width,
            height,
        });
        Ok(())
    }

    /// Appends a unit row without a manifest entry and returns its index.
    pub fn push_row(&mut self, values: &[f32]) -> Result<usize> {
        if values.len() != self.dim {
            return Err(VcrError::invalid(format!(
                "row has dimension {} but store has {}",
                values.len(),
                self.dim
            )));
        }
        FeatureVector::from_unit(values.to_vec())?;
        self.data.extend_from_slice(values);
        Ok(self.len() - 1)
    }

    /// Appends a row keyed by `(image, crop)`.
    pub fn insert(
        &mut self,
        image: &str,
        crop: CropKey,
        values: &[f32],
        selection: Option<SelectionRecord>,
    ) -> Result<usize> {
        if !self.images.contains_key(image) {
            return Err(VcrError::NotFound(format!("image `{image}` is not in the store")));
        }
        let key = (image.to_string(), crop);
        if self.index.contains_key(&key) {
            return Err(VcrError::Validation(format!("duplicate manifest key ({image}, {crop})")));
        }
        let row = self.push_row(values)?;
        self.index.insert(key, row);
        self.manifest.rows.push(ManifestRow {
            image: image.to_string(),
            crop,
            row,
            selection,
        });
        Ok(row)
    }

    pub fn get(&self, image: &str, crop: CropKey) -> Option<&[f32]> {
        self.index
            .get(&(image.to_string(), crop))
            .map(|&i| self.row(i))
    }

    pub fn contains(&self, image: &str, crop: CropKey) -> bool {
        self.index.contains_key(&(image.to_string(), crop))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Parses the binary part of a `.vcre` file into `(dim, values)`.
pub fn parse_vcre(bytes: &[u8]) -> Result<(usize, Vec<f32>)> {
    let fail = |offset: usize, message: String| VcrError::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim < 2 {
        return Err(fail(8, format!("dimension {dim} is below 2")));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload = rows
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(12, format!("row count {rows} overflows")))?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if available < payload {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: header promises {payload} bytes, found {available}"),
        ));
    }
    if available > payload {
        return Err(fail(
            HEADER_LEN + payload as usize,
            format!("{} trailing bytes after payload", available - payload),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim, data))
}

/// `foo.vcre` → `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| VcrError::io(path, e))?;
    let (dim, data) = parse_vcre(&bytes)?;
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| VcrError::io(&side, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| VcrError::json(&side, e))?;
    EmbeddingStore::from_parts(dim, data, manifest)
}

pub fn write_embedding_file(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &store.to_bytes())?;
    write_atomic(&sidecar_path(path), &store.manifest().to_json_bytes())
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| VcrError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| VcrError::io(path, e))?;
    tmp.persist(path).map_err(|e| VcrError::io(path, e.error))?;
    Ok(())
}
