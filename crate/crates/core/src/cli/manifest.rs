//! JSON Lines manifest: one image per line.
//!
//! ```json
//! {"image_id": "cub_0001", "label": 3, "split": "gallery",
//!  "image_height": 375, "image_width": 500,
//!  "tensors": [{"layer": "pool5", "orientation": "original", "path": "cub_0001.pool5.scdat"}],
//!  "gt_bbox": [60, 27, 385, 331]}
//! ```
//!
//! Relative tensor paths resolve against the manifest's directory. Blank
//! lines are skipped.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::selection::BoundingBox;
use crate::tensor::{self, Layer, Orientation, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Gallery,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub layer: String,
    #[serde(default)]
    pub orientation: Orientation,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    #[serde(default)]
    pub label: Option<u32>,
    pub split: Split,
    pub image_height: u32,
    pub image_width: u32,
    #[serde(default)]
    pub tensors: Vec<TensorRef>,
    #[serde(default)]
    pub gt_bbox: Option<BoundingBox>,
}

impl ManifestEntry {
    pub fn tensor_path(&self, layer: &Layer, orientation: Orientation) -> Option<&Path> {
        self.tensors
            .iter()
            .find(|t| Layer::from_name(&t.layer) == *layer && t.orientation == orientation)
            .map(|t| t.path.as_path())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// 1-based manifest line of each entry.
    pub lines: Vec<usize>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        let mut lines = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let at = |msg: String| CliError::new("manifest", format!("{}:{lineno}: {msg}", path.display()));
            let mut entry: ManifestEntry = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
            if entry.image_id.is_empty() {
                return Err(at("empty image_id".into()));
            }
            if !seen.insert(entry.image_id.clone()) {
                return Err(at(format!("duplicate image_id {:?}", entry.image_id)));
            }
            if let Some(b) = entry.gt_bbox {
                if !b.fits_in(entry.image_height, entry.image_width) {
                    return Err(at(format!("gt_bbox {:?} outside the image", <[u32; 4]>::from(b))));
                }
            }
            let mut keys = HashSet::new();
            for t in &mut entry.tensors {
                if !keys.insert((t.layer.clone(), t.orientation)) {
                    return Err(at(format!("tensor {}/{} listed twice", t.layer, t.orientation)));
                }
                if t.path.is_relative() {
                    t.path = base.join(&t.path);
                }
            }
            entries.push(entry);
            lines.push(lineno);
        }
        Ok(Manifest {
            path: path.to_path_buf(),
            entries,
            lines,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Every `(layer, orientation)` in `required` that an entry lacks or
    /// whose file does not exist, as human-readable lines.
    pub fn missing_tensors(&self, required: &[(Layer, Orientation)]) -> Vec<String> {
        self.missing_tensors_for(0..self.entries.len(), required)
    }

    /// [`missing_tensors`](Self::missing_tensors) restricted to some entries.
    pub fn missing_tensors_for(
        &self,
        indices: impl IntoIterator<Item = usize>,
        required: &[(Layer, Orientation)],
    ) -> Vec<String> {
        let mut missing = Vec::new();
        for i in indices {
            let (entry, line) = (&self.entries[i], self.lines[i]);
            for (layer, orientation) in required {
                match entry.tensor_path(layer, *orientation) {
                    None => missing.push(format!(
                        "{}:{line}: {} has no {layer}/{orientation} tensor",
                        self.path.display(),
                        entry.image_id
                    )),
                    Some(p) if !p.is_file() => missing.push(format!(
                        "{}:{line}: {} {layer}/{orientation} file {} does not exist",
                        self.path.display(),
                        entry.image_id,
                        p.display()
                    )),
                    Some(_) => {}
                }
            }
        }
        missing
    }

    /// Loads the listed tensors of one entry into a record.
    pub fn load_record(&self, index: usize, required: &[(Layer, Orientation)]) -> Result<TensorRecord, CliError> {
        let entry = &self.entries[index];
        let context = |e: crate::Error, p: &Path| {
            CliError::from(e).context(format!(
                "{}:{}: {} ({})",
                self.path.display(),
                self.lines[index],
                entry.image_id,
                p.display()
            ))
        };
        let mut record = TensorRecord::new(&entry.image_id, entry.image_height, entry.image_width)
            .map_err(|e| context(e, &self.path))?;
        for (layer, orientation) in required {
            let path = entry.tensor_path(layer, *orientation).ok_or_else(|| {
                CliError::new(
                    "missing_tensor",
                    format!("{}: no {layer}/{orientation} tensor", entry.image_id),
                )
            })?;
            let stored = tensor::load_tensor(path).map_err(|e| context(e, path))?;
            if stored.tensor.layer() != layer || stored.tensor.orientation() != *orientation {
                return Err(CliError::new(
                    "manifest",
                    format!(
                        "{}: file holds {}/{} but is listed as {layer}/{orientation}",
                        path.display(),
                        stored.tensor.layer(),
                        stored.tensor.orientation()
                    ),
                ));
            }
            record.insert_stored(stored).map_err(|e| context(e, path))?;
        }
        Ok(record)
    }
}
