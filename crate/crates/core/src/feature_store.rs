//! `.scdf` feature store: one aggregated feature per image.
//!
//! Layout (little-endian): magic `SCDF`, `u32` version, `u32` n, `u32` dim,
//! `u8` variant tag, then n length-prefixed UTF-8 ids, n `u32` labels
//! (`u32::MAX` for unlabelled), and `n·dim` `f32` values row by row.

use std::collections::HashMap;
use std::path::Path;

use crate::aggregation::{FeatureVector, Variant};
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"SCDF";
const VERSION: u32 = 1;
pub(crate) const NO_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    variant: Variant,
    dim: usize,
    ids: Vec<String>,
    labels: Vec<Option<u32>>,
    values: Vec<f32>,
    positions: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(variant: Variant, dim: usize) -> Self {
        FeatureStore {
            variant,
            dim,
            ids: Vec::new(),
            labels: Vec::new(),
            values: Vec::new(),
            positions: HashMap::new(),
        }
    }

    /// Appends a feature, narrowing it to `f32`.
    pub fn push(&mut self, id: impl Into<String>, label: Option<u32>, feature: &FeatureVector) -> Result<()> {
        if feature.variant() != self.variant {
            return Err(Error::dims(self.variant, feature.variant()));
        }
        self.push_values(id.into(), label, feature.values().iter().map(|&v| v as f32))
    }

    fn push_values(&mut self, id: String, label: Option<u32>, values: impl IntoIterator<Item = f32>) -> Result<()> {
        if label == Some(NO_LABEL) {
            return Err(Error::InvalidRecord(format!("{id}: label {NO_LABEL} is reserved")));
        }
        if self.positions.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let before = self.values.len();
        self.values.extend(values);
        if self.values.len() - before != self.dim {
            let got = self.values.len() - before;
            self.values.truncate(before);
            return Err(Error::dims(self.dim, got));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.labels.push(label);
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.len_u32(self.len())?;
        w.len_u32(self.dim)?;
        w.u8(self.variant.tag());
        for id in &self.ids {
            w.string(id)?;
        }
        for l in &self.labels {
            w.u32(l.unwrap_or(NO_LABEL));
        }
        w.f32s(self.values.iter().copied());
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let n = r.u32("count")? as usize;
        let dim = r.u32("dim")? as usize;
        let variant = Variant::from_tag(r.u8("variant")?)?;
        let mut ids = Vec::new();
        let mut positions = HashMap::new();
        for i in 0..n {
            let id = r.string("id")?;
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
        }
        let mut labels = Vec::new();
        for _ in 0..n {
            let l = r.u32("label")?;
            labels.push((l != NO_LABEL).then_some(l));
        }
        let count = n
            .checked_mul(dim)
            .ok_or_else(|| Error::Malformed("feature matrix size overflows".into()))?;
        let values = r.f32s(count, "feature values")?;
        r.finish()?;
        if let Some(offset) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { offset });
        }
        Ok(FeatureStore {
            variant,
            dim,
            ids,
            labels,
            values,
            positions,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path.as_ref())?)
    }
}
