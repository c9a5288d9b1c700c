//! Activation tensors, their `.scdat` file format and elementary views.
//!
//! A tensor holds the `h × w × d` output of one convolutional layer for one
//! image. Values are stored row-major in `(row, column, channel)` order, so
//! the descriptor at a cell is a contiguous slice of length `d`. Reductions
//! accumulate in `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"SCDA";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// Convolutional layer an activation tensor was taken from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Pool5,
    #[serde(rename = "relu5_2")]
    Relu5_2,
    Other(String),
}

impl Layer {
    fn tag(&self) -> u8 {
        match self {
            Layer::Pool5 => 1,
            Layer::Relu5_2 => 2,
            Layer::Other(_) => 255,
        }
    }

    /// Parses the names used in manifests: `pool5`, `relu5_2`, anything else
    /// is carried verbatim.
    pub fn from_name(name: &str) -> Layer {
        match name {
            "pool5" => Layer::Pool5,
            "relu5_2" => Layer::Relu5_2,
            other => Layer::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Pool5 => f.write_str("pool5"),
            Layer::Relu5_2 => f.write_str("relu5_2"),
            Layer::Other(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    Original,
    Hflip,
}

impl Orientation {
    pub fn toggled(self) -> Orientation {
        match self {
            Orientation::Original => Orientation::Hflip,
            Orientation::Hflip => Orientation::Original,
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Orientation::Original => f.write_str("original"),
            Orientation::Hflip => f.write_str("hflip"),
        }
    }
}

/// A dense real-valued `height × width` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidShape {
                h: height,
                w: width,
                d: 1,
                len: values.len(),
            });
        }
        Ok(Grid { height, width, values })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Malformed("ragged grid rows".into()));
        }
        Grid::new(rows.len(), width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Order-3 tensor of activations for one image and one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f32>,
    layer: Layer,
    orientation: Orientation,
}

impl ActivationTensor {
    /// Builds a tensor from row-major `(row, column, channel)` values.
    ///
    /// Rejects empty dimensions, a value count other than `h·w·d`, and any
    /// NaN or infinity.
    pub fn new(
        height: usize,
        width: usize,
        depth: usize,
        values: Vec<f32>,
        layer: Layer,
        orientation: Orientation,
    ) -> Result<Self> {
        let expected = height.checked_mul(width).and_then(|hw| hw.checked_mul(depth));
        if height == 0 || width == 0 || depth == 0 || expected != Some(values.len()) {
            return Err(Error::InvalidShape {
                h: height,
                w: width,
                d: depth,
                len: values.len(),
            });
        }
        if let Some(offset) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { offset });
        }
        Ok(ActivationTensor {
            height,
            width,
            depth,
            values,
            layer,
            orientation,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layer(&self) -> &Layer {
        &self.layer
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.depth
    }

    /// The `n`-th feature map: channel `n` as an `h × w` grid.
    pub fn feature_map(&self, channel: usize) -> Result<Grid> {
        if channel >= self.depth {
            return Err(Error::IndexOutOfRange {
                what: "channel",
                index: channel,
                bound: self.depth,
            });
        }
        let values = self
            .values
            .iter()
            .skip(channel)
            .step_by(self.depth)
            .map(|&v| f64::from(v))
            .collect();
        Grid::new(self.height, self.width, values)
    }

    /// The deep descriptor at cell `(row, col)`.
    pub fn descriptor_at(&self, row: usize, col: usize) -> Result<&[f32]> {
        if row >= self.height {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: row,
                bound: self.height,
            });
        }
        if col >= self.width {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: col,
                bound: self.width,
            });
        }
        let start = self.offset(row, col);
        Ok(&self.values[start..start + self.depth])
    }

    /// Iterates descriptors in row-major cell order.
    pub fn descriptors(&self) -> impl Iterator<Item = ((usize, usize), &[f32])> + '_ {
        let width = self.width;
        self.values
            .chunks_exact(self.depth)
            .enumerate()
            .map(move |(cell, d)| ((cell / width, cell % width), d))
    }

    /// Sums the tensor through the depth direction: one value per cell.
    pub fn aggregation_map(&self) -> Grid {
        let values = self
            .values
            .chunks_exact(self.depth)
            .map(|d| d.iter().map(|&v| f64::from(v)).sum())
            .collect();
        Grid {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Mirrors the width axis and toggles the orientation tag.
    ///
    /// Only meant for synthetic data: padding makes real convolutions not
    /// exactly flip-equivariant, so flipped features should come from
    /// activations of the flipped image.
    pub fn hflip(&self) -> ActivationTensor {
        let mut values = Vec::with_capacity(self.values.len());
        for row in 0..self.height {
            for col in (0..self.width).rev() {
                let start = self.offset(row, col);
                values.extend_from_slice(&self.values[start..start + self.depth]);
            }
        }
        ActivationTensor {
            values,
            orientation: self.orientation.toggled(),
            layer: self.layer.clone(),
            ..*self
        }
    }
}

/// Contents of a single `.scdat` file: one tensor plus the input image size.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub image_height: u32,
    pub image_width: u32,
    pub tensor: ActivationTensor,
}

impl StoredTensor {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.tensor;
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u32(self.image_height);
        w.u32(self.image_width);
        w.u8(t.layer.tag());
        if let Layer::Other(name) = &t.layer {
            w.string(name)?;
        }
        w.u8(match t.orientation {
            Orientation::Original => 0,
            Orientation::Hflip => 1,
        });
        w.len_u32(t.height)?;
        w.len_u32(t.width)?;
        w.len_u32(t.depth)?;
        w.u8(DTYPE_F32);
        w.f32s(t.values.iter().copied());
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let image_height = r.u32("image height")?;
        let image_width = r.u32("image width")?;
        let layer = match r.u8("layer tag")? {
            1 => Layer::Pool5,
            2 => Layer::Relu5_2,
            255 => Layer::Other(r.string("layer name")?),
            tag => return Err(Error::UnknownTag { what: "layer", tag }),
        };
        let orientation = match r.u8("orientation")? {
            0 => Orientation::Original,
            1 => Orientation::Hflip,
            tag => {
                return Err(Error::UnknownTag {
                    what: "orientation",
                    tag,
                })
            }
        };
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let d = r.u32("depth")? as usize;
        match r.u8("dtype")? {
            DTYPE_F32 => {}
            tag => return Err(Error::UnknownTag { what: "dtype", tag }),
        }
        let count = h
            .checked_mul(w)
            .and_then(|hw| hw.checked_mul(d))
            .ok_or_else(|| Error::Malformed("tensor dimensions overflow".into()))?;
        let values = r.f32s(count, "tensor payload")?;
        r.finish()?;
        Ok(StoredTensor {
            image_height,
            image_width,
            tensor: ActivationTensor::new(h, w, d, values, layer, orientation)?,
        })
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    StoredTensor::from_bytes(&codec::read_file(path.as_ref())?)
}

pub fn store_tensor(stored: &StoredTensor, path: impl AsRef<Path>) -> Result<()> {
    codec::write_atomic(path.as_ref(), &stored.to_bytes()?)
}

/// All tensors of one image, keyed by layer and orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    image_id: String,
    image_height: u32,
    image_width: u32,
    tensors: BTreeMap<(Layer, Orientation), ActivationTensor>,
}

impl TensorRecord {
    pub fn new(image_id: impl Into<String>, image_height: u32, image_width: u32) -> Result<Self> {
        let image_id = image_id.into();
        if image_id.is_empty() {
            return Err(Error::InvalidRecord("empty image id".into()));
        }
        Ok(TensorRecord {
            image_id,
            image_height,
            image_width,
            tensors: BTreeMap::new(),
        })
    }

    /// Adds a tensor, checking that the earlier layer (`relu5_2`) never has a
    /// smaller spatial grid than `pool5` for the same orientation.
    pub fn insert(&mut self, tensor: ActivationTensor) -> Result<()> {
        let key = (tensor.layer.clone(), tensor.orientation);
        if self.tensors.contains_key(&key) {
            return Err(Error::InvalidRecord(format!(
                "{}: duplicate tensor for {}/{}",
                self.image_id, key.0, key.1
            )));
        }
        let partner = match key.0 {
            Layer::Pool5 => Some(Layer::Relu5_2),
            Layer::Relu5_2 => Some(Layer::Pool5),
            Layer::Other(_) => None,
        };
        if let Some(other) = partner.and_then(|l| self.tensors.get(&(l, key.1))) {
            let (pool5, relu) = if key.0 == Layer::Pool5 {
                (&tensor, other)
            } else {
                (other, &tensor)
            };
            if relu.height < pool5.height || relu.width < pool5.width {
                return Err(Error::InvalidRecord(format!(
                    "{}: relu5_2 grid {}x{} smaller than pool5 grid {}x{}",
                    self.image_id, relu.height, relu.width, pool5.height, pool5.width
                )));
            }
        }
        self.tensors.insert(key, tensor);
        Ok(())
    }

    /// Inserts a tensor read from disk, requiring its image size to match.
    pub fn insert_stored(&mut self, stored: StoredTensor) -> Result<()> {
        if stored.image_height != self.image_height || stored.image_width != self.image_width {
            return Err(Error::InvalidRecord(format!(
                "{}: tensor image size {}x{} disagrees with record {}x{}",
                self.image_id, stored.image_height, stored.image_width, self.image_height, self.image_width
            )));
        }
        self.insert(stored.tensor)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn get(&self, layer: &Layer, orientation: Orientation) -> Option<&ActivationTensor> {
        self.tensors.get(&(layer.clone(), orientation))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &ActivationTensor> {
        self.tensors.values()
    }
}
