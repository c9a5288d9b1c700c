//! Unsupervised descriptor selection.
//!
//! The aggregation map of a tensor is thresholded at its own mean, giving a
//! binary mask of cells that probably contain the main object. Small noisy
//! regions are dropped by keeping only the largest connected component. For
//! the earlier `relu5_2` layer, the `pool5` component is upsampled and
//! intersected with the layer's own mask. Descriptors under the final mask
//! are what gets pooled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ActivationTensor, Grid};

/// Neighbourhood used when growing connected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// N, S, E and W neighbours.
    Four,
    /// All eight surrounding cells.
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Binary `height × width` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskMap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::InvalidShape {
                h: height,
                w: width,
                d: 1,
                len: bits.len(),
            });
        }
        Ok(MaskMap { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskMap {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        MaskMap {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Builds a mask from rows of 0/1 integers.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Malformed("ragged mask rows".into()));
        }
        let bits = rows.iter().flat_map(|r| r.iter().map(|&b| b != 0)).collect();
        MaskMap::new(rows.len(), width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Cells set to 1, in row-major order.
    pub fn ones_positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let width = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k / width, k % width))
    }

    /// Binary PGM (`P5`, maxval 255) with 0 for background and 255 for set
    /// cells.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }
}

/// Marks cells whose aggregation value is strictly above the map's mean.
pub fn threshold_mask(aggregation: &Grid) -> MaskMap {
    let mean = aggregation.mean();
    MaskMap {
        height: aggregation.height(),
        width: aggregation.width(),
        bits: aggregation.values().iter().map(|&a| a > mean).collect(),
    }
}

/// One maximal connected set of foreground cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Cells in discovery order; the first is the component's smallest cell
    /// in row-major order.
    pub cells: Vec<(usize, usize)>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.cells.len()
    }
}

/// Labels every foreground cell by flood fill.
///
/// Seeds are taken in row-major scan order, so components come out sorted by
/// their smallest cell.
pub fn connected_components(mask: &MaskMap, connectivity: Connectivity) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut labelled = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();

    for seed in 0..h * w {
        if !mask.bits[seed] || labelled[seed] {
            continue;
        }
        labelled[seed] = true;
        stack.push(seed);
        let mut cells = Vec::new();
        while let Some(k) = stack.pop() {
            let (r, c) = (k / w, k % w);
            cells.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let nk = nr as usize * w + nc as usize;
                if mask.bits[nk] && !labelled[nk] {
                    labelled[nk] = true;
                    stack.push(nk);
                }
            }
        }
        components.push(Component { cells });
    }
    components
}

/// Keeps only the largest connected component.
///
/// Ties go to the component whose smallest cell comes first in row-major
/// order. An all-zero mask maps to an all-ones mask so that selection
/// degrades to plain global pooling.
pub fn largest_component(mask: &MaskMap, connectivity: Connectivity) -> MaskMap {
    let components = connected_components(mask, connectivity);
    // components are already ordered by smallest cell; keep the first maximum
    let best = components.iter().fold(None::<&Component>, |best, c| match best {
        Some(b) if b.size() >= c.size() => Some(b),
        _ => Some(c),
    });
    match best {
        None => MaskMap::ones(mask.height, mask.width),
        Some(component) => {
            let mut out = MaskMap::zeros(mask.height, mask.width);
            for &(r, c) in &component.cells {
                out.bits[r * mask.width + c] = true;
            }
            out
        }
    }
}

/// Nearest-neighbour upscaling: target cell `(i, j)` copies source cell
/// `(⌊i·h/H⌋, ⌊j·w/W⌋)`.
pub fn upsample_mask(mask: &MaskMap, target_height: usize, target_width: usize) -> Result<MaskMap> {
    if target_height < mask.height || target_width < mask.width {
        return Err(Error::dims(
            format!("at least {}x{}", mask.height, mask.width),
            format!("{target_height}x{target_width}"),
        ));
    }
    let mut bits = Vec::with_capacity(target_height * target_width);
    for i in 0..target_height {
        let si = i * mask.height / target_height;
        for j in 0..target_width {
            let sj = j * mask.width / target_width;
            bits.push(mask.bits[si * mask.width + sj]);
        }
    }
    Ok(MaskMap {
        height: target_height,
        width: target_width,
        bits,
    })
}

/// Cells set in both masks. If the intersection is empty the (already
/// upsampled) `pool5` component is returned unchanged.
pub fn fuse_masks(pool5_largest: &MaskMap, relu52_mask: &MaskMap) -> Result<MaskMap> {
    if pool5_largest.height != relu52_mask.height || pool5_largest.width != relu52_mask.width {
        return Err(Error::dims(
            format!("{}x{}", relu52_mask.height, relu52_mask.width),
            format!("{}x{}", pool5_largest.height, pool5_largest.width),
        ));
    }
    let bits: Vec<bool> = pool5_largest
        .bits
        .iter()
        .zip(&relu52_mask.bits)
        .map(|(&a, &b)| a && b)
        .collect();
    if !bits.iter().any(|&b| b) {
        return Ok(pool5_largest.clone());
    }
    Ok(MaskMap { bits, ..*relu52_mask })
}

/// Selected deep descriptors with their grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    depth: usize,
    positions: Vec<(usize, usize)>,
    values: Vec<f32>,
}

impl DescriptorSet {
    /// Builds a set from `(row, column, descriptor)` triples. Positions must
    /// be distinct and all descriptors the same length.
    pub fn from_descriptors<I, V>(depth: usize, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((usize, usize), V)>,
        V: AsRef<[f32]>,
    {
        let mut positions = Vec::new();
        let mut values = Vec::new();
        for (pos, v) in items {
            let v = v.as_ref();
            if v.len() != depth {
                return Err(Error::dims(depth, v.len()));
            }
            positions.push(pos);
            values.extend_from_slice(v);
        }
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Malformed("repeated descriptor position".into()));
        }
        Ok(DescriptorSet {
            depth,
            positions,
            values,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.depth)
    }
}

/// Descriptors at every cell the mask keeps, in row-major order.
pub fn select_descriptors(tensor: &ActivationTensor, mask: &MaskMap) -> Result<DescriptorSet> {
    if mask.height != tensor.height() || mask.width != tensor.width() {
        return Err(Error::dims(
            format!("{}x{}", tensor.height(), tensor.width()),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let mut positions = Vec::with_capacity(mask.count_ones());
    let mut values = Vec::with_capacity(mask.count_ones() * tensor.depth());
    for (pos, d) in tensor.descriptors() {
        if mask.get(pos.0, pos.1) {
            positions.push(pos);
            values.extend_from_slice(d);
        }
    }
    Ok(DescriptorSet {
        depth: tensor.depth(),
        positions,
        values,
    })
}

/// Axis-aligned box in original-image pixel coordinates, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> u64 {
        u64::from(self.x_max - self.x_min) + 1
    }

    pub fn height(&self) -> u64 {
        u64::from(self.y_max - self.y_min) + 1
    }

    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    pub fn fits_in(&self, image_height: u32, image_width: u32) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && self.x_max < image_width && self.y_max < image_height
    }
}

impl From<[u32; 4]> for BoundingBox {
    fn from([x_min, y_min, x_max, y_max]: [u32; 4]) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Pixel span `[start, end]` covered by cell `index` when `pixels` are split
/// into `cells` uniform blocks.
pub(crate) fn cell_span(index: usize, cells: usize, pixels: u32) -> (u32, u32) {
    let p = pixels as usize;
    let start = index * p / cells;
    let end = ((index + 1) * p / cells).saturating_sub(1).max(start);
    let last = p.saturating_sub(1);
    (start.min(last) as u32, end.min(last) as u32)
}

/// Tightest box containing the pixel blocks of all set cells.
///
/// Cell `(i, j)` covers rows `⌊i·H/h⌋ ..= ⌊(i+1)·H/h⌋ − 1` and likewise for
/// columns. An empty mask is treated as all ones, matching the selection
/// fallback.
pub fn mask_to_bbox(mask: &MaskMap, image_height: u32, image_width: u32) -> Result<BoundingBox> {
    if image_height == 0 || image_width == 0 {
        return Err(Error::InvalidBox(format!("image size {image_height}x{image_width}")));
    }
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (r, c) in mask.ones_positions() {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    if r0 == usize::MAX {
        (r0, r1, c0, c1) = (0, mask.height - 1, 0, mask.width - 1);
    }
    let (y_min, _) = cell_span(r0, mask.height, image_height);
    let (_, y_max) = cell_span(r1, mask.height, image_height);
    let (x_min, _) = cell_span(c0, mask.width, image_width);
    let (_, x_max) = cell_span(c1, mask.width, image_width);
    BoundingBox::new(x_min, y_min, x_max, y_max)
}

/// Masks produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    /// Raw threshold mask.
    pub mask: MaskMap,
    /// Largest component of `mask`, or all ones if `mask` is empty.
    pub largest: MaskMap,
}

/// Threshold mask and its largest component for one tensor.
pub fn object_mask(tensor: &ActivationTensor, connectivity: Connectivity) -> ObjectMask {
    let mask = threshold_mask(&tensor.aggregation_map());
    let largest = largest_component(&mask, connectivity);
    ObjectMask { mask, largest }
}

/// Final mask for a `relu5_2` tensor given the `pool5` largest component.
pub fn relu52_mask(relu52: &ActivationTensor, pool5_largest: &MaskMap) -> Result<MaskMap> {
    let own = threshold_mask(&relu52.aggregation_map());
    let up = upsample_mask(pool5_largest, relu52.height(), relu52.width())?;
    fuse_masks(&up, &own)
}
