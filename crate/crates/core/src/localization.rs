//! Scoring predicted object boxes against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::BoundingBox;

/// An image counts as correctly localized when its IoU is strictly above
/// this.
pub const PCP_THRESHOLD: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 10;

/// Intersection over union with inclusive pixel bounds.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    let inter = if x0 <= x1 && y0 <= y1 {
        (u64::from(x1 - x0) + 1) * (u64::from(y1 - y0) + 1)
    } else {
        0
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

fn paired<'a>(
    preds: &'a BTreeMap<String, BoundingBox>,
    gts: &'a BTreeMap<String, BoundingBox>,
) -> Result<impl Iterator<Item = (&'a String, &'a BoundingBox, &'a BoundingBox)>> {
    if preds.len() != gts.len() || preds.keys().zip(gts.keys()).any(|(a, b)| a != b) {
        let missing: Vec<&String> = preds
            .keys()
            .filter(|k| !gts.contains_key(*k))
            .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
            .collect();
        return Err(Error::InvalidRecord(format!(
            "prediction and ground-truth ids differ: {missing:?}"
        )));
    }
    Ok(preds.iter().zip(gts.values()).map(|((id, p), g)| (id, p, g)))
}

/// Fraction of images whose IoU exceeds `threshold`.
pub fn pcp(preds: &BTreeMap<String, BoundingBox>, gts: &BTreeMap<String, BoundingBox>, threshold: f64) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (_, p, g) in paired(preds, gts)? {
        total += 1;
        if iou(p, g) > threshold {
            hits += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Fraction of the image covered by a box.
pub fn coverage(gt: &BoundingBox, image_height: u32, image_width: u32) -> Result<f64> {
    if !gt.fits_in(image_height, image_width) {
        return Err(Error::InvalidBox(format!(
            "{gt:?} exceeds image {image_width}x{image_height}"
        )));
    }
    Ok(gt.area() as f64 / (u64::from(image_height) * u64::from(image_width)) as f64)
}

/// Counts images by ground-truth coverage in ten bins
/// `[0, 10%), …, [80%, 90%), [90%, 100%]`.
pub fn coverage_histogram(items: &[(BoundingBox, u32, u32)]) -> Result<[usize; HISTOGRAM_BINS]> {
    let mut bins = [0usize; HISTOGRAM_BINS];
    for (gt, h, w) in items {
        let c = coverage(gt, *h, *w)?;
        let bin = ((c * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        bins[bin] += 1;
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageIou {
    pub id: String,
    pub iou: f64,
    pub predicted: BoundingBox,
    pub ground_truth: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub threshold: f64,
    pub pcp: f64,
    pub per_image: Vec<ImageIou>,
    pub histogram: [usize; HISTOGRAM_BINS],
}

/// Per-image ground truth together with its image size.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub image_height: u32,
    pub image_width: u32,
}

/// IoU per image, PCP at [`PCP_THRESHOLD`] and the coverage histogram.
pub fn evaluate(
    preds: &BTreeMap<String, BoundingBox>,
    gts: &BTreeMap<String, GroundTruth>,
) -> Result<LocalizationReport> {
    let gt_boxes: BTreeMap<String, BoundingBox> = gts.iter().map(|(k, g)| (k.clone(), g.bbox)).collect();
    let per_image: Vec<ImageIou> = paired(preds, &gt_boxes)?
        .map(|(id, p, g)| ImageIou {
            id: id.clone(),
            iou: iou(p, g),
            predicted: *p,
            ground_truth: *g,
        })
        .collect();
    let items: Vec<(BoundingBox, u32, u32)> = gts.values().map(|g| (g.bbox, g.image_height, g.image_width)).collect();
    Ok(LocalizationReport {
        threshold: PCP_THRESHOLD,
        pcp: pcp(preds, &gt_boxes, PCP_THRESHOLD)?,
        histogram: coverage_histogram(&items)?,
        per_image,
    })
}
