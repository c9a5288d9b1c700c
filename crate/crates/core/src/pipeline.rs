//! Per-image composition of selection and aggregation.

use crate::aggregation::{self, FeatureVector, Variant, VladCodebook, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::selection::{self, BoundingBox, Connectivity, DescriptorSet, MaskMap};
use crate::tensor::{ActivationTensor, Layer, Orientation, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Weight of the `relu5_2` half in the multi-layer variants.
    pub alpha: f64,
    pub connectivity: Connectivity,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::Scda,
            alpha: DEFAULT_ALPHA,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Tensors a variant reads, as `(layer, orientation)` pairs.
pub fn required_tensors(variant: Variant) -> Result<Vec<(Layer, Orientation)>> {
    use Orientation::*;
    Ok(match variant {
        Variant::Scda | Variant::Vlad => vec![(Layer::Pool5, Original)],
        Variant::ScdaPlus => vec![(Layer::Pool5, Original), (Layer::Relu5_2, Original)],
        Variant::ScdaFlipPlus => vec![
            (Layer::Pool5, Original),
            (Layer::Relu5_2, Original),
            (Layer::Pool5, Hflip),
            (Layer::Relu5_2, Hflip),
        ],
        other => {
            return Err(Error::InvalidRecord(format!(
                "{other} features are not produced from tensors"
            )))
        }
    })
}

fn tensor(record: &TensorRecord, layer: Layer, orientation: Orientation) -> Result<&ActivationTensor> {
    record
        .get(&layer, orientation)
        .ok_or_else(|| Error::InvalidRecord(format!("{}: missing {layer}/{orientation} tensor", record.image_id())))
}

/// Selected `pool5` descriptors and the mask they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool5Selection {
    pub mask: MaskMap,
    pub largest: MaskMap,
    pub descriptors: DescriptorSet,
}

pub fn select_pool5(tensor: &ActivationTensor, connectivity: Connectivity) -> Result<Pool5Selection> {
    let masks = selection::object_mask(tensor, connectivity);
    let descriptors = selection::select_descriptors(tensor, &masks.largest)?;
    Ok(Pool5Selection {
        mask: masks.mask,
        largest: masks.largest,
        descriptors,
    })
}

/// SCDA feature of one orientation, plus the `pool5` selection behind it.
/// With `with_relu` the multi-layer ensemble is returned instead.
fn orientation_feature(
    record: &TensorRecord,
    orientation: Orientation,
    config: &PipelineConfig,
    with_relu: bool,
) -> Result<(FeatureVector, Pool5Selection)> {
    let pool5 = tensor(record, Layer::Pool5, orientation)?;
    let sel = select_pool5(pool5, config.connectivity)?;
    let s5 = aggregation::scda(&sel.descriptors)?;
    if !with_relu {
        return Ok((s5, sel));
    }
    let relu = tensor(record, Layer::Relu5_2, orientation)?;
    let relu_mask = selection::relu52_mask(relu, &sel.largest)?;
    let s52 = aggregation::scda(&selection::select_descriptors(relu, &relu_mask)?)?;
    Ok((aggregation::scda_plus(&s5, &s52, config.alpha)?, sel))
}

/// Output of the pipeline for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub feature: FeatureVector,
    /// Final `pool5` mask of the original orientation.
    pub mask: MaskMap,
    pub selected: usize,
    pub bbox: BoundingBox,
}

/// Runs selection and aggregation for one record. VLAD needs a codebook.
pub fn image_feature(
    record: &TensorRecord,
    config: &PipelineConfig,
    codebook: Option<&VladCodebook>,
) -> Result<ImageFeature> {
    let (feature, sel) = match config.variant {
        Variant::Scda => orientation_feature(record, Orientation::Original, config, false)?,
        Variant::ScdaPlus => orientation_feature(record, Orientation::Original, config, true)?,
        Variant::ScdaFlipPlus => {
            let (orig, sel) = orientation_feature(record, Orientation::Original, config, true)?;
            let (flip, _) = orientation_feature(record, Orientation::Hflip, config, true)?;
            (aggregation::scda_flip_plus(&orig, &flip)?, sel)
        }
        Variant::Vlad => {
            let codebook = codebook.ok_or_else(|| Error::InvalidRecord("VLAD needs a codebook".into()))?;
            let sel = select_pool5(
                tensor(record, Layer::Pool5, Orientation::Original)?,
                config.connectivity,
            )?;
            (aggregation::vlad_encode_guarded(&sel.descriptors, codebook)?, sel)
        }
        other => {
            return Err(Error::InvalidRecord(format!(
                "{other} features are not produced from tensors"
            )))
        }
    };
    let bbox = selection::mask_to_bbox(&sel.largest, record.image_height(), record.image_width())?;
    Ok(ImageFeature {
        feature,
        selected: sel.descriptors.len(),
        mask: sel.largest,
        bbox,
    })
}

/// Whole-object box predicted from the `pool5` tensor. With
/// `largest_only = false` the raw threshold mask is used (an empty mask then
/// falls back to the full image).
pub fn predict_bbox(record: &TensorRecord, connectivity: Connectivity, largest_only: bool) -> Result<BoundingBox> {
    let pool5 = tensor(record, Layer::Pool5, Orientation::Original)?;
    let masks = selection::object_mask(pool5, connectivity);
    let mask = if largest_only { &masks.largest } else { &masks.mask };
    selection::mask_to_bbox(mask, record.image_height(), record.image_width())
}
