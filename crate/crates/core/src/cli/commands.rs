use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::manifest::{Manifest, Split};
use super::{
    at_path, CliError, Command, CompressArgs, EvalLocArgs, EvalMapArgs, FeaturesArgs, IndexArgs, QueryArgs, SortDimArgs,
};
use crate::aggregation::{self, KMeansParams, Variant};
use crate::codec::write_atomic;
use crate::compression::LinearTransform;
use crate::feature_store::FeatureStore;
use crate::localization::{self, GroundTruth};
use crate::pipeline::{self, PipelineConfig};
use crate::retrieval::{GalleryIndex, QueryItem, SortOrder};
use crate::selection::Connectivity;
use crate::tensor::{Layer, Orientation};

pub(super) fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Features(a) => features(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::EvalMap(a) => eval_map(a),
        Command::EvalLoc(a) => eval_loc(a),
        Command::Compress(a) => compress(a),
        Command::SortDim(a) => sort_dim(a),
    }
}

/// Pending output file; nothing is written until every output is ready.
struct Output {
    path: PathBuf,
    bytes: Vec<u8>,
}

fn write_all(outputs: Vec<Output>) -> Result<(), CliError> {
    for o in outputs {
        write_atomic(&o.path, &o.bytes).map_err(CliError::from)?;
        log::info!("wrote {}", o.path.display());
    }
    Ok(())
}

fn json_output(path: &Path, value: &impl Serialize) -> Result<Output, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::new("json", e.to_string()))?;
    bytes.push(b'\n');
    Ok(Output {
        path: path.to_path_buf(),
        bytes,
    })
}

fn load_store(path: &Path) -> Result<FeatureStore, CliError> {
    FeatureStore::load(path).map_err(at_path(path))
}

fn load_index(path: &Path) -> Result<GalleryIndex, CliError> {
    GalleryIndex::load(path).map_err(at_path(path))
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SidecarLine<'a> {
    image_id: &'a str,
    selected: usize,
    bbox: [u32; 4],
    degenerate: bool,
}

fn features(a: &FeaturesArgs) -> Result<(), CliError> {
    if !a.alpha.is_finite() || a.alpha < 0.0 {
        return Err(CliError::new(
            "usage",
            format!("--alpha must be finite and >= 0, got {}", a.alpha),
        ));
    }
    let variant: Variant = a.variant.into();
    let manifest = Manifest::load(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(CliError::new(
            "manifest",
            format!("{} has no entries", a.manifest.display()),
        ));
    }
    let required = pipeline::required_tensors(variant)?;
    let missing = manifest.missing_tensors(&required);
    if !missing.is_empty() {
        return Err(CliError::new(
            "missing_tensors",
            format!(
                "{} missing tensor file(s) for {variant}:\n{}",
                missing.len(),
                missing.join("\n")
            ),
        ));
    }

    let records = (0..manifest.entries.len())
        .into_par_iter()
        .map(|i| manifest.load_record(i, &required))
        .collect::<Result<Vec<_>, _>>()?;

    let config = PipelineConfig {
        variant,
        alpha: a.alpha,
        connectivity: a.connectivity.into(),
    };

    let codebook = if variant == Variant::Vlad {
        let gallery: Vec<_> = records
            .iter()
            .zip(&manifest.entries)
            .filter(|(_, e)| e.split == Split::Gallery)
            .map(|(r, _)| r)
            .collect();
        if gallery.is_empty() {
            return Err(CliError::new(
                "manifest",
                "VLAD codebook needs a non-empty gallery split",
            ));
        }
        let selections = gallery
            .par_iter()
            .map(|r| {
                let t = r
                    .get(&Layer::Pool5, Orientation::Original)
                    .expect("pool5 presence checked above");
                pipeline::select_pool5(t, config.connectivity)
            })
            .collect::<crate::Result<Vec<_>>>()?;
        let samples: Vec<&[f32]> = selections.iter().flat_map(|s| s.descriptors.iter()).collect();
        log::info!(
            "training {}-centroid codebook on {} descriptors",
            a.clusters,
            samples.len()
        );
        Some(aggregation::train_codebook(
            &samples,
            a.clusters,
            a.seed,
            KMeansParams::default(),
        )?)
    } else {
        None
    };

    let results = records
        .par_iter()
        .map(|r| {
            pipeline::image_feature(r, &config, codebook.as_ref()).map_err(|e| CliError::from(e).context(r.image_id()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut store = FeatureStore::new(variant, results[0].feature.dim());
    let mut sidecar = Vec::new();
    let mut outputs = Vec::new();
    for (entry, out) in manifest.entries.iter().zip(&results) {
        if out.feature.is_degenerate() {
            log::warn!("{}: zero encoding kept unnormalized", entry.image_id);
        }
        store
            .push(&entry.image_id, entry.label, &out.feature)
            .map_err(|e| CliError::from(e).context(&entry.image_id))?;
        if a.sidecar.is_some() {
            let line = SidecarLine {
                image_id: &entry.image_id,
                selected: out.selected,
                bbox: out.bbox.into(),
                degenerate: out.feature.is_degenerate(),
            };
            sidecar.extend(serde_json::to_vec(&line).map_err(|e| CliError::new("json", e.to_string()))?);
            sidecar.push(b'\n');
        }
        if let Some(dir) = &a.mask_dir {
            outputs.push(Output {
                path: dir.join(format!("{}.pgm", file_stem_for(&entry.image_id))),
                bytes: out.mask.to_pgm(),
            });
        }
    }
    if let Some(dir) = &a.mask_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    if let Some(path) = &a.sidecar {
        outputs.push(Output {
            path: path.clone(),
            bytes: sidecar,
        });
    }
    outputs.push(Output {
        path: a.out.clone(),
        bytes: store.to_bytes()?,
    });
    write_all(outputs)?;
    println!(
        "{} {variant} features of dim {} -> {}",
        store.len(),
        store.dim(),
        a.out.display()
    );
    Ok(())
}

fn split_ids(path: &Path, split: Split) -> Result<Vec<String>, CliError> {
    Ok(Manifest::load(path)?.split(split).map(|e| e.image_id.clone()).collect())
}

fn require_in_store(store: &FeatureStore, ids: &[String], store_path: &Path) -> Result<(), CliError> {
    let absent: Vec<&String> = ids.iter().filter(|id| store.position(id).is_none()).collect();
    if absent.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            "missing_features",
            format!("{}: no features for {absent:?}", store_path.display()),
        ))
    }
}

fn index(a: &IndexArgs) -> Result<(), CliError> {
    let store = load_store(&a.features)?;
    let index = match &a.manifest {
        Some(m) => {
            let gallery = split_ids(m, Split::Gallery)?;
            if gallery.is_empty() {
                return Err(CliError::new(
                    "manifest",
                    format!("{}: gallery split is empty", m.display()),
                ));
            }
            require_in_store(&store, &gallery, &a.features)?;
            let keep: HashSet<String> = gallery.into_iter().collect();
            GalleryIndex::from_store(&store, |id| keep.contains(id))?
        }
        None => GalleryIndex::from_store(&store, |_| true)?,
    };
    write_all(vec![Output {
        path: a.out.clone(),
        bytes: index.to_bytes()?,
    }])?;
    println!(
        "indexed {} items of dim {} -> {}",
        index.len(),
        index.dim(),
        a.out.display()
    );
    Ok(())
}

fn check_k(k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::new("usage", "--k must be at least 1"));
    }
    Ok(())
}

fn query(a: &QueryArgs) -> Result<(), CliError> {
    check_k(a.k)?;
    let index = load_index(&a.index)?;
    let store = load_store(&a.features)?;
    let ids = if a.ids.is_empty() {
        store.ids().to_vec()
    } else {
        a.ids.clone()
    };
    require_in_store(&store, &ids, &a.features)?;
    let results = ids
        .par_iter()
        .map(|id| {
            let i = store.position(id).expect("presence checked");
            index
                .query(id, &store.row_f64(i), store.labels()[i], a.k)
                .map_err(|e| CliError::from(e).context(id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_all(vec![json_output(&a.out, &results)?])?;
    println!("{} queries -> {}", results.len(), a.out.display());
    Ok(())
}

fn eval_map(a: &EvalMapArgs) -> Result<(), CliError> {
    check_k(a.k)?;
    let index = load_index(&a.index)?;
    let store = load_store(&a.features)?;
    let ids: Vec<String> = match &a.manifest {
        Some(m) => split_ids(m, Split::Query)?,
        None => {
            let gallery: HashSet<&String> = index.ids().iter().collect();
            store.ids().iter().filter(|id| !gallery.contains(id)).cloned().collect()
        }
    };
    if ids.is_empty() {
        return Err(CliError::new("usage", "no query features to evaluate"));
    }
    require_in_store(&store, &ids, &a.features)?;
    let queries: Vec<QueryItem> = ids
        .into_iter()
        .map(|id| {
            let i = store.position(&id).expect("presence checked");
            QueryItem {
                label: store.labels()[i],
                vector: store.row_f64(i),
                id,
            }
        })
        .collect();
    let report = index.top_k_map(&queries, a.k)?;
    write_all(vec![json_output(&a.out, &report)?])?;
    println!(
        "top-{} mAP over {} queries: {:.4}",
        report.k,
        report.per_query.len(),
        report.map
    );
    Ok(())
}

fn eval_loc(a: &EvalLocArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&a.manifest)?;
    let with_gt: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].gt_bbox.is_some())
        .collect();
    if with_gt.is_empty() {
        return Err(CliError::new(
            "manifest",
            format!("{}: no entry has gt_bbox", a.manifest.display()),
        ));
    }
    let required = [(Layer::Pool5, Orientation::Original)];
    let missing = manifest.missing_tensors_for(with_gt.iter().copied(), &required);
    if !missing.is_empty() {
        return Err(CliError::new("missing_tensors", missing.join("\n")));
    }
    let connectivity: Connectivity = a.connectivity.into();
    let preds = with_gt
        .par_iter()
        .map(|&i| {
            let record = manifest.load_record(i, &required)?;
            let bbox = pipeline::predict_bbox(&record, connectivity, !a.no_largest_component)?;
            Ok((record.image_id().to_string(), bbox))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let gts = with_gt
        .iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            let gt = GroundTruth {
                bbox: e.gt_bbox.expect("filtered"),
                image_height: e.image_height,
                image_width: e.image_width,
            };
            (e.image_id.clone(), gt)
        })
        .collect();
    let report = localization::evaluate(&preds.into_iter().collect(), &gts)?;
    write_all(vec![json_output(&a.out, &report)?])?;
    println!(
        "PCP@{} over {} images: {:.4}",
        report.threshold,
        report.per_image.len(),
        report.pcp
    );
    Ok(())
}

fn compress(a: &CompressArgs) -> Result<(), CliError> {
    let store = load_store(&a.features)?;
    let transform = match &a.transform {
        Some(path) => LinearTransform::load(path).map_err(at_path(path))?,
        None => {
            let kind = a.kind.expect("clap requires --compress without --transform").into();
            let dim = a.dim.expect("clap requires --dim without --transform");
            let rows: Vec<usize> = match &a.manifest {
                Some(m) => {
                    let gallery = split_ids(m, Split::Gallery)?;
                    require_in_store(&store, &gallery, &a.features)?;
                    gallery.iter().map(|id| store.position(id).expect("checked")).collect()
                }
                None => (0..store.len()).collect(),
            };
            let fit_rows: Vec<Vec<f64>> = rows.iter().map(|&i| store.row_f64(i)).collect();
            LinearTransform::fit(&fit_rows, kind, dim)?
        }
    };
    if transform.source_dim() != store.dim() {
        return Err(CliError::new(
            "dimension_mismatch",
            format!(
                "transform expects dim {}, store has {}",
                transform.source_dim(),
                store.dim()
            ),
        ));
    }
    let compressed = (0..store.len())
        .into_par_iter()
        .map(|i| {
            transform
                .apply(&store.row_f64(i))
                .map_err(|e| CliError::from(e).context(&store.ids()[i]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = FeatureStore::new(Variant::Compressed, transform.target_dim());
    for (i, f) in compressed.iter().enumerate() {
        out.push(store.ids()[i].clone(), store.labels()[i], f)?;
    }
    let mut outputs = Vec::new();
    if let Some(path) = &a.transform_out {
        outputs.push(Output {
            path: path.clone(),
            bytes: transform.to_bytes()?,
        });
    }
    outputs.push(Output {
        path: a.out.clone(),
        bytes: out.to_bytes()?,
    });
    write_all(outputs)?;
    println!(
        "{} features {} -> {} dims ({}) -> {}",
        out.len(),
        transform.source_dim(),
        transform.target_dim(),
        transform.kind(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SortReport {
    dim_index: usize,
    order: SortOrder,
    ids: Vec<String>,
}

fn sort_dim(a: &SortDimArgs) -> Result<(), CliError> {
    let index = load_index(&a.index)?;
    let order: SortOrder = a.order.into();
    let ids = index.attribute_sort(a.dim_index, order)?;
    let report = SortReport {
        dim_index: a.dim_index,
        order,
        ids,
    };
    write_all(vec![json_output(&a.out, &report)?])?;
    println!("sorted {} ids by dimension {}", report.ids.len(), a.dim_index);
    Ok(())
}
