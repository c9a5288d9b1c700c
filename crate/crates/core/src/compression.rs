//! Post-processing projections: SVD, PCA and SVD with whitening.
//!
//! All three project onto the leading right-singular directions of the
//! gallery matrix. SVD works on the raw matrix, PCA on the mean-centred one.
//! Whitening divides each component by `σᵢ/√n`, so the projected gallery has
//! unit second moment along every retained direction.
//!
//! Fitted parameters are rounded to `f32` at fit time. The in-memory transform
//! is then exactly what the `.scdt` file stores.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::aggregation::{FeatureVector, Variant};
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"SCDT";
const VERSION: u32 = 1;

/// Singular values at or below this fraction of the largest are treated as
/// zero.
pub const RANK_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Svd,
    Pca,
    SvdWhiten,
}

impl TransformKind {
    fn tag(self) -> u8 {
        match self {
            TransformKind::Svd => 1,
            TransformKind::Pca => 2,
            TransformKind::SvdWhiten => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => TransformKind::Svd,
            2 => TransformKind::Pca,
            3 => TransformKind::SvdWhiten,
            tag => {
                return Err(Error::UnknownTag {
                    what: "transform kind",
                    tag,
                })
            }
        })
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::Svd => "svd",
            TransformKind::Pca => "pca",
            TransformKind::SvdWhiten => "svd_whiten",
        })
    }
}

/// A fitted projection, applied identically to gallery and query features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform {
    kind: TransformKind,
    source_dim: usize,
    target_dim: usize,
    mean: Option<Vec<f64>>,
    /// `target_dim × source_dim`, row-major; rows are orthonormal.
    projection: Vec<f64>,
    scale: Option<Vec<f64>>,
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

impl LinearTransform {
    /// Fits on `rows` (the gallery). Fails with [`Error::RankDeficient`] if
    /// the data has fewer than `target_dim` significant directions.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R], kind: TransformKind, target_dim: usize) -> Result<Self> {
        let t = Self::fit_truncated(rows, kind, target_dim)?;
        if t.target_dim < target_dim {
            return Err(Error::RankDeficient {
                requested: target_dim,
                achieved: t.target_dim,
            });
        }
        Ok(t)
    }

    /// Like [`fit`](Self::fit), but silently keeps only as many components
    /// as the data supports.
    pub fn fit_truncated<R: AsRef<[f64]>>(rows: &[R], kind: TransformKind, target_dim: usize) -> Result<Self> {
        let n = rows.len();
        let source_dim = rows.first().map_or(0, |r| r.as_ref().len());
        if target_dim == 0 || n < target_dim {
            return Err(Error::InsufficientSamples {
                needed: target_dim.max(1),
                available: n,
            });
        }
        if target_dim > source_dim {
            return Err(Error::dims(format!("target dim <= {source_dim}"), target_dim));
        }
        if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != source_dim) {
            return Err(Error::dims(source_dim, bad.as_ref().len()));
        }

        let mean = (kind == TransformKind::Pca).then(|| {
            let mut m = vec![0.0f64; source_dim];
            for r in rows {
                for (a, v) in m.iter_mut().zip(r.as_ref()) {
                    *a += v;
                }
            }
            m.iter_mut().map(|a| round_f32(*a / n as f64)).collect::<Vec<_>>()
        });

        let data = DMatrix::from_fn(n, source_dim, |i, j| {
            let v = rows[i].as_ref()[j];
            match &mean {
                Some(m) => v - m[j],
                None => v,
            }
        });
        let svd = data.svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors were requested");
        let sigma = svd.singular_values;

        let mut order: Vec<usize> = (0..sigma.len()).collect();
        order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
        let largest = order.first().map_or(0.0, |&i| sigma[i]);
        let floor = RANK_EPSILON * largest;
        let rank = order
            .iter()
            .take_while(|&&i| sigma[i] > floor && sigma[i] > 0.0)
            .count();
        let kept = target_dim.min(rank);

        let mut projection = Vec::with_capacity(kept * source_dim);
        for &i in &order[..kept] {
            let row: Vec<f64> = v_t.row(i).iter().copied().collect();
            // sign convention: the largest-magnitude entry is positive
            let pivot = row
                .iter()
                .enumerate()
                .fold(
                    (0, 0.0f64),
                    |best, (j, v)| if v.abs() > best.1 { (j, v.abs()) } else { best },
                )
                .0;
            let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
            projection.extend(row.iter().map(|v| round_f32(sign * v)));
        }
        let scale = (kind == TransformKind::SvdWhiten).then(|| {
            let root_n = (n as f64).sqrt();
            order[..kept].iter().map(|&i| round_f32(sigma[i] / root_n)).collect()
        });
        if kept < target_dim {
            log::warn!("{kind}: requested {target_dim} components, data supports {rank}");
        }

        Ok(LinearTransform {
            kind,
            source_dim,
            target_dim: kept,
            mean,
            projection,
            scale,
        })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    pub fn scale(&self) -> Option<&[f64]> {
        self.scale.as_deref()
    }

    /// Row `i` of the projection matrix.
    pub fn direction(&self, i: usize) -> &[f64] {
        &self.projection[i * self.source_dim..(i + 1) * self.source_dim]
    }

    /// Centre, project and whiten, without the final normalization.
    pub fn apply_unnormalized(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.source_dim {
            return Err(Error::dims(self.source_dim, v.len()));
        }
        let centred: Vec<f64> = match &self.mean {
            Some(m) => v.iter().zip(m).map(|(a, b)| a - b).collect(),
            None => v.to_vec(),
        };
        let mut out: Vec<f64> = self
            .projection
            .chunks_exact(self.source_dim)
            .map(|row| row.iter().zip(&centred).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(scale) = &self.scale {
            out.iter_mut().zip(scale).for_each(|(o, s)| *o /= s);
        }
        Ok(out)
    }

    /// Projects and ℓ2-normalizes into a compressed feature.
    pub fn apply(&self, v: &[f64]) -> Result<FeatureVector> {
        FeatureVector::normalized(self.apply_unnormalized(v)?, Variant::Compressed)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u8(self.kind.tag());
        w.len_u32(self.target_dim)?;
        w.len_u32(self.source_dim)?;
        w.u8(u8::from(self.mean.is_some()));
        if let Some(m) = &self.mean {
            w.f32s(m.iter().map(|&v| v as f32));
        }
        w.f32s(self.projection.iter().map(|&v| v as f32));
        w.u8(u8::from(self.scale.is_some()));
        if let Some(s) = &self.scale {
            w.f32s(s.iter().map(|&v| v as f32));
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let kind = TransformKind::from_tag(r.u8("kind")?)?;
        let target_dim = r.u32("target dim")? as usize;
        let source_dim = r.u32("source dim")? as usize;
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        let mean = match r.u8("mean flag")? {
            0 => None,
            _ => Some(widen(r.f32s(source_dim, "mean")?)),
        };
        let count = target_dim
            .checked_mul(source_dim)
            .ok_or_else(|| Error::Malformed("projection size overflows".into()))?;
        let projection = widen(r.f32s(count, "projection")?);
        let scale = match r.u8("scale flag")? {
            0 => None,
            _ => Some(widen(r.f32s(target_dim, "scale")?)),
        };
        r.finish()?;
        if (kind == TransformKind::Pca) != mean.is_some() || (kind == TransformKind::SvdWhiten) != scale.is_some() {
            return Err(Error::Malformed(format!(
                "{kind} transform with inconsistent optional blocks"
            )));
        }
        if projection.iter().chain(mean.iter().flatten()).any(|v| !v.is_finite())
            || scale.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(Error::NonFinite { offset: 0 });
        }
        Ok(LinearTransform {
            kind,
            source_dim,
            target_dim,
            mean,
            projection,
            scale,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path.as_ref())?)
    }
}
