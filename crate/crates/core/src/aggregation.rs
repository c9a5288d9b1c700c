//! Pooling selected descriptors into image-level features.
//!
//! The SCDA feature concatenates the ℓ2-normalized average- and max-pooled
//! descriptors and renormalizes the result, so each half carries half the
//! energy. Multi-layer and flip ensembles concatenate further SCDA features.
//! VLAD over a small k-means codebook is kept as an encoding baseline.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::DescriptorSet;

/// Default weight of the `relu5_2` half in the multi-layer ensemble.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Avg,
    Max,
    Scda,
    ScdaPlus,
    ScdaFlipPlus,
    Vlad,
    Compressed,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Avg => 1,
            Variant::Max => 2,
            Variant::Scda => 3,
            Variant::ScdaPlus => 4,
            Variant::ScdaFlipPlus => 5,
            Variant::Vlad => 6,
            Variant::Compressed => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Variant> {
        Ok(match tag {
            1 => Variant::Avg,
            2 => Variant::Max,
            3 => Variant::Scda,
            4 => Variant::ScdaPlus,
            5 => Variant::ScdaFlipPlus,
            6 => Variant::Vlad,
            7 => Variant::Compressed,
            tag => return Err(Error::UnknownTag { what: "variant", tag }),
        })
    }

    /// Feature length for descriptors of length `depth` (and `clusters`
    /// centroids for VLAD). `None` for compressed features, whose length is
    /// set by the transform.
    pub fn dim(self, depth: usize, clusters: usize) -> Option<usize> {
        match self {
            Variant::Avg | Variant::Max => Some(depth),
            Variant::Scda => Some(2 * depth),
            Variant::ScdaPlus => Some(4 * depth),
            Variant::ScdaFlipPlus => Some(8 * depth),
            Variant::Vlad => Some(clusters * depth),
            Variant::Compressed => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Avg => "avg",
            Variant::Max => "max",
            Variant::Scda => "scda",
            Variant::ScdaPlus => "scda_plus",
            Variant::ScdaFlipPlus => "scda_flip_plus",
            Variant::Vlad => "vlad",
            Variant::Compressed => "compressed",
        })
    }
}

/// An aggregated image representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    variant: Variant,
    degenerate: bool,
}

impl FeatureVector {
    /// Wraps values as-is, without normalizing.
    pub fn from_raw(values: Vec<f64>, variant: Variant) -> Self {
        FeatureVector {
            values,
            variant,
            degenerate: false,
        }
    }

    /// ℓ2-normalizes `values`; fails on the zero vector.
    pub fn normalized(values: Vec<f64>, variant: Variant) -> Result<Self> {
        Ok(FeatureVector::from_raw(l2_normalize(&values)?, variant))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// True when a zero vector had to be kept unnormalized.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn avg_pool(set: &DescriptorSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    let mut acc = vec![0.0f64; set.depth()];
    for d in set.iter() {
        for (a, &v) in acc.iter_mut().zip(d) {
            *a += f64::from(v);
        }
    }
    let n = set.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn max_pool(set: &DescriptorSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    let mut acc = vec![f32::NEG_INFINITY; set.depth()];
    for d in set.iter() {
        for (a, &v) in acc.iter_mut().zip(d) {
            *a = a.max(v);
        }
    }
    Ok(acc.into_iter().map(f64::from).collect())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn concat_normalized(parts: &[&[f64]], variant: Variant) -> Result<FeatureVector> {
    FeatureVector::normalized(parts.concat(), variant)
}

/// `[ℓ2(avg), ℓ2(max)]`, renormalized: a `2d` feature.
pub fn scda(set: &DescriptorSet) -> Result<FeatureVector> {
    let avg = l2_normalize(&avg_pool(set)?)?;
    let max = l2_normalize(&max_pool(set)?)?;
    concat_normalized(&[&avg, &max], Variant::Scda)
}

/// Multi-layer ensemble `ℓ2([scda_pool5, α·scda_relu5_2])`.
pub fn scda_plus(pool5: &FeatureVector, relu52: &FeatureVector, alpha: f64) -> Result<FeatureVector> {
    for f in [pool5, relu52] {
        if f.variant != Variant::Scda {
            return Err(Error::dims(Variant::Scda, f.variant));
        }
    }
    if pool5.dim() != relu52.dim() {
        return Err(Error::dims(pool5.dim(), relu52.dim()));
    }
    let scaled: Vec<f64> = relu52.values.iter().map(|v| alpha * v).collect();
    concat_normalized(&[&pool5.values, &scaled], Variant::ScdaPlus)
}

/// Concatenates the ensemble features of the original and mirrored image.
pub fn scda_flip_plus(original: &FeatureVector, flipped: &FeatureVector) -> Result<FeatureVector> {
    for f in [original, flipped] {
        if f.variant != Variant::ScdaPlus {
            return Err(Error::dims(Variant::ScdaPlus, f.variant));
        }
    }
    if original.dim() != flipped.dim() {
        return Err(Error::dims(original.dim(), flipped.dim()));
    }
    concat_normalized(&[&original.values, &flipped.values], Variant::ScdaFlipPlus)
}

/// k-means stopping rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iterations: usize,
    /// Stop once the relative change in inertia falls below this.
    pub tolerance: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iterations: 100,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VladCodebook {
    depth: usize,
    centroids: Vec<Vec<f64>>,
}

impl VladCodebook {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let depth = centroids.first().map_or(0, Vec::len);
        if depth == 0 {
            return Err(Error::InsufficientSamples {
                needed: 1,
                available: 0,
            });
        }
        if let Some(bad) = centroids.iter().find(|c| c.len() != depth) {
            return Err(Error::dims(depth, bad.len()));
        }
        if centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { offset: 0 });
        }
        Ok(VladCodebook { depth, centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Index of the closest centroid; ties go to the lower index.
    pub fn nearest<T: Copy + Into<f64>>(&self, x: &[T]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

fn sq_dist<T: Copy + Into<f64>>(x: &[T], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, b)| {
            let d = a.into() - b;
            d * d
        })
        .sum()
}

/// Trains a `k`-centroid codebook with k-means++ seeding and Lloyd updates.
///
/// Deterministic for a given `seed`: assignments may run in parallel but all
/// accumulation happens sequentially in sample order.
pub fn train_codebook(samples: &[&[f32]], k: usize, seed: u64, params: KMeansParams) -> Result<VladCodebook> {
    if k == 0 || samples.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k.max(1),
            available: samples.len(),
        });
    }
    let depth = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != depth) {
        return Err(Error::dims(depth, bad.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..samples.len());
    centroids.push(samples[first].iter().map(|&v| f64::from(v)).collect());
    let mut closest: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = closest.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientSamples {
                needed: k,
                available: centroids.len(),
            });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = closest.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in closest.iter().enumerate() {
            acc += d;
            if acc > target && d > 0.0 {
                pick = i;
                break;
            }
        }
        let c: Vec<f64> = samples[pick].iter().map(|&v| f64::from(v)).collect();
        for (slot, s) in closest.iter_mut().zip(samples) {
            *slot = slot.min(sq_dist(s, &c));
        }
        centroids.push(c);
    }

    let mut codebook = VladCodebook { depth, centroids };
    let mut previous = f64::INFINITY;
    for iteration in 0..params.max_iterations {
        let assignment: Vec<(usize, f64)> = samples.par_iter().map(|s| codebook.nearest(s)).collect();
        let inertia: f64 = assignment.iter().map(|a| a.1).sum();

        let mut sums = vec![vec![0.0f64; depth]; k];
        let mut counts = vec![0usize; k];
        for (s, &(c, _)) in samples.iter().zip(&assignment) {
            counts[c] += 1;
            for (acc, &v) in sums[c].iter_mut().zip(s.iter()) {
                *acc += f64::from(v);
            }
        }
        for ((centroid, sum), &count) in codebook.centroids.iter_mut().zip(sums).zip(&counts) {
            // an empty cluster keeps its previous centroid
            if count > 0 {
                *centroid = sum.into_iter().map(|v| v / count as f64).collect();
            }
        }

        let converged = inertia == 0.0 || (previous - inertia).abs() / previous < params.tolerance;
        log::trace!("k-means iteration {iteration}: inertia {inertia}");
        if converged {
            break;
        }
        previous = inertia;
    }
    Ok(codebook)
}

/// Unnormalized VLAD: per-centroid sums of residuals to the nearest centroid,
/// laid out block by block.
pub fn vlad_residuals(set: &DescriptorSet, codebook: &VladCodebook) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    if set.depth() != codebook.depth {
        return Err(Error::dims(codebook.depth, set.depth()));
    }
    let d = codebook.depth;
    let mut out = vec![0.0f64; codebook.k() * d];
    for x in set.iter() {
        let (k, _) = codebook.nearest(x);
        let block = &mut out[k * d..(k + 1) * d];
        for ((acc, &v), c) in block.iter_mut().zip(x).zip(&codebook.centroids[k]) {
            *acc += f64::from(v) - c;
        }
    }
    Ok(out)
}

fn signed_sqrt(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.signum() * x.abs().sqrt());
}

/// VLAD with signed square-root and ℓ2 normalization. Fails with
/// [`Error::ZeroVector`] when every residual vanishes.
pub fn vlad_encode(set: &DescriptorSet, codebook: &VladCodebook) -> Result<FeatureVector> {
    let mut v = vlad_residuals(set, codebook)?;
    signed_sqrt(&mut v);
    FeatureVector::normalized(v, Variant::Vlad)
}

/// Like [`vlad_encode`], but a zero encoding is kept unnormalized and flagged
/// as degenerate instead of failing.
pub fn vlad_encode_guarded(set: &DescriptorSet, codebook: &VladCodebook) -> Result<FeatureVector> {
    let mut v = vlad_residuals(set, codebook)?;
    signed_sqrt(&mut v);
    match l2_normalize(&v) {
        Ok(values) => Ok(FeatureVector::from_raw(values, Variant::Vlad)),
        Err(Error::ZeroVector) => Ok(FeatureVector {
            values: v,
            variant: Variant::Vlad,
            degenerate: true,
        }),
        Err(e) => Err(e),
    }
}
