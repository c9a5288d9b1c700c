//! Exact cosine-similarity search over an immutable gallery.
//!
//! Rows are ℓ2-normalized once at build time and stored as `f32`; the `f64`
//! norm of each stored row is kept alongside so that scores are true cosines
//! of the stored values. Ranking is by descending score, ties by ascending
//! gallery position.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{l2_normalize, norm};
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureStore, NO_LABEL};

const MAGIC: [u8; 4] = *b"SCDI";
const VERSION: u32 = 1;

/// Describes how per-query average precision is normalized in reports.
pub const AP_NORMALIZATION: &str = "min(k, R_q)";

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    labels: Vec<Option<u32>>,
    dim: usize,
    matrix: Vec<f32>,
    norms: Vec<f64>,
    label_counts: HashMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    /// Position of the item in the gallery.
    pub index: usize,
    pub id: String,
    pub score: f64,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub ranked: Vec<Hit>,
    /// `relevant[p]` is true iff `ranked[p]` shares the query's label.
    pub relevant: Vec<bool>,
}

/// A labelled query for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub id: String,
    pub label: Option<u32>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    Descending,
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub k: usize,
    pub map: f64,
    pub normalization: String,
    pub per_query: Vec<QueryAp>,
}

fn by_rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl GalleryIndex {
    /// Normalizes and stores the features. Ids must be unique and every
    /// vector nonzero with the same length.
    pub fn build<V: AsRef<[f64]>>(features: &[V], labels: &[Option<u32>], ids: &[String]) -> Result<Self> {
        if features.len() != labels.len() || features.len() != ids.len() {
            return Err(Error::dims(
                format!("{} features, labels and ids", features.len()),
                format!("{} labels, {} ids", labels.len(), ids.len()),
            ));
        }
        if features.is_empty() {
            return Err(Error::InvalidRecord("empty gallery".into()));
        }
        let dim = features[0].as_ref().len();
        let mut matrix = Vec::with_capacity(features.len() * dim);
        for f in features {
            let f = f.as_ref();
            if f.len() != dim {
                return Err(Error::dims(dim, f.len()));
            }
            matrix.extend(l2_normalize(f)?.into_iter().map(|v| v as f32));
        }
        Self::from_parts(ids.to_vec(), labels.to_vec(), dim, matrix)
    }

    /// Builds from the rows of a feature store whose ids satisfy `keep`.
    pub fn from_store(store: &FeatureStore, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let rows: Vec<usize> = (0..store.len()).filter(|&i| keep(&store.ids()[i])).collect();
        let features: Vec<Vec<f64>> = rows.iter().map(|&i| store.row_f64(i)).collect();
        let labels: Vec<Option<u32>> = rows.iter().map(|&i| store.labels()[i]).collect();
        let ids: Vec<String> = rows.iter().map(|&i| store.ids()[i].clone()).collect();
        Self::build(&features, &labels, &ids)
    }

    fn from_parts(ids: Vec<String>, labels: Vec<Option<u32>>, dim: usize, matrix: Vec<f32>) -> Result<Self> {
        if ids.is_empty() || dim == 0 {
            return Err(Error::InvalidRecord("empty gallery".into()));
        }
        let mut seen = HashMap::with_capacity(ids.len());
        for id in &ids {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if labels.contains(&Some(NO_LABEL)) {
            return Err(Error::InvalidRecord(format!("label {NO_LABEL} is reserved")));
        }
        let norms: Vec<f64> = matrix
            .chunks_exact(dim)
            .map(|r| norm(&r.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
            .collect();
        if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::ZeroVector);
        }
        let mut label_counts = HashMap::new();
        for l in labels.iter().flatten() {
            *label_counts.entry(*l).or_insert(0) += 1;
        }
        Ok(GalleryIndex {
            ids,
            labels,
            dim,
            matrix,
            norms,
            label_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of gallery items carrying `label`.
    pub fn label_count(&self, label: u32) -> usize {
        self.label_counts.get(&label).copied().unwrap_or(0)
    }

    /// Cosine similarity of `q` against every gallery row, in gallery order.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::dims(self.dim, q.len()));
        }
        let qn = norm(q);
        if qn == 0.0 || !qn.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(self
            .matrix
            .par_chunks_exact(self.dim)
            .zip(self.norms.par_iter())
            .map(|(row, rn)| {
                let dot: f64 = row.iter().zip(q).map(|(&a, b)| f64::from(a) * b).sum();
                dot / (rn * qn)
            })
            .collect())
    }

    /// The `k` best gallery items for `q` (`k > n` returns all of them).
    pub fn search(&self, q: &[f64], k: usize) -> Result<Vec<Hit>> {
        let scores = self.scores(q)?;
        let mut order: Vec<(f64, usize)> = scores.into_iter().zip(0..).collect();
        let k = k.min(order.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, by_rank);
            order.truncate(k);
        }
        order.sort_unstable_by(by_rank);
        Ok(order
            .into_iter()
            .map(|(score, index)| Hit {
                index,
                id: self.ids[index].clone(),
                score,
                label: self.labels[index],
            })
            .collect())
    }

    /// Ranked top-`k` list with relevance flags against `label`.
    pub fn query(&self, query_id: &str, q: &[f64], label: Option<u32>, k: usize) -> Result<RankedResult> {
        let ranked = self.search(q, k)?;
        let relevant = ranked.iter().map(|h| label.is_some() && h.label == label).collect();
        Ok(RankedResult {
            query_id: query_id.to_string(),
            ranked,
            relevant,
        })
    }

    /// Top-`k` average precision of one query.
    ///
    /// `AP@k = Σ_{p≤k} precision@p · rel(p) / min(k, R_q)` where `R_q` is
    /// the number of gallery items with the query's label; zero when there
    /// are none.
    pub fn average_precision(&self, q: &[f64], label: Option<u32>, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::InvalidRecord("k must be at least 1".into()));
        }
        let total = label.map_or(0, |l| self.label_count(l));
        if total == 0 {
            // still validates the query vector
            self.scores(q)?;
            return Ok(0.0);
        }
        let hits = self.search(q, k)?;
        let mut found = 0usize;
        let mut sum = 0.0;
        for (p, h) in hits.iter().enumerate() {
            if h.label == label {
                found += 1;
                sum += found as f64 / (p + 1) as f64;
            }
        }
        Ok(sum / k.min(total) as f64)
    }

    /// Mean top-`k` average precision over `queries`. Queries whose label is
    /// missing from the gallery count with AP 0.
    pub fn top_k_map(&self, queries: &[QueryItem], k: usize) -> Result<MapReport> {
        let aps: Vec<f64> = queries
            .par_iter()
            .map(|q| self.average_precision(&q.vector, q.label, k))
            .collect::<Result<_>>()?;
        let map = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        Ok(MapReport {
            k,
            map,
            normalization: AP_NORMALIZATION.to_string(),
            per_query: queries
                .iter()
                .zip(aps)
                .map(|(q, ap)| QueryAp { id: q.id.clone(), ap })
                .collect(),
        })
    }

    /// Gallery ids ordered by coordinate `dim_index`; ties keep gallery order.
    pub fn attribute_sort(&self, dim_index: usize, order: SortOrder) -> Result<Vec<String>> {
        if dim_index >= self.dim {
            return Err(Error::IndexOutOfRange {
                what: "dimension",
                index: dim_index,
                bound: self.dim,
            });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let value = |i: usize| self.matrix[i * self.dim + dim_index];
        match order {
            SortOrder::Descending => idx.sort_by(|&a, &b| value(b).total_cmp(&value(a))),
            SortOrder::Ascending => idx.sort_by(|&a, &b| value(a).total_cmp(&value(b))),
        }
        Ok(idx.into_iter().map(|i| self.ids[i].clone()).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.len_u32(self.len())?;
        w.len_u32(self.dim)?;
        for id in &self.ids {
            w.string(id)?;
        }
        for l in &self.labels {
            w.u32(l.unwrap_or(NO_LABEL));
        }
        w.f32s(self.matrix.iter().copied());
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let n = r.u32("count")? as usize;
        let dim = r.u32("dim")? as usize;
        let ids = (0..n).map(|_| r.string("id")).collect::<Result<Vec<_>>>()?;
        let labels = (0..n)
            .map(|_| r.u32("label").map(|l| (l != NO_LABEL).then_some(l)))
            .collect::<Result<Vec<_>>>()?;
        let count = n
            .checked_mul(dim)
            .ok_or_else(|| Error::Malformed("index matrix size overflows".into()))?;
        let matrix = r.f32s(count, "index matrix")?;
        r.finish()?;
        if let Some(offset) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { offset });
        }
        Self::from_parts(ids, labels, dim, matrix)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path.as_ref())?)
    }
}
