//! Generators and independent reference implementations shared by the
//! integration and acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scda::selection::{BoundingBox, MaskMap};
use scda::tensor::{self, ActivationTensor, Layer, Orientation, StoredTensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> MaskMap {
    let bits = (0..h * w).map(|_| rng.random_bool(density)).collect();
    MaskMap::new(h, w, bits).unwrap()
}

/// ReLU-like activations: about half the entries are exactly zero.
pub fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> ActivationTensor {
    let values = (0..h * w * d)
        .map(|_| {
            if rng.random_bool(0.5) {
                0.0
            } else {
                rng.random_range(0.0f32..4.0)
            }
        })
        .collect();
    ActivationTensor::new(h, w, d, values, Layer::Pool5, Orientation::Original).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// union-find connected components

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // the smaller root wins so roots are each set's first cell
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Components of `mask` as cell sets, ordered by their smallest cell.
pub fn oracle_components(mask: &MaskMap, eight: bool) -> Vec<BTreeSet<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    let mut uf = UnionFind::new(h * w);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            // forward neighbours only; every edge is seen once
            let mut nbrs = vec![(r, c + 1), (r + 1, c)];
            if eight {
                nbrs.push((r + 1, c + 1));
                if c > 0 {
                    nbrs.push((r + 1, c - 1));
                }
            }
            for (nr, nc) in nbrs {
                if nr < h && nc < w && mask.get(nr, nc) {
                    uf.union(r * w + c, nr * w + nc);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                let root = uf.find(r * w + c);
                groups.entry(root).or_default().insert((r, c));
            }
        }
    }
    groups.into_values().collect()
}

/// Largest component, first in row-major order on ties; all cells if empty.
pub fn oracle_largest(mask: &MaskMap, eight: bool) -> BTreeSet<(usize, usize)> {
    let comps = oracle_components(mask, eight);
    let mut best: Option<BTreeSet<(usize, usize)>> = None;
    for c in comps {
        if best.as_ref().is_none_or(|b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    best.unwrap_or_else(|| {
        (0..mask.height())
            .flat_map(|r| (0..mask.width()).map(move |c| (r, c)))
            .collect()
    })
}

pub fn cells(mask: &MaskMap) -> BTreeSet<(usize, usize)> {
    mask.ones_positions().collect()
}

// ---------------------------------------------------------------------------
// masks, pooling and VLAD by plain loops

/// First pass: channel sums and their mean. Second pass: strict compare.
pub fn oracle_threshold(t: &ActivationTensor) -> Vec<bool> {
    let (h, w, d) = (t.height(), t.width(), t.depth());
    let v = t.values();
    let mut sums = vec![0.0f64; h * w];
    let mut total = 0.0;
    for cell in 0..h * w {
        for ch in 0..d {
            sums[cell] += f64::from(v[cell * d + ch]);
        }
        total += sums[cell];
    }
    let mean = total / (h * w) as f64;
    sums.iter().map(|&s| s > mean).collect()
}

pub fn oracle_avg(descs: &[Vec<f32>]) -> Vec<f64> {
    let d = descs[0].len();
    let mut out = vec![0.0; d];
    for j in 0..d {
        for x in descs {
            out[j] += f64::from(x[j]);
        }
        out[j] /= descs.len() as f64;
    }
    out
}

pub fn oracle_max(descs: &[Vec<f32>]) -> Vec<f64> {
    let d = descs[0].len();
    (0..d)
        .map(|j| {
            let mut m = descs[0][j];
            for x in descs {
                if x[j] > m {
                    m = x[j];
                }
            }
            f64::from(m)
        })
        .collect()
}

pub fn oracle_assign(x: &[f32], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let mut dist = 0.0;
        for j in 0..x.len() {
            let diff = f64::from(x[j]) - c[j];
            dist += diff * diff;
        }
        if dist < best_d {
            best_d = dist;
            best = k;
        }
    }
    best
}

pub fn oracle_vlad_residuals(descs: &[Vec<f32>], centroids: &[Vec<f64>]) -> Vec<f64> {
    let d = centroids[0].len();
    let mut out = vec![0.0; centroids.len() * d];
    for x in descs {
        let k = oracle_assign(x, centroids);
        for j in 0..d {
            out[k * d + j] += f64::from(x[j]) - centroids[k][j];
        }
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------------------
// retrieval by exhaustive sort and direct enumeration

pub fn oracle_cosines(rows: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    rows.iter()
        .map(|r| {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            dot / (rn * qn)
        })
        .collect()
}

/// Every gallery position, best first; equal scores keep gallery order.
pub fn oracle_ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order
}

pub fn oracle_ap(ranking: &[usize], labels: &[Option<u32>], label: Option<u32>, k: usize) -> f64 {
    let Some(label) = label else { return 0.0 };
    let total = labels.iter().filter(|l| **l == Some(label)).count();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for p in 1..=k.min(ranking.len()) {
        if labels[ranking[p - 1]] != Some(label) {
            continue;
        }
        let hits = ranking[..p].iter().filter(|&&i| labels[i] == Some(label)).count();
        sum += hits as f64 / p as f64;
    }
    sum / k.min(total) as f64
}

// ---------------------------------------------------------------------------
// synthetic tensors and datasets

/// Cells `rows × cols` (inclusive ranges) carry `signature`, scaled by a
/// random factor in `[1, 1.5)`; the rest is noise in `[0, noise)`.
pub fn blob_tensor(
    rng: &mut ChaCha8Rng,
    (h, w, d): (usize, usize, usize),
    (r0, c0, r1, c1): (usize, usize, usize, usize),
    signature: &[f32],
    noise: f32,
    layer: Layer,
) -> ActivationTensor {
    let mut values = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            let inside = (r0..=r1).contains(&r) && (c0..=c1).contains(&c);
            for &s in &signature[..d] {
                let bg = rng.random_range(0.0..noise);
                values.push(if inside {
                    s * rng.random_range(1.0f32..1.5) + bg
                } else {
                    bg
                });
            }
        }
    }
    ActivationTensor::new(h, w, d, values, layer, Orientation::Original).unwrap()
}

/// Pixel box covered by a cell rectangle: cell `i` of `n` spans pixels
/// `⌊i·N/n⌋ ..= ⌊(i+1)·N/n⌋ - 1`.
pub fn cells_to_pixels(
    (r0, c0, r1, c1): (usize, usize, usize, usize),
    (h, w): (usize, usize),
    (image_h, image_w): (u32, u32),
) -> BoundingBox {
    let (ih, iw) = (image_h as usize, image_w as usize);
    BoundingBox::new(
        (c0 * iw / w) as u32,
        (r0 * ih / h) as u32,
        ((c1 + 1) * iw / w - 1) as u32,
        ((r1 + 1) * ih / h - 1) as u32,
    )
    .unwrap()
}

pub fn class_signature(class: usize, depth: usize, classes: usize) -> Vec<f32> {
    let band = depth / classes;
    (0..depth)
        .map(|ch| if ch / band == class { 1.0 } else { 0.02 })
        .collect()
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub ids: Vec<String>,
}

pub struct DatasetConfig {
    pub classes: usize,
    pub gallery_per_class: usize,
    pub query_per_class: usize,
    pub depth: usize,
    pub with_relu: bool,
    pub with_flip: bool,
    pub with_gt: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 3,
            gallery_per_class: 4,
            query_per_class: 2,
            depth: 24,
            with_relu: true,
            with_flip: true,
            with_gt: true,
            seed: 7,
        }
    }
}

fn save(dir: &Path, name: &str, tensor: ActivationTensor, image: (u32, u32)) -> serde_json::Value {
    let layer = tensor.layer().to_string();
    let orientation = tensor.orientation().to_string();
    let stored = StoredTensor {
        image_height: image.0,
        image_width: image.1,
        tensor,
    };
    tensor::store_tensor(&stored, dir.join(name)).unwrap();
    serde_json::json!({ "layer": layer, "orientation": orientation, "path": name })
}

/// Writes `.scdat` files and a manifest for blob images whose channel
/// signature identifies their class.
pub fn write_dataset(dir: &Path, config: &DatasetConfig) -> Dataset {
    let mut rng = rng(config.seed);
    let image = (224u32, 224u32);
    let mut lines = String::new();
    let mut ids = Vec::new();
    for class in 0..config.classes {
        let signature = class_signature(class, config.depth, config.classes);
        for n in 0..config.gallery_per_class + config.query_per_class {
            let id = format!("c{class}_{n:02}");
            let split = if n < config.gallery_per_class {
                "gallery"
            } else {
                "query"
            };
            let r0 = rng.random_range(0..4);
            let c0 = rng.random_range(0..4);
            let rect = (r0, c0, r0 + rng.random_range(1..3), c0 + rng.random_range(1..3));
            let pool5 = blob_tensor(&mut rng, (7, 7, config.depth), rect, &signature, 0.05, Layer::Pool5);
            let mut tensors = Vec::new();
            if config.with_flip {
                tensors.push(save(dir, &format!("{id}.pool5.flip.scdat"), pool5.hflip(), image));
            }
            tensors.push(save(dir, &format!("{id}.pool5.scdat"), pool5, image));
            if config.with_relu {
                let up = (2 * rect.0, 2 * rect.1, 2 * rect.2 + 1, 2 * rect.3 + 1);
                let relu = blob_tensor(&mut rng, (14, 14, config.depth), up, &signature, 0.05, Layer::Relu5_2);
                if config.with_flip {
                    tensors.push(save(dir, &format!("{id}.relu5_2.flip.scdat"), relu.hflip(), image));
                }
                tensors.push(save(dir, &format!("{id}.relu5_2.scdat"), relu, image));
            }
            let mut entry = serde_json::json!({
                "image_id": id,
                "label": class,
                "split": split,
                "image_height": image.0,
                "image_width": image.1,
                "tensors": tensors,
            });
            if config.with_gt {
                let gt: [u32; 4] = cells_to_pixels(rect, (7, 7), image).into();
                entry["gt_bbox"] = serde_json::json!(gt);
            }
            lines.push_str(&entry.to_string());
            lines.push('\n');
            ids.push(id);
        }
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines).unwrap();
    Dataset {
        dir: dir.to_path_buf(),
        manifest,
        ids,
    }
}

/// Runs the command line in-process.
pub fn cli<S: AsRef<str>>(args: &[S]) -> Result<(), scda::cli::CliError> {
    let argv = std::iter::once("scda").chain(args.iter().map(AsRef::as_ref));
    scda::cli::run(argv)
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
