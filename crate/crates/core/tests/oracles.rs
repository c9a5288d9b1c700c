mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use scda::aggregation::{self, FeatureVector, Variant};
use scda::compression::{LinearTransform, TransformKind};
use scda::localization;
use scda::retrieval::{GalleryIndex, QueryItem, SortOrder};
use scda::selection::{self, BoundingBox, Connectivity, DescriptorSet, MaskMap};
use scda::tensor::{ActivationTensor, Layer, Orientation, StoredTensor};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as rows), largest eigenvalue first.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

fn gram(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    let mut g = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                g[i][j] += r[i] * r[j];
            }
        }
    }
    g
}

/// Frobenius norm of the part of `directions` outside span(`basis`); it
/// bounds the sine of the largest principal angle between the subspaces.
fn off_subspace(directions: &[&[f64]], basis: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for p in directions {
        let mut r = p.to_vec();
        for u in basis {
            let dot: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(u).for_each(|(x, b)| *x -= dot * b);
        }
        total += r.iter().map(|x| x * x).sum::<f64>();
    }
    total.sqrt()
}

#[test]
fn svd_subspace_matches_gram_eigenvectors() {
    let mut rng = rng(21);
    let gallery = random_rows(&mut rng, 200, 64);
    let t = LinearTransform::fit(&gallery, TransformKind::Svd, 16).unwrap();
    let (values, vectors) = jacobi_eigen(gram(&gallery));
    assert!(values[15] > values[16], "oracle needs an eigengap");
    let directions: Vec<&[f64]> = (0..16).map(|i| t.direction(i)).collect();
    let sin = off_subspace(&directions, &vectors[..16]);
    assert!(sin.asin() < 1e-4, "largest principal angle {}", sin.asin());
}

#[test]
fn pca_subspace_matches_centred_gram_eigenvectors() {
    let mut rng = rng(22);
    let mut gallery = random_rows(&mut rng, 200, 32);
    gallery.iter_mut().for_each(|r| r[0] += 5.0);
    let t = LinearTransform::fit(&gallery, TransformKind::Pca, 8).unwrap();
    let mean = t.mean().unwrap().to_vec();
    let centred: Vec<Vec<f64>> = gallery
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let (_, vectors) = jacobi_eigen(gram(&centred));
    let directions: Vec<&[f64]> = (0..8).map(|i| t.direction(i)).collect();
    assert!(off_subspace(&directions, &vectors[..8]).asin() < 1e-4);
}

#[test]
fn whitening_scale_matches_gram_eigenvalues() {
    let mut rng = rng(23);
    let gallery = random_rows(&mut rng, 300, 24);
    let t = LinearTransform::fit(&gallery, TransformKind::SvdWhiten, 10).unwrap();
    let (values, _) = jacobi_eigen(gram(&gallery));
    for (s, lambda) in t.scale().unwrap().iter().zip(&values) {
        let expected = (lambda / 300.0).sqrt();
        assert!(rel_err(*s, expected) < 1e-6, "{s} vs {expected}");
    }
}

#[test]
fn map_matches_enumeration_on_three_classes() {
    let mut rng = rng(24);
    let labels: Vec<Option<u32>> = (0..12).map(|i| Some(i % 3)).collect();
    let centres = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| {
            centres[l.unwrap() as usize]
                .iter()
                .map(|c| c + rng.random_range(-0.8..0.8))
                .collect()
        })
        .collect();
    let ids: Vec<String> = (0..12).map(|i| format!("g{i}")).collect();
    let index = GalleryIndex::build(&rows, &labels, &ids).unwrap();
    let stored: Vec<Vec<f64>> = (0..12)
        .map(|i| index.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let queries: Vec<QueryItem> = (0..9)
        .map(|i| QueryItem {
            id: format!("q{i}"),
            label: Some(i % 3),
            vector: centres[(i % 3) as usize]
                .iter()
                .map(|c| c + rng.random_range(-0.8..0.8))
                .collect(),
        })
        .collect();
    let report = index.top_k_map(&queries, 5).unwrap();
    let mut sum = 0.0;
    for (q, got) in queries.iter().zip(&report.per_query) {
        let expected = oracle_ap(
            &oracle_ranking(&oracle_cosines(&stored, &q.vector)),
            &labels,
            q.label,
            5,
        );
        assert!((got.ap - expected).abs() <= 1e-12);
        sum += expected;
    }
    assert!((report.map - sum / 9.0).abs() <= 1e-12);
    assert_eq!(report.normalization, "min(k, R_q)");
}

#[test]
fn attribute_sort_matches_stable_sort() {
    let mut rng = rng(25);
    // coarse values force ties
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..4).map(|_| f64::from(rng.random_range(1..6u8))).collect())
        .collect();
    let ids: Vec<String> = (0..40).map(|i| format!("g{i:02}")).collect();
    let index = GalleryIndex::build(&rows, &vec![None; 40], &ids).unwrap();
    for dim in 0..4 {
        let value = |i: usize| index.row(i)[dim];
        let mut desc: Vec<usize> = (0..40).collect();
        desc.sort_by(|&a, &b| value(b).partial_cmp(&value(a)).unwrap());
        let mut asc: Vec<usize> = (0..40).collect();
        asc.sort_by(|&a, &b| value(a).partial_cmp(&value(b)).unwrap());
        let names = |v: Vec<usize>| v.into_iter().map(|i| ids[i].clone()).collect::<Vec<_>>();
        assert_eq!(index.attribute_sort(dim, SortOrder::Descending).unwrap(), names(desc));
        assert_eq!(index.attribute_sort(dim, SortOrder::Ascending).unwrap(), names(asc));
    }
}

#[test]
fn fuse_matches_elementwise_and() {
    let mut rng = rng(26);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let a = random_mask(&mut rng, h, w, 0.4);
        let b = random_mask(&mut rng, h, w, 0.4);
        let and: Vec<bool> = a.bits().iter().zip(b.bits()).map(|(x, y)| *x && *y).collect();
        let fused = selection::fuse_masks(&a, &b).unwrap();
        if and.iter().any(|&x| x) {
            assert_eq!(fused.bits(), and.as_slice());
        } else {
            assert_eq!(fused, a);
        }
    }
}

#[test]
fn coverage_histogram_matches_area_ratio() {
    let mut rng = rng(27);
    let mut items = Vec::new();
    let mut expected = [0usize; 10];
    for _ in 0..300 {
        let (h, w) = (rng.random_range(1..300u32), rng.random_range(1..300u32));
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
        let area = f64::from((x1 - x0 + 1) * (y1 - y0 + 1));
        let ratio = area / f64::from(h * w);
        let bin = if ratio >= 1.0 { 9 } else { (ratio * 10.0) as usize };
        expected[bin] += 1;
        items.push((BoundingBox::new(x0, y0, x1, y1).unwrap(), h, w));
    }
    assert_eq!(localization::coverage_histogram(&items).unwrap(), expected);
}

#[test]
fn trained_codebook_recovers_cloud_means() {
    let mut rng = rng(28);
    let mut samples: Vec<Vec<f32>> = Vec::new();
    let means = [[10.0f32, 0.0, 0.0], [0.0, 0.0, -10.0]];
    for m in means {
        for _ in 0..200 {
            samples.push(m.iter().map(|c| c + rng.random_range(-0.5..0.5)).collect());
        }
    }
    let refs: Vec<&[f32]> = samples.iter().map(Vec::as_slice).collect();
    let cb = aggregation::train_codebook(&refs, 2, 3, Default::default()).unwrap();
    for half in 0..2 {
        let cloud = &samples[half * 200..(half + 1) * 200];
        let mean: Vec<f64> = oracle_avg(cloud);
        let (k, _) = cb.nearest(&cloud[0]);
        for (c, m) in cb.centroids()[k].iter().zip(&mean) {
            assert!((c - m).abs() < 1e-3);
        }
    }
}

fn tensor_strategy() -> impl Strategy<Value = ActivationTensor> {
    (1usize..8, 1usize..8, 1usize..12).prop_flat_map(|(h, w, d)| {
        prop::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..100.0], h * w * d)
            .prop_map(move |v| ActivationTensor::new(h, w, d, v, Layer::Pool5, Orientation::Original).unwrap())
    })
}

fn mask_strategy() -> impl Strategy<Value = MaskMap> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| MaskMap::new(h, w, bits).unwrap())
    })
}

proptest! {
    #[test]
    fn aggregation_map_preserves_total(t in tensor_strategy()) {
        let total: f64 = t.values().iter().map(|&v| f64::from(v)).sum();
        let summed: f64 = t.aggregation_map().values().iter().sum();
        prop_assert!(rel_err(total, summed) <= 1e-6);
    }

    #[test]
    fn feature_maps_agree_with_descriptors(t in tensor_strategy()) {
        for n in 0..t.depth() {
            let map = t.feature_map(n).unwrap();
            for i in 0..t.height() {
                for j in 0..t.width() {
                    prop_assert_eq!(f64::from(t.descriptor_at(i, j).unwrap()[n]), map.get(i, j));
                }
            }
        }
    }

    #[test]
    fn tensor_file_round_trip(t in tensor_strategy(), ih in 1u32..2000, iw in 1u32..2000) {
        let stored = StoredTensor { image_height: ih, image_width: iw, tensor: t };
        let back = StoredTensor::from_bytes(&stored.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, stored);
    }

    #[test]
    fn largest_component_is_the_biggest_subset(m in mask_strategy(), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let largest = selection::largest_component(&m, conn);
        let comps = selection::connected_components(&m, conn);
        match comps.iter().map(|c| c.size()).max() {
            None => prop_assert_eq!(largest.count_ones(), m.height() * m.width()),
            Some(max) => {
                prop_assert_eq!(largest.count_ones(), max);
                prop_assert!(largest.ones_positions().all(|(r, c)| m.get(r, c)));
                prop_assert_eq!(cells(&largest), oracle_largest(&m, eight));
            }
        }
    }

    #[test]
    fn selection_keeps_masked_descriptors(t in tensor_strategy(), seed in any::<u64>()) {
        let mut rng = rng(seed);
        let mask = random_mask(&mut rng, t.height(), t.width(), 0.5);
        match selection::select_descriptors(&t, &mask) {
            Ok(set) => {
                prop_assert_eq!(set.len(), mask.count_ones());
                for (&(r, c), v) in set.positions().iter().zip(set.iter()) {
                    prop_assert_eq!(v, t.descriptor_at(r, c).unwrap());
                }
            }
            Err(_) => prop_assert!(mask.is_empty()),
        }
    }

    #[test]
    fn pooled_features_are_ordered_and_unit(t in tensor_strategy()) {
        let set = DescriptorSet::from_descriptors(t.depth(), t.descriptors()).unwrap();
        let avg = aggregation::avg_pool(&set).unwrap();
        let max = aggregation::max_pool(&set).unwrap();
        prop_assert!(avg.iter().zip(&max).all(|(a, m)| a <= m));
        if max.iter().any(|&m| m > 0.0) {
            let f = aggregation::scda(&set).unwrap();
            prop_assert!((f.norm() - 1.0).abs() <= 1e-9);
            let plus = aggregation::scda_plus(&f, &f, 0.5).unwrap();
            prop_assert!((plus.norm() - 1.0).abs() <= 1e-9);
            let flip = aggregation::scda_flip_plus(&plus, &plus).unwrap();
            prop_assert!((flip.norm() - 1.0).abs() <= 1e-9);
            prop_assert_eq!(flip.dim(), 8 * t.depth());
        }
    }

    #[test]
    fn map_is_bounded_and_permutation_invariant(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = rng(seed);
        let n = 15;
        let rows = random_rows(&mut rng, n, 6);
        let labels: Vec<Option<u32>> = (0..n).map(|_| Some(rng.random_range(0..3))).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("g{i}")).collect();
        let queries: Vec<QueryItem> = (0..5)
            .map(|i| QueryItem { id: format!("q{i}"), label: Some(rng.random_range(0..4)), vector: random_rows(&mut rng, 1, 6).remove(0) })
            .collect();
        let a = GalleryIndex::build(&rows, &labels, &ids).unwrap().top_k_map(&queries, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.map));

        let perm: Vec<usize> = (0..n).rev().collect();
        let pick = |v: &[_]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let ids_p: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
        let b = GalleryIndex::build(&rows_p, &pick(&labels), &ids_p).unwrap().top_k_map(&queries, k).unwrap();
        prop_assert!((a.map - b.map).abs() <= 1e-12);
    }

    #[test]
    fn feature_vectors_round_trip_through_compression(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let gallery = random_rows(&mut rng, 20, 8);
        let t = LinearTransform::fit(&gallery, TransformKind::Pca, 4).unwrap();
        let back = LinearTransform::from_bytes(&t.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &t);
        let f: FeatureVector = t.apply(&gallery[3]).unwrap();
        prop_assert_eq!(f.variant(), Variant::Compressed);
        prop_assert_eq!(back.apply(&gallery[3]).unwrap(), f);
    }
}
