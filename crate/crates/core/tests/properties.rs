use contextrast::anchors::{anchors_from_rows, fuse_anchors, AnchorSet};
use contextrast::bane::{
    build_negative_pools, distance_transform, extract_edges, select_negatives, BinaryErrorMap, Selection,
};
use contextrast::feature_store::io::{decode_grid, decode_pgm, encode_grid, encode_pgm};
use contextrast::feature_store::{
    downsample_labels, flatten, project, FeatureGrid, LabelMap, ProjectionHead, IGNORE,
};
use contextrast::losses::{info_nce, total_loss};
use contextrast::metrics::{
    alignment, boundary_miou, miou, neighborhood_uniformity, uniformity, ClassFeatures, ConfusionMatrix,
};
use contextrast::trainer::lr_at;
use proptest::prelude::*;

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
        .prop_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<(u8, Vec<f64>)>> {
    prop::collection::vec((0..n as u8, unit_vec(d)), 1..30)
}

fn label_map(n: u8) -> impl Strategy<Value = LabelMap> {
    (1usize..12, 1usize..12).prop_flat_map(move |(h, w)| {
        prop::collection::vec(prop_oneof![9 => 0..n, 1 => Just(IGNORE)], h * w)
            .prop_map(move |v| LabelMap::new(h, w, v).unwrap())
    })
}

fn error_map() -> impl Strategy<Value = BinaryErrorMap> {
    (1usize..14, 1usize..14).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| BinaryErrorMap::from_bits(h, w, bits).unwrap())
    })
}

fn anchors(layer: u32, d: usize, n: usize, rows: &[(u8, Vec<f64>)]) -> AnchorSet {
    anchors_from_rows(layer, d, n, rows.iter().map(|(c, v)| (*c, &v[..]))).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn projection_is_idempotent(data in prop::collection::vec(-3.0f32..3.0, 4 * 3)) {
        let grid = FeatureGrid::new(1, 2, 2, 3, data).unwrap();
        let once = project(&grid, &ProjectionHead::identity(3)).unwrap();
        let twice = project(&once.grid, &ProjectionHead::identity(3)).unwrap();
        for (a, b) in once.grid.data.iter().zip(&twice.grid.data) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn downsampling_keeps_values(
        (map, th, tw) in label_map(4).prop_flat_map(|m| (Just(m.clone()), 1..=m.height(), 1..=m.width()))
    ) {
        prop_assert_eq!(&downsample_labels(&map, map.dims()).unwrap(), &map);
        let small = downsample_labels(&map, (th, tw)).unwrap();
        prop_assert!(small.values().iter().all(|v| map.values().contains(v)));
    }

    #[test]
    fn flatten_counts_non_ignored(map in label_map(3)) {
        let (h, w) = map.dims();
        let grid = FeatureGrid::new(1, h, w, 2, vec![0.5; h * w * 2]).unwrap();
        let set = flatten(&grid, &map, &map).unwrap();
        prop_assert_eq!(set.len(), map.values().iter().filter(|&&v| v != IGNORE).count());
    }

    #[test]
    fn formats_round_trip(map in label_map(5), data in prop::collection::vec(any::<f32>(), 6)) {
        let pgm = encode_pgm(&map);
        prop_assert_eq!(encode_pgm(&decode_pgm(&pgm).unwrap()), pgm);
        let grid = FeatureGrid::new(2, 1, 3, 2, data).unwrap();
        let bytes = encode_grid(&grid).unwrap();
        prop_assert_eq!(encode_grid(&decode_grid(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn anchors_ignore_row_order(rows in rows(3, 4), seed in any::<u64>()) {
        let mut shuffled = rows.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (a, b) = (anchors(1, 4, 3, &rows), anchors(1, 4, 3, &shuffled));
        prop_assert_eq!(&a.valid, &b.valid);
        for (x, y) in a.anchors.iter().zip(&b.anchors) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn union_mean_is_count_weighted(left in rows(3, 4), right in rows(3, 4)) {
        let (a, b) = (anchors(1, 4, 3, &left), anchors(1, 4, 3, &right));
        let mut all = left.clone();
        all.extend(right.iter().cloned());
        let u = anchors(1, 4, 3, &all);
        for c in 0..3 {
            let (na, nb) = (a.counts[c] as f64, b.counts[c] as f64);
            if na + nb == 0.0 {
                continue;
            }
            for j in 0..4 {
                let want = (na * a.mean(c)[j] + nb * b.mean(c)[j]) / (na + nb);
                prop_assert!((u.mean(c)[j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fused_anchor_lies_between_sources(low in rows(3, 4), high in rows(3, 4), w_h in 0.01f64..0.99) {
        let (a, top) = (anchors(1, 4, 3, &low), anchors(4, 4, 3, &high));
        let f = fuse_anchors(&a, &top, 1.0 - w_h, w_h).unwrap();
        for c in 0..3 {
            if !(f.valid[c] && a.valid[c]) {
                continue;
            }
            // the fused direction is the normalised convex blend
            let blend: Vec<f64> = a.anchor(c).iter().zip(top.anchor(c)).map(|(x, y)| (1.0 - w_h) * x + w_h * y).collect();
            let len = dot(&blend, &blend).sqrt();
            for (x, y) in f.anchor(c).iter().zip(&blend) {
                prop_assert!((x - y / len).abs() <= 1e-12);
            }
        }
        let same = fuse_anchors(&top, &top, 1.0 - w_h, w_h).unwrap();
        prop_assert_eq!(&same.anchors, &top.anchors);
    }

    #[test]
    fn selection_invariants(map in error_map(), k1 in 0.0f64..=100.0, k2 in 0.0f64..=100.0) {
        let (h, w) = (map.height, map.width);
        let grid = FeatureGrid::new(1, h, w, 1, vec![1.0; h * w]).unwrap();
        let labels = LabelMap::new(h, w, vec![0; h * w]).unwrap();
        let set = flatten(&grid, &labels, &labels).unwrap();
        let dist = distance_transform(&map, &extract_edges(&map)).unwrap();
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let a = select_negatives(&dist, &map, &set, lo).unwrap();
        let b = select_negatives(&dist, &map, &set, hi).unwrap();
        prop_assert!(a.entries.iter().all(|e| b.entries.contains(e)));
        prop_assert!(b.entries.iter().all(|&e| map.bits[e]));
        let worst = b.squared_distances.iter().max().copied().unwrap_or(0);
        for i in (0..h * w).filter(|&i| map.bits[i] && !b.entries.contains(&i)) {
            prop_assert!(dist.squared[i] >= worst);
        }
    }

    #[test]
    fn pools_never_hold_own_class(sizes in prop::collection::vec(0usize..6, 2..5)) {
        let n = sizes.len();
        let selections: Vec<Selection> = sizes
            .iter()
            .enumerate()
            .map(|(c, &k)| Selection {
                class: c as u8,
                ratio: 50.0,
                entries: (0..k).map(|i| c * 100 + i).collect(),
                squared_distances: (0..k as u64).collect(),
            })
            .collect();
        for (c, pool) in build_negative_pools(&selections, n, 1000).iter().enumerate() {
            prop_assert!(pool.iter().all(|&e| e / 100 != c));
        }
    }

    #[test]
    fn adding_a_negative_raises_the_loss(a in unit_vec(5), p in unit_vec(5), negs in prop::collection::vec(unit_vec(5), 0..4), extra in unit_vec(5)) {
        let n: Vec<&[f64]> = negs.iter().map(|v| &v[..]).collect();
        let mut more = n.clone();
        more.push(&extra);
        let base = info_nce(&a, &[&p], &n, 0.1).unwrap().loss;
        let raised = info_nce(&a, &[&p], &more, 0.1).unwrap().loss;
        prop_assert!(raised > base);
        prop_assert_eq!(info_nce(&a, &[&p], &[], 0.1).unwrap().loss, 0.0);
    }

    #[test]
    fn small_temperature_stays_finite(a in unit_vec(3), p in unit_vec(3), negs in prop::collection::vec(unit_vec(3), 1..5)) {
        let n: Vec<&[f64]> = negs.iter().map(|v| &v[..]).collect();
        let r = info_nce(&a, &[&p], &n, 0.01).unwrap();
        prop_assert!(r.loss.is_finite() && r.grad_anchor.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn total_is_ce_plus_weighted_pa(ce in 0.0f64..10.0, pa in 0.0f64..10.0, alpha in 0.0f64..1.0) {
        prop_assert_eq!(total_loss(ce, pa, alpha), ce + alpha * pa);
    }

    #[test]
    fn iou_is_symmetric_in_pred_and_gt(gt in label_map(3), seed in any::<u64>()) {
        let pred_values: Vec<u8> = gt.values().iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) % 3) as u8).collect();
        let (h, w) = gt.dims();
        let pred = LabelMap::new(h, w, pred_values).unwrap();
        // IGNORE only lives in gt, so compare on the pixels both score
        let gt_clean = LabelMap::new(h, w, gt.values().iter().zip(pred.values()).map(|(&g, &p)| if g == IGNORE { p } else { g }).collect()).unwrap();
        let mut ab = ConfusionMatrix::new(3);
        ab.add(&pred, &gt_clean).unwrap();
        let mut ba = ConfusionMatrix::new(3);
        ba.add(&gt_clean, &pred).unwrap();
        prop_assert_eq!(miou(&ab).unwrap().per_class, miou(&ba).unwrap().per_class);
    }

    #[test]
    fn infinite_radius_boundary_miou_is_miou(gt in label_map(3), seed in any::<u64>()) {
        let (h, w) = gt.dims();
        let pred = LabelMap::new(h, w, (0..h * w).map(|i| ((seed >> (i % 60)) % 3) as u8).collect()).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&pred, &gt).unwrap();
        if let (Ok(m), Ok(b)) = (miou(&cm), boundary_miou(&pred, &gt, f64::INFINITY, 3)) {
            prop_assert_eq!(m.miou, b);
        }
    }

    #[test]
    fn feature_metrics_ignore_translation(
        feats in prop::collection::vec((0usize..4, prop::collection::vec(-5.0f64..5.0, 3)), 4..30),
        shift in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        let mut a = ClassFeatures::new(3, 4);
        let mut b = ClassFeatures::new(3, 4);
        for (c, v) in &feats {
            a.push(*c, v);
            let moved: Vec<f64> = v.iter().zip(&shift).map(|(x, s)| x + s).collect();
            b.push(*c, &moved);
        }
        prop_assert!((alignment(&a).unwrap() - alignment(&b).unwrap()).abs() <= 1e-9);
        let (ca, cb) = (a.centroids(), b.centroids());
        prop_assume!(ca.len() >= 2);
        let u = uniformity(&ca).unwrap();
        prop_assert!((u - uniformity(&cb).unwrap()).abs() <= 1e-9);
        for l in 1..ca.len() {
            let ul = neighborhood_uniformity(&ca, l).unwrap();
            prop_assert!((ul - neighborhood_uniformity(&cb, l).unwrap()).abs() <= 1e-9);
        }
        prop_assert!((neighborhood_uniformity(&ca, ca.len() - 1).unwrap() - u).abs() <= 1e-12 * u.max(1.0));
    }

    #[test]
    fn learning_rate_never_rises(total in 1usize..5000, base in 1e-4f64..1.0, power in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for it in (0..=total).step_by((total / 50).max(1)) {
            let lr = lr_at(it, total, base, power).unwrap();
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

#[test]
fn harder_negative_never_shrinks_the_anchor_gradient() {
    let a = [1.0, 0.0, 0.0];
    let p = [0.0, 0.0, 1.0];
    let mut prev = 0.0;
    for k in 0..=200 {
        let c = (k as f64 - 100.0) / 100.0;
        let n = [c, (1.0 - c * c).max(0.0).sqrt(), 0.0];
        let g = info_nce(&a, &[&p], &[&n], 0.1).unwrap().grad_anchor;
        let norm = dot(&g, &g).sqrt();
        assert!(norm >= prev, "step {k}");
        prev = norm;
    }
}
