//! Boundary-aware negative sampling.
//!
//! For each class `n` the error map marks pixels whose ground truth is `n`
//! but whose prediction is not. Edges of the error regions are the error
//! pixels that touch a non-error 4-neighbour or the image border; every error
//! pixel gets its exact Euclidean distance to the nearest edge, and the lower
//! `K` percent by distance are kept as hard negatives for the other classes'
//! anchors.

use crate::error::{Error, Result};
use crate::feature_store::{EmbeddingSet, LabelMap, IGNORE};

/// Marker for "no source pixel reachable" in squared-distance grids.
pub const UNREACHABLE: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryErrorMap {
    pub class: u8,
    pub layer: u32,
    pub image: usize,
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryErrorMap {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "error map {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            class: 0,
            layer: 0,
            image: 0,
            height,
            width,
            bits,
        })
    }

    /// Tags the map with the layer and batch image it came from.
    pub fn at(mut self, layer: u32, image: usize) -> Self {
        self.layer = layer;
        self.image = image;
        self
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `B(u, v) = 1` iff `gt = n` and `pred != n`. IGNORE pixels are never errors.
pub fn error_map(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<BinaryErrorMap> {
    if pred.dims() != gt.dims() {
        return Err(Error::Argument(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    let bits = gt
        .values()
        .iter()
        .zip(pred.values())
        .map(|(&g, &p)| g != IGNORE && g == class && p != class)
        .collect();
    let mut map = BinaryErrorMap::from_bits(gt.height(), gt.width(), bits)?;
    map.class = class;
    Ok(map)
}

/// Error pixels on a region boundary, as `(row, col)` in row-major order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSet {
    pub pixels: Vec<(usize, usize)>,
}

pub fn extract_edges(map: &BinaryErrorMap) -> EdgeSet {
    let (h, w) = (map.height, map.width);
    let mut pixels = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !map.get(r, c) {
                continue;
            }
            let on_border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if on_border
                || !map.get(r - 1, c)
                || !map.get(r + 1, c)
                || !map.get(r, c - 1)
                || !map.get(r, c + 1)
            {
                pixels.push((r, c));
            }
        }
    }
    EdgeSet { pixels }
}

/// Left boundary of a parabola's region in the lower envelope, as an exact
/// rational `num / den` with `den > 0`; `None` is minus infinity. Cross
/// products stay below `4 n^3` for side `n`, well inside i64 for `n < 2^20`.
type Boundary = Option<(i64, i64)>;

// Exact 1-D squared distance transform over `f` (UNREACHABLE = no source).
fn edt_1d(f: &[u64], out: &mut [u64], hull: &mut Vec<usize>, bounds: &mut Vec<Boundary>) {
    hull.clear();
    bounds.clear();
    for q in 0..f.len() {
        if f[q] == UNREACHABLE {
            continue;
        }
        let fq = f[q] as i64 + (q * q) as i64;
        loop {
            let Some(&p) = hull.last() else {
                hull.push(q);
                bounds.push(None);
                break;
            };
            let fp = f[p] as i64 + (p * p) as i64;
            // intersection of parabolas rooted at p and q
            let (num, den) = (fq - fp, 2 * (q as i64 - p as i64));
            let dominated = match *bounds.last().unwrap() {
                None => false,
                Some((zn, zd)) => num * zd <= zn * den,
            };
            if dominated {
                hull.pop();
                bounds.pop();
            } else {
                hull.push(q);
                bounds.push(Some((num, den)));
                break;
            }
        }
    }
    if hull.is_empty() {
        out.iter_mut().for_each(|x| *x = UNREACHABLE);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() {
            let (zn, zd) = bounds[k + 1].unwrap();
            if zn < q as i64 * zd {
                k += 1;
            } else {
                break;
            }
        }
        let p = hull[k];
        let dq = q.abs_diff(p) as u64;
        *o = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `sources`, via two separable lower-envelope passes. Pixels with
/// no source anywhere get [`UNREACHABLE`].
pub fn squared_edt(sources: &[bool], height: usize, width: usize) -> Vec<u64> {
    assert_eq!(sources.len(), height * width);
    assert!(
        height.max(width) < 1 << 20,
        "grid side too large for exact transform"
    );
    let mut grid: Vec<u64> = sources
        .iter()
        .map(|&s| if s { 0 } else { UNREACHABLE })
        .collect();
    let (mut hull, mut bounds) = (Vec::new(), Vec::new());
    let mut col = vec![0u64; height];
    let mut tmp = vec![0u64; height];
    for c in 0..width {
        for r in 0..height {
            col[r] = grid[r * width + c];
        }
        edt_1d(&col, &mut tmp, &mut hull, &mut bounds);
        for r in 0..height {
            grid[r * width + c] = tmp[r];
        }
    }
    let mut row_out = vec![0u64; width];
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        edt_1d(row, &mut row_out, &mut hull, &mut bounds);
        row.copy_from_slice(&row_out);
    }
    grid
}

/// Distances to the nearest edge, defined on error pixels only.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    /// Squared distances; [`UNREACHABLE`] off the error region.
    pub squared: Vec<u64>,
}

impl DistanceMap {
    /// Euclidean distance, `+inf` off the error region.
    pub fn get(&self, row: usize, col: usize) -> f32 {
        to_distance(self.squared[row * self.width + col])
    }

    pub fn distances(&self) -> Vec<f32> {
        self.squared.iter().map(|&s| to_distance(s)).collect()
    }
}

pub fn to_distance(squared: u64) -> f32 {
    if squared == UNREACHABLE {
        f32::INFINITY
    } else {
        (squared as f64).sqrt() as f32
    }
}

pub fn distance_transform(map: &BinaryErrorMap, edges: &EdgeSet) -> Result<DistanceMap> {
    let (h, w) = (map.height, map.width);
    let mut sources = vec![false; h * w];
    for &(r, c) in &edges.pixels {
        if r >= h || c >= w || !map.get(r, c) {
            return Err(Error::Argument(format!(
                "edge pixel ({r}, {c}) is not an error pixel"
            )));
        }
        sources[r * w + c] = true;
    }
    let has_errors = map.bits.iter().any(|&b| b);
    if has_errors && edges.pixels.is_empty() {
        return Err(Error::Argument(
            "error pixels present but the edge set is empty".into(),
        ));
    }
    let mut squared = vec![UNREACHABLE; h * w];
    if has_errors {
        // all sources lie inside the error pixels' bounding box, so the
        // transform over that box is exact for every pixel in it
        let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
        for (i, _) in map.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (r, c) = (i / w, i % w);
            (r0, r1, c0, c1) = (r0.min(r), r1.max(r), c0.min(c), c1.max(c));
        }
        let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
        let crop: Vec<bool> = (0..bh * bw)
            .map(|i| sources[(r0 + i / bw) * w + c0 + i % bw])
            .collect();
        let sub = squared_edt(&crop, bh, bw);
        for (i, d) in sub.into_iter().enumerate() {
            let at = (r0 + i / bw) * w + c0 + i % bw;
            if map.bits[at] {
                squared[at] = d;
            }
        }
    }
    Ok(DistanceMap {
        height: h,
        width: w,
        squared,
    })
}

/// Hard negatives chosen from one class's error pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selection {
    pub class: u8,
    /// Percent of error pixels kept.
    pub ratio: f64,
    /// Embedding-set entry indices, closest to an edge first.
    pub entries: Vec<usize>,
    /// Squared edge distance of each entry.
    pub squared_distances: Vec<u64>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends another image's selection for the same class.
    pub fn extend(&mut self, other: Selection) {
        self.entries.extend(other.entries);
        self.squared_distances.extend(other.squared_distances);
    }
}

/// `floor(K/100 * count)`, raised to 1 when `K > 0` and there is anything to pick.
pub fn selection_size(ratio: f64, count: usize) -> usize {
    if ratio <= 0.0 || count == 0 {
        return 0;
    }
    (((ratio * count as f64) / 100.0).floor() as usize).clamp(1, count)
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&ratio) {
        return Err(Error::Argument(format!(
            "sampling ratio {ratio} outside [0, 100]"
        )));
    }
    Ok(())
}

/// Keeps the lower `ratio` percent of error pixels by edge distance, ties
/// broken by row-major index.
pub fn select_negatives(
    dist: &DistanceMap,
    map: &BinaryErrorMap,
    set: &EmbeddingSet,
    ratio: f64,
) -> Result<Selection> {
    check_ratio(ratio)?;
    if (dist.height, dist.width) != (map.height, map.width) {
        return Err(Error::Argument(
            "distance map and error map differ in size".into(),
        ));
    }
    let mut candidates: Vec<(u64, usize)> = map
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| (dist.squared[i], i))
        .collect();
    let take = selection_size(ratio, candidates.len());
    candidates.sort_unstable();
    let mut sel = Selection {
        class: map.class,
        ratio,
        ..Default::default()
    };
    for &(sq, idx) in &candidates[..take] {
        let (r, c) = (idx / map.width, idx % map.width);
        let entry = set.lookup(map.image, r, c).ok_or_else(|| {
            Error::Argument(format!(
                "error pixel ({r}, {c}) of image {} has no embedding",
                map.image
            ))
        })?;
        sel.entries.push(entry);
        sel.squared_distances.push(sq);
    }
    Ok(sel)
}

/// Runs the whole per-class pipeline for one image of a layer.
pub fn select_for_image(
    pred: &LabelMap,
    gt: &LabelMap,
    class: u8,
    layer: u32,
    image: usize,
    set: &EmbeddingSet,
    ratio: f64,
) -> Result<(BinaryErrorMap, DistanceMap, Selection)> {
    let map = error_map(pred, gt, class)?.at(layer, image);
    let edges = extract_edges(&map);
    let dist = distance_transform(&map, &edges)?;
    let sel = select_negatives(&dist, &map, set, ratio)?;
    Ok((map, dist, sel))
}

/// Negatives for anchor `c`: the union of every other class's selection,
/// ordered by (squared distance, entry index) and capped at `cap`.
pub fn build_negative_pools(
    selections: &[Selection],
    n_classes: usize,
    cap: usize,
) -> Vec<Vec<usize>> {
    (0..n_classes)
        .map(|c| {
            let mut pool: Vec<(u64, usize)> = selections
                .iter()
                .filter(|s| s.class as usize != c)
                .flat_map(|s| {
                    s.squared_distances
                        .iter()
                        .copied()
                        .zip(s.entries.iter().copied())
                })
                .collect();
            pool.sort_unstable();
            pool.dedup_by_key(|&mut (_, e)| e);
            pool.truncate(cap);
            pool.into_iter().map(|(_, e)| e).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{flatten, FeatureGrid};
    use crate::rng::CounterRng;
    use std::collections::BTreeSet;

    fn map_from(h: usize, w: usize, bits: &[u8]) -> BinaryErrorMap {
        BinaryErrorMap::from_bits(h, w, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    fn brute_edt(map: &BinaryErrorMap, edges: &EdgeSet) -> Vec<u64> {
        let mut out = vec![UNREACHABLE; map.height * map.width];
        for r in 0..map.height {
            for c in 0..map.width {
                if !map.get(r, c) {
                    continue;
                }
                for &(er, ec) in &edges.pixels {
                    let d =
                        (r.abs_diff(er) * r.abs_diff(er) + c.abs_diff(ec) * c.abs_diff(ec)) as u64;
                    out[r * map.width + c] = out[r * map.width + c].min(d);
                }
            }
        }
        out
    }

    fn brute_edges(map: &BinaryErrorMap) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..map.height as i64 {
            for c in 0..map.width as i64 {
                if !map.get(r as usize, c as usize) {
                    continue;
                }
                let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
                    let (nr, nc) = (r + dr, c + dc);
                    nr < 0
                        || nc < 0
                        || nr >= map.height as i64
                        || nc >= map.width as i64
                        || !map.get(nr as usize, nc as usize)
                });
                if edge {
                    out.push((r as usize, c as usize));
                }
            }
        }
        out
    }

    fn random_map(rng: &mut CounterRng, h: usize, w: usize, p: f64) -> BinaryErrorMap {
        BinaryErrorMap::from_bits(h, w, (0..h * w).map(|_| rng.uniform() < p).collect()).unwrap()
    }

    fn dummy_set(h: usize, w: usize, gt: &LabelMap) -> EmbeddingSet {
        let g = FeatureGrid::new(1, h, w, 1, vec![1.0; h * w]).unwrap();
        flatten(&g, gt, gt).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(error_map(&gt, &gt, 1).unwrap().count(), 0);
    }

    #[test]
    fn wholly_wrong_prediction_is_all_errors() {
        let gt = LabelMap::filled(3, 3, 2).unwrap();
        let pred = LabelMap::filled(3, 3, 1).unwrap();
        assert_eq!(error_map(&pred, &gt, 2).unwrap().count(), 9);
    }

    #[test]
    fn error_map_matches_per_pixel_oracle_and_skips_ignore() {
        let mut rng = CounterRng::new(1);
        let gt: Vec<u8> = (0..16)
            .map(|_| {
                if rng.uniform() < 0.1 {
                    IGNORE
                } else {
                    rng.index(3) as u8
                }
            })
            .collect();
        let pred: Vec<u8> = (0..16).map(|_| rng.index(3) as u8).collect();
        let (g, p) = (
            LabelMap::new(4, 4, gt.clone()).unwrap(),
            LabelMap::new(4, 4, pred.clone()).unwrap(),
        );
        let m = error_map(&p, &g, 1).unwrap();
        for i in 0..16 {
            assert_eq!(m.bits[i], gt[i] == 1 && pred[i] != 1);
        }
        let other = LabelMap::filled(4, 5, 0).unwrap();
        assert!(error_map(&other, &g, 1).is_err());
    }

    #[test]
    fn isolated_pixel_is_an_edge() {
        let mut bits = [0u8; 25];
        bits[12] = 1;
        assert_eq!(extract_edges(&map_from(5, 5, &bits)).pixels, vec![(2, 2)]);
    }

    #[test]
    fn solid_block_has_eight_perimeter_edges() {
        let mut bits = [0u8; 25];
        for r in 1..4 {
            for c in 1..4 {
                bits[r * 5 + c] = 1;
            }
        }
        let e = extract_edges(&map_from(5, 5, &bits));
        assert_eq!(e.pixels.len(), 8);
        assert!(!e.pixels.contains(&(2, 2)));
    }

    #[test]
    fn strip_distances() {
        // a 1-row map touches the border everywhere, so every pixel is an edge
        let m = map_from(1, 5, &[1, 1, 1, 1, 1]);
        assert_eq!(extract_edges(&m).pixels.len(), 5);
        // the middle row of a full 5x5 error map is a strip with edges only at its ends
        let m = map_from(5, 5, &[1; 25]);
        let d = distance_transform(&m, &extract_edges(&m)).unwrap();
        let row: Vec<f32> = (0..5).map(|c| d.get(2, c)).collect();
        assert_eq!(row, vec![0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn strip_with_explicit_end_edges() {
        let m = map_from(1, 5, &[1, 1, 1, 1, 1]);
        let edges = EdgeSet {
            pixels: vec![(0, 0), (0, 4)],
        };
        let d = distance_transform(&m, &edges).unwrap();
        assert_eq!(d.distances(), vec![0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn all_edges_means_zero_distance() {
        let m = map_from(2, 2, &[1, 1, 1, 1]);
        let d = distance_transform(&m, &extract_edges(&m)).unwrap();
        assert_eq!(d.distances(), vec![0.0; 4]);
    }

    #[test]
    fn empty_edges_with_errors_is_rejected() {
        let m = map_from(1, 2, &[1, 0]);
        assert!(distance_transform(&m, &EdgeSet::default()).is_err());
        let z = map_from(1, 2, &[0, 0]);
        assert!(distance_transform(&z, &EdgeSet::default())
            .unwrap()
            .squared
            .iter()
            .all(|&s| s == UNREACHABLE));
    }

    #[test]
    fn fast_edt_equals_brute_force() {
        let mut rng = CounterRng::new(2024);
        for i in 0..200 {
            let p = 0.2 + 0.7 * (i as f64 / 200.0);
            let m = random_map(&mut rng, 16, 16, p);
            let e = extract_edges(&m);
            assert_eq!(e.pixels, brute_edges(&m));
            let d = distance_transform(&m, &e).unwrap();
            assert_eq!(d.squared, brute_edt(&m, &e));
        }
    }

    #[test]
    fn squared_edt_sparse_sources() {
        let mut rng = CounterRng::new(7);
        for _ in 0..50 {
            let (h, w) = (1 + rng.index(20), 1 + rng.index(20));
            let src: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.05).collect();
            let fast = squared_edt(&src, h, w);
            for r in 0..h {
                for c in 0..w {
                    let mut best = UNREACHABLE;
                    for sr in 0..h {
                        for sc in 0..w {
                            if src[sr * w + sc] {
                                best = best
                                    .min((r.abs_diff(sr).pow(2) + c.abs_diff(sc).pow(2)) as u64);
                            }
                        }
                    }
                    assert_eq!(fast[r * w + c], best);
                }
            }
        }
    }

    #[test]
    fn selection_ratio_extremes() {
        let gt = LabelMap::new(2, 5, vec![1; 10]).unwrap();
        let pred = LabelMap::filled(2, 5, 0).unwrap();
        let set = dummy_set(2, 5, &gt);
        let (_, _, all) = select_for_image(&pred, &gt, 1, 1, 0, &set, 100.0).unwrap();
        assert_eq!(all.len(), 10);
        let (_, _, none) = select_for_image(&pred, &gt, 1, 1, 0, &set, 0.0).unwrap();
        assert!(none.is_empty());
        assert!(select_for_image(&pred, &gt, 1, 1, 0, &set, 101.0).is_err());
    }

    #[test]
    fn half_selection_takes_closest_row_major() {
        let mut rng = CounterRng::new(31);
        for _ in 0..20 {
            let m = random_map(&mut rng, 8, 8, 0.7);
            let d = distance_transform(&m, &extract_edges(&m)).unwrap();
            let gt = LabelMap::filled(8, 8, 0).unwrap();
            let set = dummy_set(8, 8, &gt);
            let s = select_negatives(&d, &m, &set, 50.0).unwrap();
            let mut oracle: Vec<(u64, usize)> = (0..64)
                .filter(|&i| m.bits[i])
                .map(|i| (d.squared[i], i))
                .collect();
            oracle.sort();
            let take = (oracle.len() / 2).max(1);
            let expect: Vec<usize> = oracle[..take].iter().map(|&(_, i)| i).collect();
            assert_eq!(s.entries, expect);
        }
    }

    #[test]
    fn ten_error_pixels_half_ratio() {
        // one row of 10 errors inside a 3x12 map; edges are all of them except
        // none (rows above/below are zero), so all distances are 0: tie-break row-major
        let mut bits = vec![false; 3 * 12];
        for c in 1..11 {
            bits[12 + c] = true;
        }
        let m = BinaryErrorMap::from_bits(3, 12, bits).unwrap();
        let d = distance_transform(&m, &extract_edges(&m)).unwrap();
        let gt = LabelMap::filled(3, 12, 0).unwrap();
        let set = dummy_set(3, 12, &gt);
        let s = select_negatives(&d, &m, &set, 50.0).unwrap();
        assert_eq!(s.entries, vec![13, 14, 15, 16, 17]);
    }

    #[test]
    fn size_rule() {
        assert_eq!(selection_size(50.0, 10), 5);
        assert_eq!(selection_size(1.0, 10), 1);
        assert_eq!(selection_size(0.0, 10), 0);
        assert_eq!(selection_size(30.0, 0), 0);
        assert_eq!(selection_size(100.0, 7), 7);
    }

    fn sel(class: u8, entries: &[usize], sq: &[u64]) -> Selection {
        Selection {
            class,
            ratio: 50.0,
            entries: entries.to_vec(),
            squared_distances: sq.to_vec(),
        }
    }

    #[test]
    fn pools_exclude_own_class() {
        let pools = build_negative_pools(&[sel(0, &[3, 4], &[0, 1])], 3, 1024);
        assert!(pools[0].is_empty());
        assert_eq!(pools[1], vec![3, 4]);
        assert_eq!(pools[2], vec![3, 4]);
        let pools = build_negative_pools(&[sel(0, &[1], &[0]), sel(1, &[2], &[0])], 2, 1024);
        assert_eq!(pools, vec![vec![2], vec![1]]);
    }

    #[test]
    fn pools_match_set_union_and_cap() {
        let mut rng = CounterRng::new(77);
        let sels: Vec<Selection> = (0..3u8)
            .map(|c| {
                let entries: Vec<usize> = (0..10).map(|i| c as usize * 100 + i).collect();
                let sq: Vec<u64> = (0..10).map(|_| rng.index(5) as u64).collect();
                sel(c, &entries, &sq)
            })
            .collect();
        let pools = build_negative_pools(&sels, 3, 1024);
        for c in 0..3 {
            let expect: BTreeSet<usize> = sels
                .iter()
                .filter(|s| s.class as usize != c)
                .flat_map(|s| s.entries.clone())
                .collect();
            assert_eq!(pools[c].iter().copied().collect::<BTreeSet<_>>(), expect);
        }
        let capped = build_negative_pools(&sels, 3, 4);
        assert!(capped.iter().all(|p| p.len() == 4));
    }
}
