//! Segmentation scores and embedding-space diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anchors::dot;
use crate::bane::{squared_edt, UNREACHABLE};
use crate::error::{Error, Result};
use crate::feature_store::{LabelMap, IGNORE};

/// Rows are ground truth, columns prediction. IGNORE pixels are not counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        self.add_masked(pred, gt, None)
    }

    /// Counts only pixels where `mask` is set.
    pub fn add_masked(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        mask: Option<&[bool]>,
    ) -> Result<()> {
        same_dims(pred, gt)?;
        let n = self.n_classes;
        for (i, (&g, &p)) in gt.values().iter().zip(pred.values()).enumerate() {
            if g == IGNORE || mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= n || p >= n {
                return Err(Error::Argument(format!(
                    "label out of range for {n} classes"
                )));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Argument(
                "confusion matrices differ in class count".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

fn same_dims(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Argument(format!(
            "maps differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    /// Percent.
    pub miou: f64,
    /// Percent; `None` for classes with empty union.
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<Miou> {
    let n = cm.n_classes;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..n).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..n).map(|g| cm.get(g, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| 100.0 * tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Undefined(
            "mIoU over an empty confusion matrix".into(),
        ));
    }
    Ok(Miou {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Per-pixel instance ids aligned with a label map; 0 means no instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Argument(format!(
                "{}x{} instance map with {} ids",
                height,
                width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    /// `(id, class, size)` for each instance, checking every id has one class.
    pub fn instances(&self, gt: &LabelMap) -> Result<Vec<(u32, u8, usize)>> {
        if (self.height, self.width) != gt.dims() {
            return Err(Error::Argument(
                "instance map and labels differ in size".into(),
            ));
        }
        let mut seen: BTreeMap<u32, (u8, usize)> = BTreeMap::new();
        for (&id, &g) in self.ids.iter().zip(gt.values()) {
            if id == 0 {
                continue;
            }
            let e = seen.entry(id).or_insert((g, 0));
            if e.0 != g {
                return Err(Error::Argument(format!(
                    "instance {id} spans classes {} and {g}",
                    e.0
                )));
            }
            e.1 += 1;
        }
        Ok(seen.into_iter().map(|(id, (c, s))| (id, c, s)).collect())
    }
}

/// Average instance size per class over a collection of images; 0 where a
/// class has no instances.
pub fn class_average_sizes<'a>(
    samples: impl IntoIterator<Item = (&'a LabelMap, &'a InstanceMap)>,
    n_classes: usize,
) -> Result<Vec<f64>> {
    let mut total = vec![0usize; n_classes];
    let mut count = vec![0usize; n_classes];
    for (gt, inst) in samples {
        for (_, c, s) in inst.instances(gt)? {
            if c == IGNORE {
                continue;
            }
            total[c as usize] += s;
            count[c as usize] += 1;
        }
    }
    Ok(total
        .iter()
        .zip(&count)
        .map(|(&t, &k)| if k == 0 { 0.0 } else { t as f64 / k as f64 })
        .collect())
}

/// Instance-weighted IoU accumulated over images: true-positive and
/// false-negative pixels of an instance count `avg_size / size`, false
/// positives count 1. Pixels outside any instance count 1.
#[derive(Clone, Debug, PartialEq)]
pub struct IiouAccumulator {
    pub avg_sizes: Vec<f64>,
    pub itp: Vec<f64>,
    pub ifn: Vec<f64>,
    pub fp: Vec<f64>,
    pub has_instances: Vec<bool>,
}

impl IiouAccumulator {
    pub fn new(avg_sizes: Vec<f64>) -> Self {
        let n = avg_sizes.len();
        Self {
            avg_sizes,
            itp: vec![0.0; n],
            ifn: vec![0.0; n],
            fp: vec![0.0; n],
            has_instances: vec![false; n],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, inst: &InstanceMap) -> Result<()> {
        same_dims(pred, gt)?;
        let n = self.avg_sizes.len();
        let instances = inst.instances(gt)?;
        let mut weight: BTreeMap<u32, f64> = BTreeMap::new();
        for (id, c, size) in instances {
            if c == IGNORE {
                continue;
            }
            let avg = *self
                .avg_sizes
                .get(c as usize)
                .ok_or_else(|| Error::Argument(format!("instance class {c} out of range")))?;
            if avg <= 0.0 {
                return Err(Error::format(
                    0,
                    format!("class {c} has zero average instance size"),
                ));
            }
            self.has_instances[c as usize] = true;
            weight.insert(id, avg / size as f64);
        }
        for ((&g, &p), id) in gt.values().iter().zip(pred.values()).zip(&inst.ids) {
            if g == IGNORE {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= n || p >= n {
                return Err(Error::Argument(format!(
                    "label out of range for {n} classes"
                )));
            }
            let w = if *id == 0 { 1.0 } else { weight[id] };
            if g == p {
                self.itp[g] += w;
            } else {
                self.ifn[g] += w;
                self.fp[p] += 1.0;
            }
        }
        Ok(())
    }

    /// Percent, averaged over classes that have at least one instance.
    pub fn score(&self) -> Result<f64> {
        let scores: Vec<f64> = (0..self.avg_sizes.len())
            .filter(|&c| self.has_instances[c])
            .map(|c| {
                let denom = self.itp[c] + self.fp[c] + self.ifn[c];
                if denom > 0.0 {
                    100.0 * self.itp[c] / denom
                } else {
                    0.0
                }
            })
            .collect();
        if scores.is_empty() {
            return Err(Error::Undefined("iIoU with no instances".into()));
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

pub fn iiou(pred: &LabelMap, gt: &LabelMap, inst: &InstanceMap, avg_sizes: &[f64]) -> Result<f64> {
    let mut acc = IiouAccumulator::new(avg_sizes.to_vec());
    acc.add(pred, gt, inst)?;
    acc.score()
}

/// Non-IGNORE pixels with a 4-neighbour of a different non-IGNORE class.
pub fn gt_boundaries(gt: &LabelMap) -> Vec<bool> {
    let (h, w) = gt.dims();
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let g = gt.get(r, c);
            if g == IGNORE {
                continue;
            }
            let differs = |rr: usize, cc: usize| {
                let o = gt.get(rr, cc);
                o != IGNORE && o != g
            };
            out[r * w + c] = (r > 0 && differs(r - 1, c))
                || (r + 1 < h && differs(r + 1, c))
                || (c > 0 && differs(r, c - 1))
                || (c + 1 < w && differs(r, c + 1));
        }
    }
    out
}

/// Pixels within Euclidean `radius` of a ground-truth boundary; `None`
/// when the map has no boundary. An infinite radius keeps every pixel.
pub fn boundary_mask(gt: &LabelMap, radius: f64) -> Result<Option<Vec<bool>>> {
    if !(radius >= 1.0) {
        return Err(Error::Argument(format!(
            "boundary radius must be >= 1, got {radius}"
        )));
    }
    let sources = gt_boundaries(gt);
    if !sources.contains(&true) {
        return Ok(None);
    }
    let sq = squared_edt(&sources, gt.height(), gt.width());
    let r2 = radius * radius;
    Ok(Some(
        sq.iter()
            .map(|&d| d != UNREACHABLE && (d as f64) <= r2)
            .collect(),
    ))
}

pub fn boundary_miou(pred: &LabelMap, gt: &LabelMap, radius: f64, n_classes: usize) -> Result<f64> {
    same_dims(pred, gt)?;
    let mask = boundary_mask(gt, radius)?
        .ok_or_else(|| Error::Undefined("ground truth has no class boundary".into()))?;
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.add_masked(pred, gt, Some(&mask))?;
    Ok(miou(&cm)?.miou)
}

/// Features grouped by class, each class a flat `len x dim` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFeatures {
    pub dim: usize,
    pub per_class: Vec<Vec<f64>>,
}

impl ClassFeatures {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        Self {
            dim,
            per_class: vec![Vec::new(); n_classes],
        }
    }

    pub fn push(&mut self, class: usize, v: &[f64]) {
        self.per_class[class].extend_from_slice(v);
    }

    pub fn count(&self, class: usize) -> usize {
        self.per_class[class].len() / self.dim
    }

    /// Plain means of the non-empty classes.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        (0..self.per_class.len())
            .filter(|&c| self.count(c) > 0)
            .map(|c| {
                let k = self.count(c);
                let mut m = vec![0.0; self.dim];
                for row in self.per_class[c].chunks_exact(self.dim) {
                    for (a, x) in m.iter_mut().zip(row) {
                        *a += x;
                    }
                }
                m.iter_mut().for_each(|x| *x /= k as f64);
                m
            })
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `A = 1/N sum_n 1/|V_n|^2 sum_{j,k} |v_j - v_k|` over non-empty classes.
pub fn alignment(features: &ClassFeatures) -> Result<f64> {
    let d = features.dim;
    let mut terms = Vec::new();
    for c in 0..features.per_class.len() {
        let k = features.count(c);
        if k == 0 {
            continue;
        }
        let rows: Vec<&[f64]> = features.per_class[c].chunks_exact(d).collect();
        let mut s = 0.0;
        for j in 0..k {
            for i in j + 1..k {
                s += dist(rows[j], rows[i]);
            }
        }
        terms.push(2.0 * s / (k * k) as f64);
    }
    if terms.is_empty() {
        return Err(Error::Undefined("alignment with no features".into()));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

fn check_centroids(centroids: &[Vec<f64>]) -> Result<()> {
    if centroids.len() < 2 {
        return Err(Error::Undefined(format!(
            "{} centroids, need at least 2",
            centroids.len()
        )));
    }
    Ok(())
}

/// Mean pairwise distance between centroids.
pub fn uniformity(centroids: &[Vec<f64>]) -> Result<f64> {
    check_centroids(centroids)?;
    let n = centroids.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dist(&centroids[i], &centroids[j]);
        }
    }
    Ok(2.0 * s / (n * (n - 1)) as f64)
}

/// `U_l = 1/(N l) sum_i (sum of the l smallest distances from mu_i)`.
pub fn neighborhood_uniformity(centroids: &[Vec<f64>], l: usize) -> Result<f64> {
    check_centroids(centroids)?;
    let n = centroids.len();
    if l == 0 || l > n - 1 {
        return Err(Error::Argument(format!(
            "neighbourhood size {l} outside 1..={}",
            n - 1
        )));
    }
    let mut s = 0.0;
    for i in 0..n {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist(&centroids[i], &centroids[j]))
            .collect();
        d.sort_by(f64::total_cmp);
        s += d[..l].iter().sum::<f64>();
    }
    Ok(s / (n * l) as f64)
}

/// Unit-width distance bins `[0,1) .. [9,10)` plus `[10, inf)`.
pub const PROFILE_BINS: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_cos: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: u32,
    pub bins: Vec<ProfileBin>,
}

impl LayerProfile {
    /// Mean cosine over every sample in bins `first..`.
    pub fn mean_from(&self, first: usize) -> Option<f64> {
        let (mut s, mut k) = (0.0, 0usize);
        for b in &self.bins[first..] {
            if let Some(m) = b.mean_cos {
                s += m * b.count as f64;
                k += b.count;
            }
        }
        (k > 0).then(|| s / k as f64)
    }
}

fn bin_of(distance: f64) -> usize {
    (distance.floor() as usize).min(PROFILE_BINS - 1)
}

/// One error pixel: its embedding, ground-truth class and edge distance.
#[derive(Clone, Copy, Debug)]
pub struct ProfileSample<'a> {
    pub vector: &'a [f64],
    pub class: usize,
    pub distance: f64,
}

/// Cosine similarity of each error pixel to its ground-truth class anchor,
/// averaged per distance bin. Samples whose class has no anchor are dropped.
pub fn cos_vs_distance_profile<'a>(
    layer: u32,
    samples: impl IntoIterator<Item = ProfileSample<'a>>,
    anchors: &[Option<&[f64]>],
) -> LayerProfile {
    let mut sum = [0.0; PROFILE_BINS];
    let mut count = [0usize; PROFILE_BINS];
    for s in samples {
        let Some(Some(a)) = anchors.get(s.class) else {
            continue;
        };
        if !s.distance.is_finite() {
            continue;
        }
        let denom = (dot(s.vector, s.vector) * dot(a, a)).sqrt();
        if denom == 0.0 {
            continue;
        }
        let b = bin_of(s.distance);
        sum[b] += dot(s.vector, a) / denom;
        count[b] += 1;
    }
    let bins = (0..PROFILE_BINS)
        .map(|b| ProfileBin {
            lo: b as f64,
            hi: if b + 1 == PROFILE_BINS {
                f64::INFINITY
            } else {
                (b + 1) as f64
            },
            count: count[b],
            mean_cos: (count[b] > 0).then(|| sum[b] / count[b] as f64),
        })
        .collect();
    LayerProfile { layer, bins }
}

/// CSV with columns `layer,bin_lo,bin_hi,count,mean_cos`; empty bins leave
/// `mean_cos` blank.
pub fn profile_csv(profiles: &[LayerProfile]) -> String {
    let mut out = String::from("layer,bin_lo,bin_hi,count,mean_cos\n");
    for p in profiles {
        for b in &p.bins {
            let hi = if b.hi.is_finite() {
                format!("{}", b.hi)
            } else {
                "inf".into()
            };
            let mean = b.mean_cos.map(|m| format!("{m:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.layer, b.lo, hi, b.count, mean
            ));
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub iiou: Option<f64>,
    pub b_miou: BTreeMap<String, f64>,
    #[serde(rename = "A")]
    pub alignment: Option<f64>,
    #[serde(rename = "U")]
    pub uniformity: Option<f64>,
    #[serde(rename = "U_l")]
    pub neighborhood_uniformity: BTreeMap<String, f64>,
}
