//! Held-out evaluation and the cosine-vs-distance profile.

use rayon::prelude::*;

use crate::anchors::{anchors_from_rows, fuse_anchors};
use crate::bane::{distance_transform, error_map, extract_edges, to_distance};
use crate::error::{Error, Result};
use crate::feature_store::{downsample_labels, LabelMap, IGNORE};
use crate::metrics::{
    alignment, boundary_mask, class_average_sizes, cos_vs_distance_profile, miou,
    neighborhood_uniformity, uniformity, ClassFeatures, ConfusionMatrix, IiouAccumulator,
    LayerProfile, MetricsReport, ProfileSample,
};

use super::checkpoint::{Checkpoint, ModelKind};
use super::config::TrainConfig;
use super::dataset::{Sample, ShapesDataset, EVAL_DOMAIN, N_CLASSES};
use super::encoder::{Encoder, CHANNELS, EMBED_DIM, N_STAGES};

pub const DEFAULT_RADII: [f64; 3] = [5.0, 7.0, 10.0];
pub const DEFAULT_NEIGHBOURS: [usize; 2] = [3, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub samples: usize,
    pub radii: Vec<f64>,
    /// Neighbourhood sizes for `U_l`; clamped to `N - 1` valid centroids.
    pub neighbours: Vec<usize>,
}

impl EvalOptions {
    pub fn new(seed: u64, samples: usize) -> Self {
        Self {
            seed,
            samples,
            radii: DEFAULT_RADII.to_vec(),
            neighbours: DEFAULT_NEIGHBOURS.to_vec(),
        }
    }
}

pub fn eval_dataset(cfg: &TrainConfig, seed: u64) -> Result<ShapesDataset> {
    ShapesDataset::new(seed, EVAL_DOMAIN, cfg.height, cfg.width, cfg.sigma as f32)
}

fn radius_key(r: f64) -> String {
    if r.is_finite() {
        format!("{r}")
    } else {
        "inf".into()
    }
}

struct ImageResult {
    pred: LabelMap,
    /// Top-stage raw features with their GT class.
    features: Vec<(u8, Vec<f64>)>,
}

fn predict(model: ModelKind, enc: &Encoder<f32>, s: &Sample) -> Result<ImageResult> {
    let (h, w) = s.labels.dims();
    if model == ModelKind::Oracle {
        return Ok(ImageResult {
            pred: s.labels.clone(),
            features: Vec::new(),
        });
    }
    let cache = enc.forward(&s.image, h, w)?;
    let pred = LabelMap::new(h, w, cache.prediction(enc.n_classes))?;
    let top = N_STAGES - 1;
    let dims = cache.dims[top];
    let gt = downsample_labels(&s.labels, dims)?;
    let ch = CHANNELS[top];
    let features = gt
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &g)| g != IGNORE)
        .map(|(p, &g)| {
            (
                g,
                cache.features[top][p * ch..(p + 1) * ch]
                    .iter()
                    .map(|&x| x as f64)
                    .collect(),
            )
        })
        .collect();
    Ok(ImageResult { pred, features })
}

/// mIoU, iIoU, boundary mIoU per radius and top-stage feature diagnostics
/// over `opts.samples` held-out images.
pub fn evaluate(ck: &Checkpoint, opts: &EvalOptions) -> Result<MetricsReport> {
    if opts.samples == 0 {
        return Err(Error::Argument(
            "evaluation needs at least one sample".into(),
        ));
    }
    let data = eval_dataset(&ck.config, opts.seed)?;
    let samples = data.samples(0, opts.samples);
    let results = samples
        .par_iter()
        .map(|s| predict(ck.model, &ck.encoder, s))
        .collect::<Result<Vec<_>>>()?;

    let n = N_CLASSES;
    let mut cm = ConfusionMatrix::new(n);
    let avg = class_average_sizes(samples.iter().map(|s| (&s.labels, &s.instances)), n)?;
    let mut inst = IiouAccumulator::new(avg);
    let mut boundary: Vec<ConfusionMatrix> =
        opts.radii.iter().map(|_| ConfusionMatrix::new(n)).collect();
    let mut feats = ClassFeatures::new(CHANNELS[N_STAGES - 1], n);
    for (s, r) in samples.iter().zip(&results) {
        cm.add(&r.pred, &s.labels)?;
        inst.add(&r.pred, &s.labels, &s.instances)?;
        for (radius, bcm) in opts.radii.iter().zip(&mut boundary) {
            if let Some(mask) = boundary_mask(&s.labels, *radius)? {
                bcm.add_masked(&r.pred, &s.labels, Some(&mask))?;
            }
        }
        for (g, v) in &r.features {
            feats.push(*g as usize, v);
        }
    }
    let m = miou(&cm)?;
    let mut report = MetricsReport {
        miou: m.miou,
        per_class_iou: m.per_class,
        iiou: inst.score().ok(),
        ..Default::default()
    };
    for (radius, bcm) in opts.radii.iter().zip(&boundary) {
        report.b_miou.insert(radius_key(*radius), miou(bcm)?.miou);
    }
    if ck.model == ModelKind::Encoder {
        let centroids = feats.centroids();
        report.alignment = Some(alignment(&feats)?);
        report.uniformity = Some(uniformity(&centroids)?);
        for &l in &opts.neighbours {
            let eff = l.min(centroids.len() - 1);
            report
                .neighborhood_uniformity
                .insert(l.to_string(), neighborhood_uniformity(&centroids, eff)?);
        }
    }
    Ok(report)
}

/// Cosine similarity of error-pixel embeddings to their GT class's fused
/// anchor, binned by distance to the error-region edge. Anchors are class
/// means of every embedding over the evaluated images.
pub fn profile(ck: &Checkpoint, seed: u64, samples: usize) -> Result<Vec<LayerProfile>> {
    if ck.model != ModelKind::Encoder {
        return Err(Error::Argument("profiles need a trained encoder".into()));
    }
    let cfg = &ck.config;
    let data = eval_dataset(cfg, seed)?;
    let n = N_CLASSES;
    let enc = &ck.encoder;

    // first pass: per-layer class sums for the anchors
    let sums = (0..samples as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<Vec<(u8, Vec<f64>)>>> {
            let s = data.sample(i);
            let (h, w) = s.labels.dims();
            let cache = enc.forward(&s.image, h, w)?;
            let mut per_layer = Vec::with_capacity(N_STAGES);
            for k in 0..N_STAGES {
                let gt = downsample_labels(&s.labels, cache.dims[k])?;
                let mut acc = Vec::new();
                let mut class_sum = vec![vec![0.0f64; EMBED_DIM]; n];
                let mut count = vec![0u64; n];
                for (p, &g) in gt.values().iter().enumerate() {
                    if g == IGNORE || cache.norms[k][p] < crate::anchors::DEGENERATE_NORM {
                        continue;
                    }
                    count[g as usize] += 1;
                    for (a, &x) in class_sum[g as usize]
                        .iter_mut()
                        .zip(&cache.embeddings[k][p * EMBED_DIM..])
                    {
                        *a += x as f64;
                    }
                }
                for c in 0..n {
                    // each class sum enters as one weighted row
                    if count[c] > 0 {
                        acc.push((c as u8, class_sum[c].clone()));
                    }
                }
                per_layer.push(acc);
            }
            Ok(per_layer)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut anchors = Vec::with_capacity(N_STAGES);
    for k in 0..N_STAGES {
        let rows: Vec<(u8, &[f64])> = sums
            .iter()
            .flat_map(|img| img[k].iter().map(|(c, v)| (*c, &v[..])))
            .collect();
        // the direction of a sum of sums equals that of the overall mean
        anchors.push(anchors_from_rows(k as u32 + 1, EMBED_DIM, n, rows)?);
    }
    let fused = anchors
        .iter()
        .map(|a| {
            fuse_anchors(
                a,
                &anchors[N_STAGES - 1],
                cfg.contrast.w_l,
                cfg.contrast.w_h,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // second pass: error pixels and their edge distances
    let per_image = (0..samples as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<Vec<(usize, f64, Vec<f64>)>>> {
            let s = data.sample(i);
            let (h, w) = s.labels.dims();
            let cache = enc.forward(&s.image, h, w)?;
            let pred = LabelMap::new(h, w, cache.prediction(n))?;
            let mut out = Vec::with_capacity(N_STAGES);
            for k in 0..N_STAGES {
                let gt_k = downsample_labels(&s.labels, cache.dims[k])?;
                let pred_k = downsample_labels(&pred, cache.dims[k])?;
                let mut layer = Vec::new();
                for c in 0..n {
                    let map = error_map(&pred_k, &gt_k, c as u8)?;
                    if map.count() == 0 {
                        continue;
                    }
                    let dist = distance_transform(&map, &extract_edges(&map))?;
                    for (p, &b) in map.bits.iter().enumerate() {
                        if b && cache.norms[k][p] >= crate::anchors::DEGENERATE_NORM {
                            let v = cache.embeddings[k][p * EMBED_DIM..(p + 1) * EMBED_DIM]
                                .iter()
                                .map(|&x| x as f64)
                                .collect();
                            layer.push((c, to_distance(dist.squared[p]) as f64, v));
                        }
                    }
                }
                out.push(layer);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((0..N_STAGES)
        .map(|k| {
            let f = &fused[k];
            let anchor_refs: Vec<Option<&[f64]>> =
                (0..n).map(|c| f.valid[c].then(|| f.anchor(c))).collect();
            let samples = per_image.iter().flat_map(|img| {
                img[k].iter().map(|(c, d, v)| ProfileSample {
                    vector: v,
                    class: *c,
                    distance: *d,
                })
            });
            cos_vs_distance_profile(k as u32 + 1, samples, &anchor_refs)
        })
        .collect())
}
