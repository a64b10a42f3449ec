//! One training step split into its discrete part (predictions, sampled
//! pools) and its differentiable part (losses and their gradients), so the
//! gradient check can hold the former fixed.

use rayon::prelude::*;

use crate::bane::{build_negative_pools, error_map, select_for_image, Selection};
use crate::error::Result;
use crate::feature_store::{downsample_labels, EmbeddingSet, FeatureGrid, LabelMap};
use crate::losses::{
    cross_entropy, pixel_anchor_loss, ClassPool, LossReport, PaLayerInput, PaResult,
};
use crate::real::Real;
use crate::rng::CounterRng;

use super::config::{Mode, TrainConfig};
use super::encoder::{Encoder, ForwardCache, EMBED_DIM, N_STAGES};

/// Stream domain for positive sampling.
pub const POSITIVE_DOMAIN: u64 = 4;
/// Stream domain for random negatives.
pub const NEGATIVE_DOMAIN: u64 = 5;

pub fn forward_batch<T: Real>(
    enc: &Encoder<T>,
    images: &[&[T]],
    height: usize,
    width: usize,
) -> Result<Vec<ForwardCache<T>>> {
    images
        .par_iter()
        .map(|img| enc.forward(img, height, width))
        .collect()
}

/// Discrete decisions for one layer.
#[derive(Clone, Debug)]
pub struct LayerPlan {
    /// Entry metadata (vectors are an f32 snapshot).
    pub set: EmbeddingSet,
    pub selections: Vec<Selection>,
    pub pools: Vec<ClassPool>,
}

#[derive(Clone, Debug)]
pub struct StepPlan {
    pub predictions: Vec<LabelMap>,
    pub layers: Vec<LayerPlan>,
    /// Full-resolution error pixels per class over the batch.
    pub error_pixels: Vec<u64>,
}

fn take_positives(
    set: &EmbeddingSet,
    class: usize,
    forced: &Selection,
    budget: usize,
    rng: &mut CounterRng,
) -> Vec<usize> {
    let mut order: Vec<(u64, usize)> = forced
        .squared_distances
        .iter()
        .copied()
        .zip(forced.entries.iter().copied())
        .filter(|&(_, e)| !set.degenerate[e])
        .collect();
    order.sort_unstable();
    let mut out: Vec<usize> = order.into_iter().map(|(_, e)| e).take(budget).collect();
    let mut chosen = vec![false; set.len()];
    out.iter().for_each(|&e| chosen[e] = true);
    let rest: Vec<usize> = set
        .members_of(class as u8)
        .into_iter()
        .filter(|&e| !chosen[e])
        .collect();
    let fill = budget - out.len();
    out.extend(rng.sample_without_replacement(&rest, fill));
    out
}

/// Predictions, per-layer label maps, boundary-aware selections and the
/// positive / negative pools for every class.
pub fn plan_step<T: Real>(
    caches: &[ForwardCache<T>],
    labels: &[&LabelMap],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<StepPlan> {
    let n = super::dataset::N_CLASSES;
    let c = &cfg.contrast;
    let predictions = caches
        .iter()
        .map(|cache| LabelMap::new(cache.height, cache.width, cache.prediction(n)))
        .collect::<Result<Vec<_>>>()?;
    let mut error_pixels = vec![0u64; n];
    for (pred, gt) in predictions.iter().zip(labels) {
        for class in 0..n {
            error_pixels[class] += error_map(pred, gt, class as u8)?.count() as u64;
        }
    }
    if !cfg.mode.uses_pa() {
        return Ok(StepPlan {
            predictions,
            layers: Vec::new(),
            error_pixels,
        });
    }
    let mut layers = Vec::with_capacity(N_STAGES);
    for k in 0..N_STAGES {
        let layer = k as u32 + 1;
        let dims = caches[0].dims[k];
        let mut set = EmbeddingSet::empty(layer, EMBED_DIM, dims.0, dims.1);
        let mut maps = Vec::with_capacity(caches.len());
        for (b, cache) in caches.iter().enumerate() {
            let gt = downsample_labels(labels[b], dims)?;
            let pred = downsample_labels(&predictions[b], dims)?;
            let data: Vec<f32> = cache.embeddings[k]
                .iter()
                .map(|x| x.widen() as f32)
                .collect();
            set.push_image(
                &FeatureGrid::new(layer, dims.0, dims.1, EMBED_DIM, data)?,
                &gt,
                &pred,
            )?;
            maps.push((gt, pred));
        }
        let mut selections = Vec::with_capacity(n);
        for class in 0..n {
            let mut sel = Selection {
                class: class as u8,
                ratio: c.ratio,
                ..Default::default()
            };
            for (b, (gt, pred)) in maps.iter().enumerate() {
                let (_, _, s) = select_for_image(pred, gt, class as u8, layer, b, &set, c.ratio)?;
                sel.extend(s);
            }
            selections.push(sel);
        }
        let negatives: Vec<Vec<usize>> = match cfg.mode {
            Mode::CePaBane => build_negative_pools(&selections, n, c.negative_cap)
                .into_iter()
                .map(|p| p.into_iter().filter(|&e| !set.degenerate[e]).collect())
                .collect(),
            _ => (0..n)
                .map(|class| {
                    let others: Vec<usize> = (0..set.len())
                        .filter(|&e| set.gt[e] as usize != class && !set.degenerate[e])
                        .collect();
                    let mut rng = CounterRng::from_words(
                        cfg.seed,
                        &[NEGATIVE_DOMAIN, iter as u64, layer as u64, class as u64],
                    );
                    rng.sample_without_replacement(&others, c.negative_cap)
                })
                .collect(),
        };
        let pools = negatives
            .into_iter()
            .enumerate()
            .map(|(class, negatives)| {
                let mut rng = CounterRng::from_words(
                    cfg.seed,
                    &[POSITIVE_DOMAIN, iter as u64, layer as u64, class as u64],
                );
                ClassPool {
                    positives: take_positives(
                        &set,
                        class,
                        &selections[class],
                        c.positives,
                        &mut rng,
                    ),
                    negatives,
                }
            })
            .collect();
        layers.push(LayerPlan {
            set,
            selections,
            pools,
        });
    }
    Ok(StepPlan {
        predictions,
        layers,
        error_pixels,
    })
}

/// Loss values and upstream gradients for every image of the batch.
#[derive(Clone, Debug)]
pub struct StepObjective {
    pub report: LossReport,
    pub pa: Option<PaResult>,
    /// Per image, full-resolution logit gradients.
    pub grad_logits: Vec<Vec<f64>>,
    /// Per image, per stage, gradient on the unit embeddings (`None` without PA).
    pub grad_embeddings: Option<Vec<Vec<Vec<f64>>>>,
}

/// Evaluates `L = L_CE + alpha * L_PA` on cached forwards under a fixed plan.
pub fn objective<T: Real>(
    caches: &[ForwardCache<T>],
    labels: &[&LabelMap],
    plan: &StepPlan,
    cfg: &TrainConfig,
) -> Result<StepObjective> {
    let n = super::dataset::N_CLASSES;
    let alpha = cfg.contrast.alpha;
    let per_image = caches
        .iter()
        .zip(labels)
        .map(|(cache, gt)| cross_entropy(&cache.logits, gt.values(), n))
        .collect::<Result<Vec<_>>>()?;
    let counted: usize = per_image.iter().map(|r| r.counted).sum();
    let mut l_ce = 0.0;
    let mut grad_logits = Vec::with_capacity(caches.len());
    for r in per_image {
        let w = if counted == 0 {
            0.0
        } else {
            r.counted as f64 / counted as f64
        };
        l_ce += w * r.loss;
        grad_logits.push(r.grad.into_iter().map(|g| g * w).collect());
    }

    if !cfg.mode.uses_pa() {
        return Ok(StepObjective {
            report: LossReport::new(l_ce, None, alpha, N_STAGES),
            pa: None,
            grad_logits,
            grad_embeddings: None,
        });
    }
    let vectors: Vec<Vec<f64>> = plan
        .layers
        .iter()
        .enumerate()
        .map(|(k, lp)| {
            let w = lp.set.width;
            let mut v = Vec::with_capacity(lp.set.len() * EMBED_DIM);
            for px in &lp.set.pixels {
                let at = (px.row as usize * w + px.col as usize) * EMBED_DIM;
                v.extend(
                    caches[px.image as usize].embeddings[k][at..at + EMBED_DIM]
                        .iter()
                        .map(|x| x.widen()),
                );
            }
            v
        })
        .collect();
    let active: Vec<Vec<bool>> = plan
        .layers
        .iter()
        .map(|lp| lp.set.degenerate.iter().map(|d| !d).collect())
        .collect();
    let inputs: Vec<PaLayerInput<'_>> = plan
        .layers
        .iter()
        .enumerate()
        .map(|(k, lp)| PaLayerInput {
            layer: lp.set.layer,
            vectors: &vectors[k],
            classes: &lp.set.gt,
            active: &active[k],
            pools: &lp.pools,
        })
        .collect();
    let pa = pixel_anchor_loss(&inputs, n, EMBED_DIM, &cfg.contrast)?;

    let mut grad_embeddings: Vec<Vec<Vec<f64>>> = caches
        .iter()
        .map(|c| c.embeddings.iter().map(|e| vec![0.0; e.len()]).collect())
        .collect();
    for (k, lp) in plan.layers.iter().enumerate() {
        let w = lp.set.width;
        for (e, px) in lp.set.pixels.iter().enumerate() {
            let at = (px.row as usize * w + px.col as usize) * EMBED_DIM;
            let dst = &mut grad_embeddings[px.image as usize][k][at..at + EMBED_DIM];
            for (d, g) in dst
                .iter_mut()
                .zip(&pa.grad_vectors[k][e * EMBED_DIM..(e + 1) * EMBED_DIM])
            {
                *d += alpha * g;
            }
        }
    }
    Ok(StepObjective {
        report: LossReport::new(l_ce, Some(&pa), alpha, N_STAGES),
        pa: Some(pa),
        grad_logits,
        grad_embeddings: Some(grad_embeddings),
    })
}

/// Parameter gradients of the objective, summed over the batch in image order.
pub fn backward_batch<T: Real>(
    enc: &Encoder<T>,
    caches: &[ForwardCache<T>],
    obj: &StepObjective,
) -> Result<Vec<Vec<T>>> {
    let per_image = caches
        .par_iter()
        .enumerate()
        .map(|(b, cache)| {
            let ge = obj.grad_embeddings.as_ref().map(|g| &g[b][..]);
            enc.backward(cache, ge, &obj.grad_logits[b])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = per_image.into_iter();
    let mut total = iter.next().unwrap_or_else(|| {
        enc.tensors
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect()
    });
    for g in iter {
        for (a, b) in total.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    Ok(total)
}
