//! End-to-end central finite-difference check of the training objective on
//! a tiny batch, with predictions and sampled pools held fixed.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::feature_store::LabelMap;
use crate::rng::CounterRng;

use super::config::TrainConfig;
use super::dataset::N_CLASSES;
use super::encoder::{Encoder, IN_CHANNELS};
use super::step::{backward_batch, forward_batch, objective, plan_step};

pub const GRADCHECK_SIZE: usize = 8;
pub const GRADCHECK_BATCH: usize = 2;
pub const STEP: f64 = 1e-6;
/// Floor on the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-6;
const GRADCHECK_DOMAIN: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub mode: String,
    pub checked_parameters: usize,
    pub checked_embeddings: usize,
    pub max_rel_err_parameters: f64,
    pub max_rel_err_embeddings: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Random 8x8 images with 2x2-block labels.
pub fn tiny_batch(seed: u64) -> (Vec<Vec<f64>>, Vec<LabelMap>) {
    let s = GRADCHECK_SIZE;
    let mut rng = CounterRng::from_words(seed, &[GRADCHECK_DOMAIN]);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..GRADCHECK_BATCH {
        let blocks: Vec<u8> = (0..(s / 2) * (s / 2))
            .map(|_| rng.index(N_CLASSES) as u8)
            .collect();
        let l: Vec<u8> = (0..s * s)
            .map(|p| blocks[(p / s / 2) * (s / 2) + (p % s) / 2])
            .collect();
        images.push((0..s * s * IN_CHANNELS).map(|_| rng.gaussian()).collect());
        labels.push(LabelMap::new(s, s, l).expect("fixed size"));
    }
    (images, labels)
}

pub fn grad_check(cfg: &TrainConfig, tolerance: f64) -> Result<GradCheckReport> {
    let mut enc = Encoder::<f32>::init(N_CLASSES, cfg.seed).cast::<f64>();
    // small positive biases keep most units away from the ReLU kink at 0
    let mut rng = CounterRng::from_words(cfg.seed, &[GRADCHECK_DOMAIN, 1]);
    for (info, t) in enc.layout().iter().zip(&mut enc.tensors) {
        if info.shape.len() == 1 {
            t.iter_mut().for_each(|x| *x = rng.uniform_range(0.0, 0.1));
        }
    }
    grad_check_encoder(&enc, cfg, tolerance, 48, 48)
}

pub fn grad_check_encoder(
    enc: &Encoder<f64>,
    cfg: &TrainConfig,
    tolerance: f64,
    n_params: usize,
    n_embeddings: usize,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let s = GRADCHECK_SIZE;
    let (images, labels) = tiny_batch(cfg.seed);
    let image_refs: Vec<&[f64]> = images.iter().map(|i| &i[..]).collect();
    let label_refs: Vec<&LabelMap> = labels.iter().collect();
    let caches = forward_batch(enc, &image_refs, s, s)?;
    let plan = plan_step(&caches, &label_refs, cfg, 0)?;
    let obj = objective(&caches, &label_refs, &plan, cfg)?;
    let grads = backward_batch(enc, &caches, &obj)?;

    let total_at = |e: &Encoder<f64>| -> Result<f64> {
        let c = forward_batch(e, &image_refs, s, s)?;
        Ok(objective(&c, &label_refs, &plan, cfg)?.report.total)
    };

    let mut rng = CounterRng::from_words(cfg.seed, &[GRADCHECK_DOMAIN, 2]);
    let mut worst_p = 0.0f64;
    for _ in 0..n_params {
        let t = rng.index(enc.tensors.len());
        let i = rng.index(enc.tensors[t].len());
        let mut plus = enc.clone();
        plus.tensors[t][i] += STEP;
        let mut minus = enc.clone();
        minus.tensors[t][i] -= STEP;
        let fd = (total_at(&plus)? - total_at(&minus)?) / (2.0 * STEP);
        worst_p = worst_p.max(rel_err(grads[t][i], fd));
    }

    let mut worst_e = 0.0f64;
    for _ in 0..n_embeddings {
        let b = rng.index(caches.len());
        let k = rng.index(caches[b].embeddings.len());
        let i = rng.index(caches[b].embeddings[k].len());
        let analytic = obj.grad_embeddings.as_ref().map_or(0.0, |g| g[b][k][i]);
        let at = |delta: f64| -> Result<f64> {
            let mut c = caches.clone();
            c[b].embeddings[k][i] += delta;
            Ok(objective(&c, &label_refs, &plan, cfg)?.report.total)
        };
        let fd = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
        worst_e = worst_e.max(rel_err(analytic, fd));
    }

    let max = worst_p.max(worst_e);
    Ok(GradCheckReport {
        mode: cfg.mode.to_string(),
        checked_parameters: n_params,
        checked_embeddings: n_embeddings,
        max_rel_err_parameters: worst_p,
        max_rel_err_embeddings: worst_e,
        max_rel_err: max,
        tolerance,
        passed: max < tolerance,
    })
}
