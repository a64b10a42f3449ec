//! Pixel-anchor contrastive loss, cross-entropy, and their gradients.
//!
//! For one anchor `a`, positives `v+` and negatives `v-` (all unit length):
//!
//! ```text
//! L_a = mean_k  -log( e^{a.v+_k/t} / (e^{a.v+_k/t} + sum_j e^{a.v-_j/t}) )
//! ```
//!
//! A layer averages `L_a` over the classes that have both a usable anchor
//! and positives; the pixel-anchor loss is the lambda-weighted sum over layers.
//! Everything here accumulates in f64.

use crate::anchors::{
    anchor_backward, anchors_from_rows, check_fusion_weights, dot, fuse_anchors, fuse_backward,
    AnchorSet, FusedAnchorSet,
};
use crate::error::{Error, Result};
use crate::feature_store::IGNORE;
use crate::real::Real;
use serde::{Deserialize, Serialize};

/// Tolerance on `|v| = 1` for the public InfoNCE entry point.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    /// Temperature.
    pub tau: f64,
    /// Weight of the pixel-anchor loss in the total objective.
    pub alpha: f64,
    /// Per-layer weights, layer 1 (finest) first.
    pub lambdas: Vec<f64>,
    pub w_l: f64,
    pub w_h: f64,
    /// Boundary-aware sampling ratio, percent.
    pub ratio: f64,
    /// Positive budget per class per layer.
    pub positives: usize,
    /// Cap on each anchor's negative pool.
    pub negative_cap: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 0.1,
            lambdas: vec![0.1, 0.4, 0.7, 1.0],
            w_l: 0.3,
            w_h: 0.7,
            ratio: 50.0,
            positives: 256,
            negative_cap: 1024,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("layer weights must be non-negative".into()));
        }
        check_fusion_weights(self.w_l, self.w_h).map_err(|e| Error::Config(e.to_string()))?;
        crate::bane::check_ratio(self.ratio).map_err(|e| Error::Config(e.to_string()))?;
        if self.positives == 0 {
            return Err(Error::Config("positive budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// InfoNCE value and gradients for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    /// `|V+| x d`.
    pub grad_positives: Vec<f64>,
    /// `|V-| x d`.
    pub grad_negatives: Vec<f64>,
    /// Matching probability of each positive against its own denominator.
    pub p_pos: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Argument(format!(
            "{what} has norm {n}, expected unit length"
        )));
    }
    Ok(())
}

/// InfoNCE with `v` as the anchor. Fails on empty positives or non-unit inputs.
pub fn info_nce(
    v: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<InfoNce> {
    if positives.is_empty() {
        return Err(Error::Argument(
            "InfoNCE needs at least one positive".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    check_unit(v, "anchor")?;
    for (i, p) in positives.iter().chain(negatives).enumerate() {
        if p.len() != v.len() {
            return Err(Error::Argument(format!(
                "sample {i} has dim {}, anchor has {}",
                p.len(),
                v.len()
            )));
        }
        check_unit(p, "sample")?;
    }
    Ok(info_nce_unchecked(v, positives, negatives, tau))
}

pub(crate) fn info_nce_unchecked(
    a: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    tau: f64,
) -> InfoNce {
    let d = a.len();
    let np = positives.len() as f64;
    let s_pos: Vec<f64> = positives.iter().map(|p| dot(a, p) / tau).collect();
    let s_neg: Vec<f64> = negatives.iter().map(|n| dot(a, n) / tau).collect();
    let lse_neg = log_sum_exp(s_neg.iter().copied());

    let mut loss = 0.0;
    let mut p_pos = Vec::with_capacity(positives.len());
    // sum_k (1 - p+_k): total negative mass across the positive terms
    let mut neg_mass = 0.0;
    for &s in &s_pos {
        let denom = log_add_exp(s, lse_neg);
        loss += denom - s;
        let p = (s - denom).exp();
        p_pos.push(p);
        neg_mass += if lse_neg == f64::NEG_INFINITY {
            0.0
        } else {
            (lse_neg - denom).exp()
        };
    }
    loss /= np;

    let mut grad_anchor = vec![0.0; d];
    let mut grad_positives = vec![0.0; positives.len() * d];
    for (k, (p, &pk)) in positives.iter().zip(&p_pos).enumerate() {
        let gs = (pk - 1.0) / (np * tau);
        for i in 0..d {
            grad_anchor[i] += gs * p[i];
            grad_positives[k * d + i] = gs * a[i];
        }
    }
    let mut grad_negatives = vec![0.0; negatives.len() * d];
    for (j, (n, &s)) in negatives.iter().zip(&s_neg).enumerate() {
        let gs = (s - lse_neg).exp() * neg_mass / (np * tau);
        for i in 0..d {
            grad_anchor[i] += gs * n[i];
            grad_negatives[j * d + i] = gs * a[i];
        }
    }
    InfoNce {
        loss,
        grad_anchor,
        grad_positives,
        grad_negatives,
        p_pos,
    }
}

/// Closed-form anchor gradient written out term by term:
/// `-1/(t |V+|) sum_k ((1 - p+_k) v+_k - sum_j p-_kj v-_j)`, with
/// `p_x = e^{a.x/t} / (e^{a.v+_k/t} + sum_j e^{a.v-_j/t})`.
pub fn grad_pa_wrt_anchor(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    tau: f64,
) -> Vec<f64> {
    let d = anchor.len();
    let mut g = vec![0.0; d];
    let s_neg: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau).collect();
    for p in positives {
        let s_pos = dot(anchor, p) / tau;
        let m = s_neg.iter().copied().fold(s_pos, f64::max);
        let z = (s_pos - m).exp() + s_neg.iter().map(|s| (s - m).exp()).sum::<f64>();
        let p_pos = (s_pos - m).exp() / z;
        let mut term: Vec<f64> = p.iter().map(|x| (1.0 - p_pos) * x).collect();
        for (n, s) in negatives.iter().zip(&s_neg) {
            let p_neg = (s - m).exp() / z;
            for i in 0..d {
                term[i] -= p_neg * n[i];
            }
        }
        for i in 0..d {
            g[i] += term[i];
        }
    }
    let scale = -1.0 / (tau * positives.len() as f64);
    g.iter_mut().for_each(|x| *x *= scale);
    g
}

/// Positive and negative entry indices for one class's anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassPool {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLoss {
    pub loss: f64,
    /// Classes that contributed (the averaging denominator).
    pub classes_used: usize,
    /// Classes that had positives but no usable anchor.
    pub skipped: usize,
    /// `n_classes x d`, gradient on the fused anchors.
    pub grad_anchors: Vec<f64>,
    /// `n_vectors x d`, direct gradient on the pooled vectors.
    pub grad_vectors: Vec<f64>,
    /// Per class, matching probability of each positive.
    pub p_pos: Vec<Vec<f64>>,
}

/// Layer loss: InfoNCE per usable class against its fused anchor, averaged
/// over the classes that contribute.
pub fn pixel_anchor_layer_loss(
    anchors: &FusedAnchorSet,
    vectors: &[f64],
    pools: &[ClassPool],
    tau: f64,
) -> Result<LayerLoss> {
    let d = anchors.dim;
    let n_classes = anchors.n_classes();
    if pools.len() != n_classes {
        return Err(Error::Argument(format!(
            "{} pools for {n_classes} classes",
            pools.len()
        )));
    }
    if d == 0 || vectors.len() % d != 0 {
        return Err(Error::Argument(
            "vector buffer is not a multiple of the anchor dim".into(),
        ));
    }
    let n_vec = vectors.len() / d;
    let row = |k: usize| &vectors[k * d..(k + 1) * d];
    if let Some(bad) = pools
        .iter()
        .flat_map(|p| p.positives.iter().chain(&p.negatives))
        .find(|&&k| k >= n_vec)
    {
        return Err(Error::Argument(format!(
            "pool index {bad} out of range ({n_vec} vectors)"
        )));
    }

    let mut out = LayerLoss {
        loss: 0.0,
        classes_used: 0,
        skipped: 0,
        grad_anchors: vec![0.0; n_classes * d],
        grad_vectors: vec![0.0; n_vec * d],
        p_pos: vec![Vec::new(); n_classes],
    };
    let mut terms = Vec::new();
    for (c, pool) in pools.iter().enumerate() {
        if pool.positives.is_empty() {
            continue;
        }
        if !anchors.valid[c] {
            out.skipped += 1;
            continue;
        }
        let pos: Vec<&[f64]> = pool.positives.iter().map(|&k| row(k)).collect();
        let neg: Vec<&[f64]> = pool.negatives.iter().map(|&k| row(k)).collect();
        terms.push((c, info_nce_unchecked(anchors.anchor(c), &pos, &neg, tau)));
    }
    if out.skipped > 0 {
        log::warn!(
            "layer {}: {} classes with positives but no anchor",
            anchors.layer,
            out.skipped
        );
    }
    out.classes_used = terms.len();
    if terms.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / terms.len() as f64;
    for (c, t) in terms {
        out.loss += scale * t.loss;
        for i in 0..d {
            out.grad_anchors[c * d + i] = scale * t.grad_anchor[i];
        }
        let pool = &pools[c];
        for (k, &e) in pool.positives.iter().enumerate() {
            for i in 0..d {
                out.grad_vectors[e * d + i] += scale * t.grad_positives[k * d + i];
            }
        }
        for (k, &e) in pool.negatives.iter().enumerate() {
            for i in 0..d {
                out.grad_vectors[e * d + i] += scale * t.grad_negatives[k * d + i];
            }
        }
        out.p_pos[c] = t.p_pos;
    }
    Ok(out)
}

/// One layer's input to the full pixel-anchor objective.
#[derive(Clone, Debug)]
pub struct PaLayerInput<'a> {
    pub layer: u32,
    /// `n x d` embeddings.
    pub vectors: &'a [f64],
    /// Ground-truth class per vector.
    pub classes: &'a [u8],
    /// Vectors that may enter anchors (false for degenerate embeddings).
    pub active: &'a [bool],
    pub pools: &'a [ClassPool],
}

#[derive(Clone, Debug)]
pub struct PaResult {
    pub l_pa: f64,
    pub per_layer: Vec<f64>,
    pub anchors: Vec<AnchorSet>,
    pub fused: Vec<FusedAnchorSet>,
    pub layers: Vec<LayerLoss>,
    /// Per layer, `n x d` total gradient of `L_PA` on each embedding,
    /// including the paths through anchor means and fusion.
    pub grad_vectors: Vec<Vec<f64>>,
    /// Per layer, `lambda_i * dL_i/d(fused anchor)`.
    pub grad_fused: Vec<Vec<f64>>,
}

/// `L_PA = sum_i lambda_i L_i` with anchors rebuilt from the embeddings, so
/// gradients flow through the class means and the fusion with the top layer.
pub fn pixel_anchor_loss(
    layers: &[PaLayerInput<'_>],
    n_classes: usize,
    dim: usize,
    cfg: &ContrastConfig,
) -> Result<PaResult> {
    if layers.is_empty() {
        return Err(Error::Argument("no layers".into()));
    }
    if cfg.lambdas.len() != layers.len() {
        return Err(Error::Config(format!(
            "{} layer weights for {} layers",
            cfg.lambdas.len(),
            layers.len()
        )));
    }
    let anchors = layers
        .iter()
        .map(|l| {
            let rows = (0..l.classes.len())
                .filter(|&k| l.active[k] && l.classes[k] != IGNORE)
                .map(|k| (l.classes[k], &l.vectors[k * dim..(k + 1) * dim]));
            anchors_from_rows(l.layer, dim, n_classes, rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let top = layers.len() - 1;
    let fused = anchors
        .iter()
        .map(|a| fuse_anchors(a, &anchors[top], cfg.w_l, cfg.w_h))
        .collect::<Result<Vec<_>>>()?;
    let results = layers
        .iter()
        .zip(&fused)
        .map(|(l, f)| pixel_anchor_layer_loss(f, l.vectors, l.pools, cfg.tau))
        .collect::<Result<Vec<_>>>()?;

    let per_layer: Vec<f64> = results.iter().map(|r| r.loss).collect();
    let l_pa = per_layer.iter().zip(&cfg.lambdas).map(|(l, w)| l * w).sum();

    // Backward: fused anchors -> normalised anchors (low and top) -> class means -> members.
    let mut grad_anchor: Vec<Vec<f64>> = vec![vec![0.0; n_classes * dim]; layers.len()];
    let mut grad_fused = Vec::with_capacity(layers.len());
    for (i, (r, f)) in results.iter().zip(&fused).enumerate() {
        let g: Vec<f64> = r.grad_anchors.iter().map(|x| x * cfg.lambdas[i]).collect();
        let (g_low, g_high) = fuse_backward(f, &g);
        for k in 0..g.len() {
            grad_anchor[i][k] += g_low[k];
            grad_anchor[top][k] += g_high[k];
        }
        grad_fused.push(g);
    }
    let mut grad_vectors = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let mut gv: Vec<f64> = results[i]
            .grad_vectors
            .iter()
            .map(|x| x * cfg.lambdas[i])
            .collect();
        let g_mean = anchor_backward(&anchors[i], &grad_anchor[i]);
        for k in 0..l.classes.len() {
            let c = l.classes[k];
            if !l.active[k] || c == IGNORE || !anchors[i].valid[c as usize] {
                continue;
            }
            let inv = 1.0 / anchors[i].counts[c as usize] as f64;
            let c = c as usize;
            for j in 0..dim {
                gv[k * dim + j] += g_mean[c * dim + j] * inv;
            }
        }
        grad_vectors.push(gv);
    }
    Ok(PaResult {
        l_pa,
        per_layer,
        anchors,
        fused,
        layers: results,
        grad_vectors,
        grad_fused,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Same layout as the logits.
    pub grad: Vec<f64>,
    pub counted: usize,
}

/// Mean of `-log softmax(logits)[gt]` over non-IGNORE pixels.
/// `logits` is pixel-major with `n_classes` values per pixel.
pub fn cross_entropy<T: Real>(logits: &[T], gt: &[u8], n_classes: usize) -> Result<CrossEntropy> {
    if logits.len() != gt.len() * n_classes {
        return Err(Error::Argument(format!(
            "{} logits for {} pixels x {n_classes} classes",
            logits.len(),
            gt.len()
        )));
    }
    let counted = gt.iter().filter(|&&g| g != IGNORE).count();
    let mut grad = vec![0.0; logits.len()];
    if counted == 0 {
        log::warn!("cross-entropy over an all-IGNORE map");
        return Ok(CrossEntropy {
            loss: 0.0,
            grad,
            counted,
        });
    }
    let inv = 1.0 / counted as f64;
    let mut loss = 0.0;
    for (p, &g) in gt.iter().enumerate() {
        if g == IGNORE {
            continue;
        }
        let g = g as usize;
        if g >= n_classes {
            return Err(Error::Argument(format!(
                "label {g} out of range for {n_classes} classes"
            )));
        }
        let z = &logits[p * n_classes..(p + 1) * n_classes];
        let row = &mut grad[p * n_classes..(p + 1) * n_classes];
        let m = z.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.widen()));
        let mut sum = 0.0;
        for (r, x) in row.iter_mut().zip(z) {
            *r = (x.widen() - m).exp();
            sum += *r;
        }
        loss += m + sum.ln() - z[g].widen();
        for (c, r) in row.iter_mut().enumerate() {
            *r = (*r / sum - if c == g { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok(CrossEntropy {
        loss: loss * inv,
        grad,
        counted,
    })
}

/// `L = L_CE + alpha * L_PA`.
pub fn total_loss(ce: f64, pa: f64, alpha: f64) -> f64 {
    ce + alpha * pa
}

/// Serializable summary of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_pa: f64,
    pub l_pa_per_layer: Vec<f64>,
    pub total: f64,
    pub grad_norm_embeddings: f64,
    pub grad_norm_anchors: f64,
}

impl LossReport {
    pub fn new(l_ce: f64, pa: Option<&PaResult>, alpha: f64, n_layers: usize) -> Self {
        let (l_pa, per_layer, ge, ga) = match pa {
            Some(r) => (
                r.l_pa,
                r.per_layer.clone(),
                sq_norm(r.grad_vectors.iter().flatten()).sqrt(),
                sq_norm(r.grad_fused.iter().flatten()).sqrt(),
            ),
            None => (0.0, vec![0.0; n_layers], 0.0, 0.0),
        };
        Self {
            l_ce,
            l_pa,
            l_pa_per_layer: per_layer,
            total: total_loss(l_ce, l_pa, alpha),
            grad_norm_embeddings: ge,
            grad_norm_anchors: ga,
        }
    }
}

fn sq_norm<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    xs.map(|x| x * x).sum()
}
