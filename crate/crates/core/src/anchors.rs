//! Class-wise representative anchors and their fusion with the top layer.
//!
//! An anchor is the mean of the unit embeddings carrying a ground-truth
//! class, re-normalised to unit length. Lower-layer anchors are blended with
//! the top-layer anchor, `normalize(w_l * a_i + w_h * a_top)`, so each layer
//! is contrasted against a criterion carrying the highest-level context.

use crate::error::{Error, Result};
use crate::feature_store::io::{CtxfRecord, ANCHOR_LAYER};
use crate::feature_store::{EmbeddingSet, IGNORE};

/// Means whose norm falls below this are treated as cancelled out.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub layer: u32,
    pub dim: usize,
    /// `n_classes x dim`, unit length where valid, zero elsewhere.
    pub anchors: Vec<f64>,
    /// Unnormalised class means, `n_classes x dim`.
    pub means: Vec<f64>,
    pub counts: Vec<usize>,
    /// Class present but its mean cancelled to (near) zero.
    pub degenerate: Vec<bool>,
    pub valid: Vec<bool>,
}

impl AnchorSet {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        &self.anchors[class * self.dim..(class + 1) * self.dim]
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    pub fn mean_norm(&self, class: usize) -> f64 {
        norm(self.mean(class))
    }

    /// CTXF dump: layer sentinel, `h = N`, `w = 1`; invalid anchors are zero.
    pub fn to_ctxf(&self) -> CtxfRecord {
        CtxfRecord {
            layer: ANCHOR_LAYER,
            height: self.n_classes() as u32,
            width: 1,
            dim: self.dim as u32,
            data: self.anchors.iter().map(|&x| x as f32).collect(),
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds anchors from `(class, vector)` rows; accumulation in f64 in row order.
pub fn anchors_from_rows<'a, T, I>(
    layer: u32,
    dim: usize,
    n_classes: usize,
    rows: I,
) -> Result<AnchorSet>
where
    T: Copy + Into<f64> + 'a,
    I: IntoIterator<Item = (u8, &'a [T])>,
{
    let mut sums = vec![0.0f64; n_classes * dim];
    let mut counts = vec![0usize; n_classes];
    for (class, v) in rows {
        if class == IGNORE {
            continue;
        }
        let c = class as usize;
        if c >= n_classes {
            return Err(Error::Argument(format!(
                "class {c} out of range for {n_classes} classes"
            )));
        }
        if v.len() != dim {
            return Err(Error::Argument(format!(
                "vector of dim {} in a dim-{dim} set",
                v.len()
            )));
        }
        counts[c] += 1;
        for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
            *s += x.into();
        }
    }
    let mut means = sums;
    let mut anchors = vec![0.0; n_classes * dim];
    let mut degenerate = vec![false; n_classes];
    let mut valid = vec![false; n_classes];
    for c in 0..n_classes {
        if counts[c] == 0 {
            continue;
        }
        let m = &mut means[c * dim..(c + 1) * dim];
        let inv = 1.0 / counts[c] as f64;
        m.iter_mut().for_each(|x| *x *= inv);
        let n = norm(m);
        if n < DEGENERATE_NORM {
            degenerate[c] = true;
            continue;
        }
        valid[c] = true;
        for (a, &x) in anchors[c * dim..(c + 1) * dim].iter_mut().zip(m.iter()) {
            *a = x / n;
        }
    }
    Ok(AnchorSet {
        layer,
        dim,
        anchors,
        means,
        counts,
        degenerate,
        valid,
    })
}

/// Anchors of one layer's embedding set; degenerate (zero) embeddings are skipped.
pub fn compute_anchors(set: &EmbeddingSet, n_classes: usize) -> Result<AnchorSet> {
    let rows = (0..set.len())
        .filter(|&k| !set.degenerate[k])
        .map(|k| (set.gt[k], set.vector(k)));
    anchors_from_rows(set.layer, set.dim, n_classes, rows)
}

/// How a fused anchor was produced; needed to route gradients back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionSource {
    /// `normalize(w_l * low + w_h * high)`; `norm` is the pre-normalisation length.
    Blend { norm: f64 },
    /// Copied from the low-layer anchor (`w_h = 0`).
    Low,
    /// Copied from the top-layer anchor (`w_h = 1`, class absent at the low layer, or the top layer itself).
    High,
    /// No usable anchor for this class.
    Absent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedAnchorSet {
    pub layer: u32,
    pub dim: usize,
    pub anchors: Vec<f64>,
    pub valid: Vec<bool>,
    pub source: Vec<FusionSource>,
    pub w_l: f64,
    pub w_h: f64,
}

impl FusedAnchorSet {
    pub fn n_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        &self.anchors[class * self.dim..(class + 1) * self.dim]
    }

    /// The top layer fuses with itself: a verbatim copy.
    pub fn top(high: &AnchorSet) -> Self {
        Self {
            layer: high.layer,
            dim: high.dim,
            anchors: high.anchors.clone(),
            valid: high.valid.clone(),
            source: high
                .valid
                .iter()
                .map(|&v| {
                    if v {
                        FusionSource::High
                    } else {
                        FusionSource::Absent
                    }
                })
                .collect(),
            w_l: 0.0,
            w_h: 1.0,
        }
    }
}

pub fn check_fusion_weights(w_l: f64, w_h: f64) -> Result<()> {
    if !(w_l >= 0.0 && w_h >= 0.0 && ((w_l + w_h) - 1.0).abs() <= 1e-9) {
        return Err(Error::Argument(format!(
            "fusion weights must be non-negative and sum to 1, got w_l={w_l}, w_h={w_h}"
        )));
    }
    Ok(())
}

/// Blends `low` with the top-layer set `high`. Passing the top layer as
/// `low` (same layer index) returns `high` unchanged.
pub fn fuse_anchors(
    low: &AnchorSet,
    high: &AnchorSet,
    w_l: f64,
    w_h: f64,
) -> Result<FusedAnchorSet> {
    check_fusion_weights(w_l, w_h)?;
    if low.dim != high.dim || low.n_classes() != high.n_classes() {
        return Err(Error::Argument(format!(
            "cannot fuse {}x{} anchors with {}x{}",
            low.n_classes(),
            low.dim,
            high.n_classes(),
            high.dim
        )));
    }
    if low.layer == high.layer {
        return Ok(FusedAnchorSet::top(high));
    }
    let d = low.dim;
    let n = low.n_classes();
    let mut anchors = vec![0.0; n * d];
    let mut valid = vec![false; n];
    let mut source = vec![FusionSource::Absent; n];
    for c in 0..n {
        if !high.valid[c] {
            continue;
        }
        let out = &mut anchors[c * d..(c + 1) * d];
        let (src, copy): (FusionSource, Option<&[f64]>) = if !low.valid[c] || w_h == 1.0 {
            (FusionSource::High, Some(high.anchor(c)))
        } else if w_h == 0.0 {
            (FusionSource::Low, Some(low.anchor(c)))
        } else {
            for ((o, &a), &b) in out.iter_mut().zip(low.anchor(c)).zip(high.anchor(c)) {
                *o = w_l * a + w_h * b;
            }
            let len = norm(out);
            if len < DEGENERATE_NORM {
                out.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            out.iter_mut().for_each(|x| *x /= len);
            (FusionSource::Blend { norm: len }, None)
        };
        if let Some(v) = copy {
            out.copy_from_slice(v);
        }
        valid[c] = true;
        source[c] = src;
    }
    Ok(FusedAnchorSet {
        layer: low.layer,
        dim: d,
        anchors,
        valid,
        source,
        w_l,
        w_h,
    })
}

/// Back-propagates through `y = x / |x|`: returns `(g - y (y.g)) / |x|`.
pub fn normalize_backward(y: &[f64], len: f64, grad_y: &[f64]) -> Vec<f64> {
    let proj = dot(y, grad_y);
    y.iter()
        .zip(grad_y)
        .map(|(&yi, &gi)| (gi - yi * proj) / len)
        .collect()
}

/// Splits the gradient on fused anchors into gradients on the low-layer and
/// top-layer (normalised) anchors. Both outputs are `n_classes x dim`.
pub fn fuse_backward(fused: &FusedAnchorSet, grad_fused: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = fused.dim;
    let n = fused.n_classes();
    let mut g_low = vec![0.0; n * d];
    let mut g_high = vec![0.0; n * d];
    for c in 0..n {
        let g = &grad_fused[c * d..(c + 1) * d];
        match fused.source[c] {
            FusionSource::Absent => {}
            FusionSource::Low => g_low[c * d..(c + 1) * d].copy_from_slice(g),
            FusionSource::High => g_high[c * d..(c + 1) * d].copy_from_slice(g),
            FusionSource::Blend { norm } => {
                let gu = normalize_backward(fused.anchor(c), norm, g);
                for k in 0..d {
                    g_low[c * d + k] = fused.w_l * gu[k];
                    g_high[c * d + k] = fused.w_h * gu[k];
                }
            }
        }
    }
    (g_low, g_high)
}

/// Gradient on the unnormalised class means given gradients on the anchors.
/// Each member vector of class `c` then receives `result[c] / counts[c]`.
pub fn anchor_backward(set: &AnchorSet, grad_anchor: &[f64]) -> Vec<f64> {
    let d = set.dim;
    let mut out = vec![0.0; set.n_classes() * d];
    for c in 0..set.n_classes() {
        if !set.valid[c] {
            continue;
        }
        let g = normalize_backward(
            set.anchor(c),
            set.mean_norm(c),
            &grad_anchor[c * d..(c + 1) * d],
        );
        out[c * d..(c + 1) * d].copy_from_slice(&g);
    }
    out
}
