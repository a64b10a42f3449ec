//! Reference multi-scale encoder: four 3x3 conv + ReLU stages, a 1x1
//! projection head per stage, and a 1x1 segmentation head over all stages.
//!
//! Activations are pixel-major (`[row][col][channel]`). Conv weights are
//! `[tap][c_in][c_out]` with taps in row-major order over the 3x3 window.
//! The segmentation head is linear, so it is applied per stage at that
//! stage's resolution and the results are nearest-upsampled and summed.

use crate::error::{Error, Result};
use crate::feature_store::normalize_rows;
use crate::real::Real;
use crate::rng::CounterRng;

use super::kernels;

pub const N_STAGES: usize = 4;
pub const CHANNELS: [usize; N_STAGES] = [16, 24, 32, 48];
pub const STRIDES: [usize; N_STAGES] = [1, 2, 2, 2];
pub const EMBED_DIM: usize = 16;
pub const IN_CHANNELS: usize = 3;

// the kernel dispatch below hard-codes these
const _: () =
    assert!(CHANNELS[0] == 16 && CHANNELS[1] == 24 && CHANNELS[2] == 32 && CHANNELS[3] == 48);

/// Calls a kernel with `(c_in, c_out)` of conv stage `k`.
macro_rules! conv_stage {
    ($k:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $k {
            0 => kernels::$f::<T, 3, 16>($($arg),*),
            1 => kernels::$f::<T, 16, 24>($($arg),*),
            2 => kernels::$f::<T, 24, 32>($($arg),*),
            _ => kernels::$f::<T, 32, 48>($($arg),*),
        }
    };
}

/// Calls a kernel with `(c_in, EMBED_DIM)` of projection head `k`.
macro_rules! head_stage {
    ($k:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $k {
            0 => kernels::$f::<T, 16, EMBED_DIM>($($arg),*),
            1 => kernels::$f::<T, 24, EMBED_DIM>($($arg),*),
            2 => kernels::$f::<T, 32, EMBED_DIM>($($arg),*),
            _ => kernels::$f::<T, 48, EMBED_DIM>($($arg),*),
        }
    };
}

/// Stream domain for parameter initialisation.
pub const INIT_DOMAIN: u64 = 3;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn in_channels(stage: usize) -> usize {
    if stage == 0 {
        IN_CHANNELS
    } else {
        CHANNELS[stage - 1]
    }
}

/// Tensor layout, in storage order.
pub fn tensor_layout(n_classes: usize) -> Vec<TensorInfo> {
    let t = |name: String, shape: Vec<usize>| TensorInfo { name, shape };
    let mut out = Vec::new();
    for k in 0..N_STAGES {
        out.push(t(
            format!("conv{}.weight", k + 1),
            vec![9, in_channels(k), CHANNELS[k]],
        ));
        out.push(t(format!("conv{}.bias", k + 1), vec![CHANNELS[k]]));
    }
    for k in 0..N_STAGES {
        out.push(t(
            format!("head{}.weight", k + 1),
            vec![CHANNELS[k], EMBED_DIM],
        ));
        out.push(t(format!("head{}.bias", k + 1), vec![EMBED_DIM]));
    }
    for k in 0..N_STAGES {
        out.push(t(
            format!("seg{}.weight", k + 1),
            vec![CHANNELS[k], n_classes],
        ));
    }
    out.push(t("seg.bias".into(), vec![n_classes]));
    out
}

const fn conv_w(k: usize) -> usize {
    2 * k
}
const fn conv_b(k: usize) -> usize {
    2 * k + 1
}
const fn head_w(k: usize) -> usize {
    2 * N_STAGES + 2 * k
}
const fn head_b(k: usize) -> usize {
    2 * N_STAGES + 2 * k + 1
}
const fn seg_w(k: usize) -> usize {
    4 * N_STAGES + k
}
const SEG_B: usize = 5 * N_STAGES;

/// Parameters of the reference encoder, one flat buffer per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub n_classes: usize,
    pub tensors: Vec<Vec<T>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub height: usize,
    pub width: usize,
    pub input: Vec<T>,
    /// Stage resolutions.
    pub dims: [(usize, usize); N_STAGES],
    /// Post-ReLU stage outputs.
    pub features: Vec<Vec<T>>,
    /// Head outputs before normalisation.
    pub projected: Vec<Vec<T>>,
    pub norms: Vec<Vec<f64>>,
    /// Unit embeddings, zero where the projection vanished.
    pub embeddings: Vec<Vec<T>>,
    /// Full resolution, `n_classes` per pixel.
    pub logits: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn degenerate(&self, stage: usize) -> Vec<bool> {
        self.norms[stage]
            .iter()
            .map(|&n| n < crate::anchors::DEGENERATE_NORM)
            .collect()
    }

    /// Argmax of the logits per pixel, lowest class on ties.
    pub fn prediction(&self, n_classes: usize) -> Vec<u8> {
        self.logits
            .chunks_exact(n_classes)
            .map(|z| {
                let mut best = 0;
                for c in 1..n_classes {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

pub fn stage_dims(height: usize, width: usize) -> [(usize, usize); N_STAGES] {
    let mut dims = [(0, 0); N_STAGES];
    let (mut h, mut w) = (height, width);
    for k in 0..N_STAGES {
        h = h.div_ceil(STRIDES[k]);
        w = w.div_ceil(STRIDES[k]);
        dims[k] = (h, w);
    }
    dims
}

/// `out[p] = bias + sum_ci x[p][ci] * weight[ci]`.
/// Flat source cell of every full-resolution pixel under nearest upsampling.
fn upsample_map((hk, wk): (usize, usize), height: usize, width: usize) -> Vec<usize> {
    let cols: Vec<usize> = (0..width).map(|c| upsample_source(c, wk, width)).collect();
    (0..height)
        .flat_map(|r| {
            let base = upsample_source(r, hk, height) * wk;
            cols.iter().map(move |&c| base + c)
        })
        .collect()
}

/// Nearest source index when mapping `dst_len` cells onto `src_len`.
#[inline]
pub fn upsample_source(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

impl<T: Real> Encoder<T> {
    pub fn zeros(n_classes: usize) -> Self {
        let tensors = tensor_layout(n_classes)
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Self { n_classes, tensors }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero. Tensor `i` draws
    /// from `CounterRng::from_words(seed, [INIT_DOMAIN, i])`.
    pub fn init(n_classes: usize, seed: u64) -> Self {
        let layout = tensor_layout(n_classes);
        let concat: usize = CHANNELS.iter().sum();
        let tensors = layout
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.shape.len() == 1 {
                    return vec![T::zero(); t.len()];
                }
                let fan_in = if t.name.starts_with("seg") {
                    concat
                } else {
                    t.shape[..t.shape.len() - 1].iter().product()
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = CounterRng::from_words(seed, &[INIT_DOMAIN, i as u64]);
                (0..t.len())
                    .map(|_| T::cast(rng.uniform_range(-bound, bound)))
                    .collect()
            })
            .collect();
        Self { n_classes, tensors }
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        tensor_layout(self.n_classes)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            n_classes: self.n_classes,
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|x| U::cast(x.widen())).collect())
                .collect(),
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let layout = self.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::State(format!(
                "{} tensors, expected {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for (info, t) in layout.iter().zip(&self.tensors) {
            if info.len() != t.len() {
                return Err(Error::State(format!(
                    "{} has {} values, expected {}",
                    info.name,
                    t.len(),
                    info.len()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, image: &[T], height: usize, width: usize) -> Result<ForwardCache<T>> {
        if image.len() != height * width * IN_CHANNELS || height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "image buffer of {} values for {height}x{width}x{IN_CHANNELS}",
                image.len()
            )));
        }
        let n = self.n_classes;
        let dims = stage_dims(height, width);
        let mut features: Vec<Vec<T>> = Vec::with_capacity(N_STAGES);
        for k in 0..N_STAGES {
            let (x, xd) = if k == 0 {
                (image, (height, width))
            } else {
                (&features[k - 1][..], dims[k - 1])
            };
            let f = conv_stage!(
                k,
                conv_relu(
                    x,
                    xd,
                    &self.tensors[conv_w(k)],
                    &self.tensors[conv_b(k)],
                    STRIDES[k],
                    dims[k]
                )
            );
            features.push(f);
        }
        let mut projected = Vec::with_capacity(N_STAGES);
        let mut norms = Vec::with_capacity(N_STAGES);
        let mut embeddings = Vec::with_capacity(N_STAGES);
        for k in 0..N_STAGES {
            let u = head_stage!(
                k,
                linear(
                    &features[k],
                    &self.tensors[head_w(k)],
                    Some(&self.tensors[head_b(k)])
                )
            );
            let mut e = u.clone();
            let nk = normalize_rows(&mut e, EMBED_DIM);
            for (row, &nv) in e.chunks_exact_mut(EMBED_DIM).zip(&nk) {
                if nv < crate::anchors::DEGENERATE_NORM {
                    row.fill(T::zero());
                }
            }
            norms.push(nk);
            projected.push(u);
            embeddings.push(e);
        }
        let mut logits = Vec::with_capacity(height * width * n);
        for _ in 0..height * width {
            logits.extend_from_slice(&self.tensors[SEG_B]);
        }
        for k in 0..N_STAGES {
            let (hk, wk) = dims[k];
            let mut z = vec![T::zero(); hk * wk * n];
            T::gemm(
                hk * wk,
                CHANNELS[k],
                n,
                &features[k],
                false,
                &self.tensors[seg_w(k)],
                false,
                T::zero(),
                &mut z,
            );
            for (o, s) in logits
                .chunks_exact_mut(n)
                .zip(upsample_map(dims[k], height, width))
            {
                for (l, v) in o.iter_mut().zip(&z[s * n..(s + 1) * n]) {
                    *l += *v;
                }
            }
        }
        Ok(ForwardCache {
            height,
            width,
            input: image.to_vec(),
            dims,
            features,
            projected,
            norms,
            embeddings,
            logits,
        })
    }

    /// Parameter gradients given upstream gradients on the unit embeddings
    /// (per stage, pixel-major, `EMBED_DIM` each; `None` skips the heads) and
    /// on the logits.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_embeddings: Option<&[Vec<f64>]>,
        grad_logits: &[f64],
    ) -> Result<Vec<Vec<T>>> {
        let n = self.n_classes;
        let (height, width) = (cache.height, cache.width);
        if grad_logits.len() != height * width * n {
            return Err(Error::Argument("logit gradient has the wrong size".into()));
        }
        let mut grads: Vec<Vec<T>> = self
            .tensors
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        let mut grad_feat: Vec<Vec<T>> = cache
            .features
            .iter()
            .map(|f| vec![T::zero(); f.len()])
            .collect();

        // segmentation head: sum-pool the full-resolution gradient back to each stage
        for (b, g) in grads[SEG_B].iter_mut().zip(sum_rows(grad_logits, n)) {
            *b = T::cast(g);
        }
        for k in 0..N_STAGES {
            let (hk, wk) = cache.dims[k];
            let mut gz = vec![0.0f64; hk * wk * n];
            for (g, s) in
                grad_logits
                    .chunks_exact(n)
                    .zip(upsample_map(cache.dims[k], height, width))
            {
                for (a, b) in gz[s * n..(s + 1) * n].iter_mut().zip(g) {
                    *a += b;
                }
            }
            let gz: Vec<T> = gz.into_iter().map(T::cast).collect();
            let (p, c) = (hk * wk, CHANNELS[k]);
            T::gemm(
                c,
                p,
                n,
                &cache.features[k],
                true,
                &gz,
                false,
                T::one(),
                &mut grads[seg_w(k)],
            );
            T::gemm(
                p,
                n,
                c,
                &gz,
                false,
                &self.tensors[seg_w(k)],
                true,
                T::one(),
                &mut grad_feat[k],
            );
        }

        if let Some(ge) = grad_embeddings {
            if ge.len() != N_STAGES {
                return Err(Error::Argument(format!(
                    "{} embedding gradients, expected {N_STAGES}",
                    ge.len()
                )));
            }
            for k in 0..N_STAGES {
                let e = &cache.embeddings[k];
                if ge[k].len() != e.len() {
                    return Err(Error::Argument(format!(
                        "embedding gradient {k} has the wrong size"
                    )));
                }
                // through u -> u/|u|
                let mut gu = vec![T::zero(); e.len()];
                for (p, norm) in cache.norms[k].iter().enumerate() {
                    if *norm < crate::anchors::DEGENERATE_NORM {
                        continue;
                    }
                    let y = &e[p * EMBED_DIM..(p + 1) * EMBED_DIM];
                    let g = &ge[k][p * EMBED_DIM..(p + 1) * EMBED_DIM];
                    let proj: f64 = y.iter().zip(g).map(|(a, b)| a.widen() * b).sum();
                    for i in 0..EMBED_DIM {
                        gu[p * EMBED_DIM + i] = T::cast((g[i] - y[i].widen() * proj) / norm);
                    }
                }
                let [gw, gb] = pair_mut(&mut grads, head_w(k), head_b(k));
                head_stage!(
                    k,
                    linear_backward(
                        &cache.features[k],
                        &self.tensors[head_w(k)],
                        &gu,
                        gw,
                        Some(gb),
                        &mut grad_feat[k]
                    )
                );
            }
        }

        for k in (0..N_STAGES).rev() {
            let mut g = std::mem::take(&mut grad_feat[k]);
            for (gv, &f) in g.iter_mut().zip(&cache.features[k]) {
                if f <= T::zero() {
                    *gv = T::zero();
                }
            }
            let (x, xd) = if k == 0 {
                (&cache.input[..], (height, width))
            } else {
                (&cache.features[k - 1][..], cache.dims[k - 1])
            };
            let [gw, gb] = pair_mut(&mut grads, conv_w(k), conv_b(k));
            let grad_in = if k == 0 {
                None
            } else {
                Some(&mut grad_feat[k - 1][..])
            };
            conv_stage!(
                k,
                conv_backward(
                    x,
                    xd,
                    &self.tensors[conv_w(k)],
                    STRIDES[k],
                    cache.dims[k],
                    &g,
                    gw,
                    gb,
                    grad_in
                )
            );
        }
        Ok(grads)
    }
}

fn sum_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in x.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn pair_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> [&mut Vec<T>; 2] {
    debug_assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    [&mut lo[a], &mut hi[0]]
}
