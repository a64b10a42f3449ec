use super::labels::{LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major grid of `dim`-channel vectors for one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub layer: u32,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        layer: u32,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(dim))
            .ok_or_else(|| Error::Argument("feature grid dims overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Argument(format!(
                "feature grid {height}x{width}x{dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            layer,
            height,
            width,
            dim,
            data,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// 1x1 linear map from raw channels to the embedding dimension.
/// Weight layout is `[input][output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ProjectionHead {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            input_dim: dim,
            output_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }
}

/// Output of [`project`]: unit vectors plus a flag for every pixel whose
/// projection was exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub grid: FeatureGrid,
    pub degenerate: Vec<bool>,
}

/// L2-normalises each `dim`-wide row in place (norm accumulated in f64).
/// Returns the pre-normalisation norms; zero rows stay zero and report 0.
pub fn normalize_rows<T: Real>(data: &mut [T], dim: usize) -> Vec<f64> {
    data.chunks_exact_mut(dim)
        .map(|row| {
            let norm = row
                .iter()
                .map(|x| x.widen() * x.widen())
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for x in row.iter_mut() {
                    *x = T::cast(x.widen() / norm);
                }
            }
            norm
        })
        .collect()
}

/// Applies `head` per pixel, then L2 normalisation.
pub fn project(raw: &FeatureGrid, head: &ProjectionHead) -> Result<Projected> {
    if raw.dim != head.input_dim {
        return Err(Error::Config(format!(
            "projection head expects {} channels, grid has {}",
            head.input_dim, raw.dim
        )));
    }
    if head.weight.len() != head.input_dim * head.output_dim || head.bias.len() != head.output_dim {
        return Err(Error::Config(
            "projection head parameter shape mismatch".into(),
        ));
    }
    let d = head.output_dim;
    let mut out = vec![0.0f32; raw.pixels() * d];
    for (src, dst) in raw.data.chunks_exact(raw.dim).zip(out.chunks_exact_mut(d)) {
        let mut acc: Vec<f64> = head.bias.iter().map(|&b| b as f64).collect();
        for (i, &x) in src.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &head.weight[i * d..(i + 1) * d];
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += x as f64 * w as f64;
            }
        }
        for (o, a) in dst.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    let norms = normalize_rows(&mut out, d);
    Ok(Projected {
        grid: FeatureGrid::new(raw.layer, raw.height, raw.width, d, out)?,
        degenerate: norms.iter().map(|&n| n == 0.0).collect(),
    })
}

/// Where an embedding came from: batch image and pixel at layer resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelRef {
    pub image: u32,
    pub row: u32,
    pub col: u32,
}

/// Non-IGNORE embeddings of one layer, possibly across several batch images.
/// Stored column-wise; entry `k` is `vector(k)`, `gt[k]`, `pred[k]`, `pixels[k]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub layer: u32,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub vectors: Vec<f32>,
    pub gt: Vec<u8>,
    pub pred: Vec<u8>,
    pub pixels: Vec<PixelRef>,
    /// Zero-norm embeddings; excluded from anchors and losses.
    pub degenerate: Vec<bool>,
    images: usize,
    slots: Vec<u32>,
}

const NO_SLOT: u32 = u32::MAX;

impl EmbeddingSet {
    pub fn empty(layer: u32, dim: usize, height: usize, width: usize) -> Self {
        Self {
            layer,
            dim,
            height,
            width,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Entry index of a pixel, if that pixel was not ignored.
    pub fn lookup(&self, image: usize, row: usize, col: usize) -> Option<usize> {
        if image >= self.images || row >= self.height || col >= self.width {
            return None;
        }
        match self.slots[(image * self.height + row) * self.width + col] {
            NO_SLOT => None,
            s => Some(s as usize),
        }
    }

    /// Appends one image's pixels in row-major order, skipping IGNORE labels.
    pub fn push_image(&mut self, grid: &FeatureGrid, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        let dims = (grid.height, grid.width);
        if gt.dims() != dims || pred.dims() != dims {
            return Err(Error::Argument(format!(
                "flatten: grid {:?}, gt {:?}, pred {:?} disagree",
                dims,
                gt.dims(),
                pred.dims()
            )));
        }
        if self.images == 0 && self.is_empty() {
            self.dim = grid.dim;
            self.height = grid.height;
            self.width = grid.width;
            self.layer = grid.layer;
        } else if grid.dim != self.dim || dims != (self.height, self.width) {
            return Err(Error::Argument(
                "flatten: grid shape differs from the set".into(),
            ));
        }
        let image = self.images as u32;
        for row in 0..grid.height {
            for col in 0..grid.width {
                let label = gt.get(row, col);
                if label == IGNORE {
                    self.slots.push(NO_SLOT);
                    continue;
                }
                self.slots.push(self.gt.len() as u32);
                let v = grid.pixel(row, col);
                self.degenerate.push(v.iter().all(|&x| x == 0.0));
                self.vectors.extend_from_slice(v);
                self.gt.push(label);
                self.pred.push(pred.get(row, col));
                self.pixels.push(PixelRef {
                    image,
                    row: row as u32,
                    col: col as u32,
                });
            }
        }
        self.images += 1;
        Ok(())
    }

    /// Indices of usable (non-degenerate) entries with the given GT class.
    pub fn members_of(&self, class: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| self.gt[k] == class && !self.degenerate[k])
            .collect()
    }
}

/// One entry per non-IGNORE pixel of a single image, row-major.
pub fn flatten(grid: &FeatureGrid, gt: &LabelMap, pred: &LabelMap) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::empty(grid.layer, grid.dim, grid.height, grid.width);
    set.push_image(grid, gt, pred)?;
    Ok(set)
}
