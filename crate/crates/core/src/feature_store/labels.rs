use crate::error::{Error, Result};

/// Label value that excludes a pixel from every loss and metric.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids, row-major. Used for ground truth and predictions alike.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "label map must be non-empty, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Argument(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.values[row * self.width + col] = class;
    }

    /// Checks that every non-IGNORE value is a valid class id.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self
            .values
            .iter()
            .position(|&v| v != IGNORE && v as usize >= n_classes)
        {
            Some(i) => Err(Error::Argument(format!(
                "label {} at pixel {i} exceeds class count {n_classes}",
                self.values[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Nearest-neighbour resampling at pixel centres:
/// `src = floor((dst + 0.5) * src_len / dst_len)`.
pub fn downsample_labels(map: &LabelMap, target: (usize, usize)) -> Result<LabelMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Argument("zero-sized downsampling target".into()));
    }
    if th > map.height || tw > map.width {
        return Err(Error::Argument(format!(
            "target {th}x{tw} exceeds source {}x{}",
            map.height, map.width
        )));
    }
    if target == map.dims() {
        return Ok(map.clone());
    }
    let rows: Vec<usize> = (0..th).map(|r| center_index(r, map.height, th)).collect();
    let cols: Vec<usize> = (0..tw).map(|c| center_index(c, map.width, tw)).collect();
    let mut values = Vec::with_capacity(th * tw);
    for &r in &rows {
        for &c in &cols {
            values.push(map.get(r, c));
        }
    }
    LabelMap::new(th, tw, values)
}

// floor((dst + 0.5) * src / dst) in integers: floor((2*dst + 1) * src / (2*dst_len))
fn center_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Per-layer resolutions of the reference encoder: layer `k` (0-based) is
/// `ceil(H / 2^k)` by `ceil(W / 2^k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub full: (usize, usize),
    pub layers: Vec<(usize, usize)>,
}

impl LayerGeometry {
    pub fn reference(height: usize, width: usize, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|k| (height.div_ceil(1 << k), width.div_ceil(1 << k)))
            .collect();
        Self {
            full: (height, width),
            layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_downsamples_to_constant() {
        let m = LabelMap::filled(4, 4, 2).unwrap();
        let d = downsample_labels(&m, (2, 2)).unwrap();
        assert_eq!(d.values(), &[2, 2, 2, 2]);
    }

    #[test]
    fn identity_target_is_noop() {
        let m = LabelMap::new(2, 3, vec![0, 1, 2, 3, IGNORE, 1]).unwrap();
        assert_eq!(downsample_labels(&m, (2, 3)).unwrap(), m);
    }

    #[test]
    fn checkerboard_matches_center_sampling() {
        let vals: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let m = LabelMap::new(4, 4, vals).unwrap();
        let d = downsample_labels(&m, (2, 2)).unwrap();
        // Oracle: centre of dst (r, c) sits at source (2r + 1, 2c + 1).
        for r in 0..2 {
            for c in 0..2 {
                let (sr, sc) = ((r as f64 + 0.5) * 2.0, (c as f64 + 0.5) * 2.0);
                assert_eq!(d.get(r, c), m.get(sr.floor() as usize, sc.floor() as usize));
            }
        }
        assert_eq!(d.values(), &[0, 0, 0, 0]);
    }

    #[test]
    fn zero_target_is_rejected() {
        let m = LabelMap::filled(4, 4, 0).unwrap();
        assert!(matches!(
            downsample_labels(&m, (0, 2)),
            Err(Error::Argument(_))
        ));
        assert!(downsample_labels(&m, (5, 2)).is_err());
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let m = LabelMap::new(1, 3, vec![0, IGNORE, 4]).unwrap();
        assert!(m.validate(5).is_ok());
        assert!(m.validate(4).is_err());
    }

    #[test]
    fn geometry_halves_with_ceiling() {
        let g = LayerGeometry::reference(64, 64, 4);
        assert_eq!(g.layers, vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        let g = LayerGeometry::reference(5, 9, 4);
        assert_eq!(g.layers, vec![(5, 9), (3, 5), (2, 3), (1, 2)]);
    }
}
