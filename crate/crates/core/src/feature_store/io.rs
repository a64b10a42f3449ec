//! Binary PGM label maps, the CTXF tensor container, JSON reports.
//!
//! CTXF layout (all little-endian):
//!
//! ```text
//! "CTXF" | u32 version = 1 | u32 layer | u32 h | u32 w | u32 d | h*w*d f32
//! ```
//!
//! Several records may be concatenated in one file.

use super::embedding::FeatureGrid;
use super::labels::LabelMap;
use crate::error::{Error, Result};
use serde::{de::DeserializeOwned, Serialize};
use std::path::Path;

pub const CTXF_MAGIC: &[u8; 4] = b"CTXF";
pub const CTXF_VERSION: u32 = 1;
const CTXF_HEADER: usize = 24;

/// Layer sentinel used when an anchor set is dumped as a CTXF record.
pub const ANCHOR_LAYER: u32 = 0xFFFF;

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.values());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos, "truncated PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            pos,
            format!("maxval must be 255, got {maxval}"),
        ));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(pos, "missing whitespace after maxval"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(pos, "PGM dimensions overflow"))?;
    if width == 0 || height == 0 {
        return Err(Error::format(pos, "PGM dimensions must be non-zero"));
    }
    if bytes.len() - pos < n {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated PGM payload: need {n} bytes, have {}",
                bytes.len() - pos
            ),
        ));
    }
    LabelMap::new(height, width, bytes[pos..pos + n].to_vec())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(map))?)
}

/// A raw CTXF record.
#[derive(Clone, Debug, PartialEq)]
pub struct CtxfRecord {
    pub layer: u32,
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl CtxfRecord {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(CTXF_MAGIC);
        for v in [CTXF_VERSION, self.layer, self.height, self.width, self.dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.reserve(self.data.len() * 4);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes one record starting at `offset`; returns it with the offset just past it.
    pub fn decode_at(bytes: &[u8], offset: usize) -> Result<(Self, usize)> {
        let header = bytes
            .get(offset..offset + CTXF_HEADER)
            .ok_or_else(|| Error::format(bytes.len(), "truncated CTXF header"))?;
        if &header[..4] != CTXF_MAGIC {
            return Err(Error::format(offset, "bad CTXF magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != CTXF_VERSION {
            return Err(Error::format(
                offset + 4,
                format!("unsupported CTXF version {version}"),
            ));
        }
        let (layer, height, width, dim) = (word(1), word(2), word(3), word(4));
        let count = (height as usize)
            .checked_mul(width as usize)
            .and_then(|n| n.checked_mul(dim as usize))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
        let (count, payload) =
            count.ok_or_else(|| Error::format(offset + 12, "CTXF dimensions overflow"))?;
        let start = offset + CTXF_HEADER;
        let body = bytes.get(start..).unwrap_or_default();
        if body.len() < payload {
            return Err(Error::format(
                bytes.len(),
                format!(
                    "truncated CTXF payload: need {payload} bytes, have {}",
                    body.len()
                ),
            ));
        }
        let data = body[..payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), count);
        Ok((
            Self {
                layer,
                height,
                width,
                dim,
                data,
            },
            start + payload,
        ))
    }

    /// Decodes every record in a concatenated container.
    pub fn decode_all(bytes: &[u8]) -> Result<Vec<Self>> {
        let mut records = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let (r, next) = Self::decode_at(bytes, pos)?;
            records.push(r);
            pos = next;
        }
        Ok(records)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in u32")))
}

impl TryFrom<&FeatureGrid> for CtxfRecord {
    type Error = Error;
    fn try_from(g: &FeatureGrid) -> Result<Self> {
        Ok(Self {
            layer: g.layer,
            height: to_u32(g.height, "height")?,
            width: to_u32(g.width, "width")?,
            dim: to_u32(g.dim, "dim")?,
            data: g.data.clone(),
        })
    }
}

pub fn encode_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    Ok(CtxfRecord::try_from(grid)?.encode())
}

pub fn decode_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let (r, end) = CtxfRecord::decode_at(bytes, 0)?;
    if end != bytes.len() {
        return Err(Error::format(end, "trailing bytes after CTXF record"));
    }
    FeatureGrid::new(
        r.layer,
        r.height as usize,
        r.width as usize,
        r.dim as usize,
        r.data,
    )
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    decode_grid(&std::fs::read(path)?)
}

pub fn write_grid(path: impl AsRef<Path>, grid: &FeatureGrid) -> Result<()> {
    Ok(std::fs::write(path, encode_grid(grid)?)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::IGNORE;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    #[test]
    fn pgm_round_trip() {
        let m = LabelMap::new(2, 2, vec![0, 1, IGNORE, 3]).unwrap();
        let bytes = encode_pgm(&m);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(decode_pgm(&bytes).unwrap(), m);
    }

    #[test]
    fn pgm_with_comment_header() {
        let mut bytes = b"P5\n# made by hand\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_pgm(&bytes).unwrap().values(), &[1, 2, 3]);
    }

    #[test]
    fn pgm_errors_carry_offsets() {
        assert!(matches!(
            decode_pgm(b"P6\n1 1\n255\n\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\0"),
            Err(Error::Format { offset: 12, .. })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n15\n\0"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn ctxf_wrong_magic() {
        let g = FeatureGrid::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let mut bytes = encode_grid(&g).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_grid(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn ctxf_truncated_and_overflow() {
        let g = FeatureGrid::new(2, 2, 2, 2, vec![0.5; 8]).unwrap();
        let bytes = encode_grid(&g).unwrap();
        assert!(matches!(
            decode_grid(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_grid(&bytes[..10]),
            Err(Error::Format { .. })
        ));
        let huge = CtxfRecord {
            layer: 0,
            height: u32::MAX,
            width: u32::MAX,
            dim: u32::MAX,
            data: vec![],
        };
        assert!(matches!(
            decode_grid(&huge.encode()),
            Err(Error::Format { offset: 12, .. })
        ));
    }

    #[test]
    fn large_grid_round_trip_is_byte_exact() {
        let mut rng = CounterRng::new(5);
        let data: Vec<f32> = (0..64 * 64 * 16).map(|_| rng.gaussian() as f32).collect();
        let g = FeatureGrid::new(3, 64, 64, 16, data).unwrap();
        let bytes = encode_grid(&g).unwrap();
        assert_eq!(bytes.len(), 24 + 64 * 64 * 16 * 4);
        let back = decode_grid(&bytes).unwrap();
        assert_eq!(encode_grid(&back).unwrap(), bytes);
        assert!(back
            .data
            .iter()
            .zip(&g.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn concatenated_records_decode_in_order() {
        let a = CtxfRecord {
            layer: 1,
            height: 1,
            width: 2,
            dim: 1,
            data: vec![1.0, 2.0],
        };
        let b = CtxfRecord {
            layer: ANCHOR_LAYER,
            height: 3,
            width: 1,
            dim: 1,
            data: vec![3.0; 3],
        };
        let mut bytes = a.encode();
        b.encode_into(&mut bytes);
        assert_eq!(CtxfRecord::decode_all(&bytes).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn grid_round_trip_bit_exact(h in 1usize..5, w in 1usize..5, d in 1usize..4, seed in 0u64..1000) {
            let mut rng = CounterRng::new(seed);
            let data: Vec<f32> = (0..h * w * d).map(|_| f32::from_bits(rng.next_u64() as u32)).collect();
            let g = FeatureGrid::new(seed as u32, h, w, d, data).unwrap();
            let back = decode_grid(&encode_grid(&g).unwrap()).unwrap();
            prop_assert!(back.data.iter().zip(&g.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!((back.height, back.width, back.dim, back.layer), (h, w, d, seed as u32));
        }

        #[test]
        fn pgm_round_trip_any(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let mut rng = CounterRng::new(seed);
            let vals: Vec<u8> = (0..h * w).map(|_| rng.next_u64() as u8).collect();
            let m = LabelMap::new(h, w, vals).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
        }
    }
}
