//! Checkpoint directory: `manifest.json` plus `params.ctxf`, one CTXF record
//! per tensor in layout order. Nothing time-dependent is written, so equal
//! parameters give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::io::CtxfRecord;

use super::config::TrainConfig;
use super::encoder::{tensor_layout, Encoder, TensorInfo};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.ctxf";
const FORMAT: &str = "contextrast-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Encoder,
    /// Predicts the ground truth; a test stub for the evaluation path.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub n_classes: usize,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub config: TrainConfig,
    pub encoder: Encoder<f32>,
}

fn record_dims(shape: &[usize]) -> (u32, u32, u32) {
    match *shape {
        [n] => (1, 1, n as u32),
        [a, b] => (a as u32, 1, b as u32),
        [a, b, c] => (a as u32, b as u32, c as u32),
        _ => unreachable!("encoder tensors have rank 1 to 3"),
    }
}

fn manifest_for(model: ModelKind, enc: &Encoder<f32>, cfg: &TrainConfig) -> Manifest {
    Manifest {
        format: FORMAT.into(),
        version: 1,
        model,
        n_classes: enc.n_classes,
        config: cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        tensors: enc.layout(),
    }
}

/// `(manifest.json, params.ctxf)` contents.
pub fn encode_checkpoint(
    model: ModelKind,
    enc: &Encoder<f32>,
    cfg: &TrainConfig,
) -> Result<(Vec<u8>, Vec<u8>)> {
    enc.check_shapes()?;
    let manifest = manifest_for(model, enc, cfg);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    let mut params = Vec::new();
    for (i, (info, data)) in manifest.tensors.iter().zip(&enc.tensors).enumerate() {
        let (height, width, dim) = record_dims(&info.shape);
        CtxfRecord {
            layer: i as u32,
            height,
            width,
            dim,
            data: data.clone(),
        }
        .encode_into(&mut params);
    }
    Ok((json, params))
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: ModelKind,
    enc: &Encoder<f32>,
    cfg: &TrainConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (json, params) = encode_checkpoint(model, enc, cfg)?;
    std::fs::write(dir.join(MANIFEST), json)?;
    std::fs::write(dir.join(PARAMS), params)?;
    Ok(())
}

pub fn decode_checkpoint(manifest: &[u8], params: &[u8]) -> Result<Checkpoint> {
    let m: Manifest =
        serde_json::from_slice(manifest).map_err(|e| Error::format(0, format!("manifest: {e}")))?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::format(
            0,
            format!("unsupported checkpoint {} v{}", m.format, m.version),
        ));
    }
    let text: String = m
        .config
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let config = TrainConfig::parse(&text)?;
    let layout = tensor_layout(m.n_classes);
    if layout != m.tensors {
        return Err(Error::format(
            0,
            "tensor list does not match the encoder layout",
        ));
    }
    let records = CtxfRecord::decode_all(params)?;
    if records.len() != layout.len() {
        return Err(Error::format(
            0,
            format!(
                "{} tensor records, expected {}",
                records.len(),
                layout.len()
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (i, (info, rec)) in layout.iter().zip(records).enumerate() {
        if rec.layer != i as u32 || (rec.height, rec.width, rec.dim) != record_dims(&info.shape) {
            return Err(Error::format(
                0,
                format!("record {i} does not match tensor {}", info.name),
            ));
        }
        tensors.push(rec.data);
    }
    Ok(Checkpoint {
        model: m.model,
        config,
        encoder: Encoder {
            n_classes: m.n_classes,
            tensors,
        },
    })
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = std::fs::read(dir.join(MANIFEST))?;
    let params = std::fs::read(dir.join(PARAMS))?;
    decode_checkpoint(&manifest, &params)
}
