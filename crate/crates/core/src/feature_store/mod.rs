//! Label, prediction and feature grids; the projection into the embedding
//! space; resolution alignment across encoder layers; file formats.

mod embedding;
pub mod io;
mod labels;

pub use embedding::{
    flatten, normalize_rows, project, EmbeddingSet, FeatureGrid, PixelRef, Projected,
    ProjectionHead,
};
pub use labels::{downsample_labels, LabelMap, LayerGeometry, IGNORE};
