//! Whole-slide nuclei detection engine.
//!
//! The crate covers everything around a nuclei detector except the neural
//! network itself:
//!
//! - [`slide_io`] reads pyramidal TIFF and PNG slides and generates synthetic
//!   annotated slides for desk-scale runs.
//! - [`stain`] converts between RGB and hematoxylin/eosin/DAB optical density,
//!   builds tissue masks and implements the training-time augmentations.
//! - [`tiler`] lays out overlapped tiles and windows and merges detections
//!   with the central-crop rule.
//! - [`detector`] is the backend contract plus the oracle, jitter and
//!   external-process backends.
//! - [`matchloss`] holds the set-prediction math: box formats, GIoU, focal
//!   loss, pairwise matching cost and the optimal assignment solver.
//! - [`metrics`] implements centroid matching and the detection and
//!   per-class classification scores.
//! - [`pipeline`] wires the above into a timed whole-slide run and a
//!   throughput benchmark.
//!
//! # Features
//!
//! - `parallel` *(default)*: tile workers and per-pixel loops run on rayon.
//!   Without it the same code runs sequentially; results are bit-identical.

pub mod annotation;
pub mod detector;
pub mod error;
pub mod matchloss;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod slide_io;
pub mod stain;
pub mod tiler;

pub use annotation::{AnnotationRecord, AnnotationSet};
pub use error::{Error, Result};
pub use slide_io::{RasterImage, SlideSource};
pub use tiler::{Detection, PixelRect};

/// PanNuke class names in the order used by the adapter handshake.
pub const DEFAULT_CLASS_NAMES: [&str; 5] = [
    "neoplastic",
    "epithelial",
    "inflammatory",
    "connective",
    "necrosis",
];

pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}
