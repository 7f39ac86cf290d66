//! Cross-modal (camera ↔ LiDAR) global localization with a batched
//! contrastive dual encoder.
//!
//! LiDAR sweeps are projected to range images, both modalities are embedded
//! into a shared unit sphere, and a query is localized by exact top-k cosine
//! retrieval against a database of the other modality.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod pipeline;
pub mod projection;
pub mod retrieval;
pub mod seed;
pub mod sweep;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
