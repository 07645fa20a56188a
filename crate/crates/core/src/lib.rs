//! Domain-adaptive completion of partial point clouds.
//!
//! A point-proxy backbone feeds a transformer encoder-decoder whose decoder
//! layers each predict a full cloud. Adversarial discriminators align source
//! and target features, and agreement between the per-layer predictions
//! decides which target predictions become pseudo-labels.

pub mod align;
pub mod backbone;
pub mod cloud_io;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod nn;
pub mod seq2seq;
pub mod tape;
pub mod trainer;
pub mod vpc;

pub use error::{Error, Result};
pub use geometry::{Point3, PointCloud};
