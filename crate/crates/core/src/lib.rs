//! Training and inference for factorized radiance fields over 3-D space
//! plus K scalar simulation parameters.
//!
//! A scene is stored as low-rank planes and lines over (x, y, z) combined
//! with one line per parameter axis. Small decoders turn sampled features
//! into density and color, which are volume-rendered along camera rays.

pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod encoding;
pub mod error;
pub mod field;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod real;
pub mod render;
pub mod train;

pub use error::{Error, Result};
pub use field::{Aabb, Decomposition, FactorizedField, FeatureKind, FieldConfig, GridLayout};
pub use metrics::{psnr, ssim, ImageF};
pub use model::Model;
pub use real::Real;
pub use render::{Camera, MaskVolume, RenderConfig};
