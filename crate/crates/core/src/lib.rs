//! Multi-view vision transformer toolkit for RSSI estimation from
//! distributed camera views.
//!
//! The crate covers a small reverse-mode tensor engine ([`tape`]), the
//! per-camera ViT encoder ([`vit`]), the fusion variants ([`model`]), an
//! analytic cost counter ([`analysis`]), RSSI trace conditioning
//! ([`rssi`]), a synthetic scene generator ([`scene`], [`dataset`]),
//! training ([`trainer`], [`checkpoint`]) and evaluation ([`metrics`]).
//!
//! Batch work (per-sample gradients, evaluation, frame rendering) runs
//! through [`parallel`], which uses rayon when the default `parallel`
//! feature is enabled and falls back to a sequential loop otherwise.

pub mod analysis;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod rssi;
pub mod scene;
pub mod session;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
