//! Post-processing of lossy-codec output with a small attention residual
//! network.
//!
//! The crate bundles everything the pipeline needs: a reverse-mode autodiff
//! engine ([`tensor`]), the network itself ([`network`]), quality metrics and
//! training losses ([`metrics`]), a two-phase Adam trainer ([`trainer`]),
//! dataset handling ([`data`]) and codec orchestration with bit-rate targeting
//! ([`codec`]).

pub mod codec;
pub mod data;
pub mod error;
pub mod image;
pub mod metrics;
pub mod network;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use metrics::{LossConfig, LossPhase};
pub use network::{ModelConfig, ModelParameters};
pub use tensor::{Graph, Scalar, Tensor, Var};
