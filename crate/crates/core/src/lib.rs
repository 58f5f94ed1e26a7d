//! Camera/LiDAR BEV fusion: windowed self-attention enhancement,
//! bidirectional cross-attention, adaptive gated fusion and residual
//! aggregation, with tape-based gradients and exact MAC accounting.

pub mod aggregation;
pub mod attention;
pub mod autodiff;
pub mod degradation;
pub mod error;
pub mod gated_fusion;
pub mod gradsuite;
pub mod io;
pub mod macs;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod windowing;

pub use error::{Error, Result};
pub use tensor::{BevMap, Modality, Tensor};
