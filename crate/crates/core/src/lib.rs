//! Cooperative BEV perception with diffusion denoising.
//!
//! The crate is organized around a small dense-tensor autodiff engine
//! ([`numerics`]) that every learnable block is built from. On top of it:
//!
//! * [`scene`] — synthetic multi-agent LiDAR scenes and the six corruption
//!   families used for robustness evaluation,
//! * [`bev`] — pillar voxelization into bird's-eye-view feature maps plus the
//!   16x channel compression applied to transmitted features,
//! * [`diffusion`] — the forward Q-process and the deterministic DDIM
//!   reverse process,
//! * [`teacher`] — quality-aware early-fusion teacher producing clean
//!   supervision targets,
//! * [`student`] — the dual-branch denoising student with cooperative
//!   deformable attention and ego-guided cross-attention decoding,
//! * [`losses`] / [`train`] — the four-term objective and the two-stage
//!   training loops,
//! * [`eval`] — rotated-box AP, relative corruption error and the sweep
//!   protocols.
//!
//! All numeric code is generic over the scalar type via [`numerics::Scalar`];
//! training and verification run in `f64`, inference may run in `f32`.

pub mod bev;
pub mod blocks;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod io;
pub mod losses;
pub mod numerics;
pub mod report;
pub mod rng;
pub mod scene;
pub mod student;
pub mod teacher;
pub mod train;

mod error;

pub use error::{Error, Result};

/// Scalar used for training and all verification arithmetic.
pub type Real = f64;
/// Tensor alias at training precision.
pub type Tensor = numerics::TensorData<f64>;
/// Tensor alias at inference precision.
pub type Tensor32 = numerics::TensorData<f32>;
