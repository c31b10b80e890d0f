//! Pupil-adaptive 3D holography toolkit.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`tensor`] / [`tape`]: dense real tensors with reverse-mode automatic
//!   differentiation (complex fields are stored as paired real planes),
//! - [`wave`]: band-limited angular-spectrum propagation, double-phase
//!   encoding and finite-pupil viewing simulation,
//! - [`optics`]: thin-lens eye model, circle-of-confusion math and focal
//!   plane scheduling,
//! - [`scene`]: procedural layered scenes and incoherent focal-stack
//!   rendering used as ground truth,
//! - [`net`]: the pupil-conditioned hologram predictor built on adjustable
//!   deformable convolutions,
//! - [`train`]: focal-stack-supervised training,
//! - [`retrieve`]: non-neural hologram optimizers (Gerchberg-Saxton, SGD,
//!   pupil-aware light-field optimization),
//! - [`metrics`]: PSNR/SSIM and the offset/DoF/eyebox analyses.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32` for speed, `f64` for oracle-grade precision); concrete aliases
//! live at the crate root.

pub mod error;
pub mod fft;
pub mod metrics;
pub mod net;
pub mod optics;
pub mod pngio;
pub mod retrieve;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wave;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Value};
pub use tensor::Tensor;

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor for oracle-grade checks.
pub type Tensor64 = Tensor<f64>;
/// Single-precision autodiff tape.
pub type Tape32 = Tape<f32>;
/// Double-precision autodiff tape.
pub type Tape64 = Tape<f64>;
