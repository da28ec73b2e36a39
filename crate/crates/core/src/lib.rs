//! Linear-complexity replacements for Softmax attention blocks built on
//! test-time training (TTT), together with the tooling to check them.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`conv`], [`activation`], [`fd`]: a small dense
//!   tensor engine with higher-order reverse-mode differentiation and a
//!   finite-difference oracle.
//! - [`attention`]: Softmax, dynamic-MLP, kernel linear and neighborhood
//!   attention references.
//! - [`ttt`]: inner models, inner losses, the fast-weight update and the
//!   query pass.
//! - [`align`]: key statistics and normalizations that restore key-shift
//!   invariance, plus the shifted-gradient expansion.
//! - [`locality`]: depthwise-convolution locality enhancement, TTT/NAT
//!   blending and gradient-based implicit attention maps.
//! - [`convert`]: weight inheritance from Softmax blocks, parameter
//!   accounting, learning-rate groups and checkpoints.
//! - [`analysis`]: the FLOPs model, the scaling benchmark and the
//!   teacher-fit experiment.
//! - [`verify`]: runnable invariant suites with machine-readable reports.

pub mod activation;
pub mod align;
pub mod analysis;
pub mod attention;
pub mod block;
pub mod conv;
pub mod convert;
pub mod error;
pub mod fd;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod ttt;
pub mod locality;
pub mod verify;

pub use activation::ActivationKind;
pub use error::{Error, FormatError, Result};
pub use tape::{Tape, Var};
pub use tensor::{DType, Tensor};
