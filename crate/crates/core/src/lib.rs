//! Human pose estimation from single depth images.
//!
//! A small fully convolutional network regresses one heat map per body
//! part; a window of candidates around each peak is scored against learned
//! part templates by a two-tower patch matcher, and exact dynamic
//! programming over a kinematic tree picks one candidate per part. The
//! tree weights are trained as a latent structural SVM.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataio;
pub mod error;
pub mod eval;
pub mod fcn;
pub mod inference;
pub mod kinematics;
pub mod learning;
pub mod matchnet;
pub mod nn;
pub mod pipeline;
pub mod proposals;

mod binio;

pub use binio::ParamBlock;
pub use error::{Error, FormatError, Result};
