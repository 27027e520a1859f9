//! Interactive feature fusion for noise-robust speech features.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tape`]), a
//! log-mel front end ([`fbank`]), the two-branch fusion network ([`model`]),
//! a synthetic over-suppression corpus ([`sim`]) and a desk-scale training
//! harness ([`train`]).

pub mod error;
pub mod fbank;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod model;
pub mod scalar;
pub mod sim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{AttentionAxis, Tensor};
