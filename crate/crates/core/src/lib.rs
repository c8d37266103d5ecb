//! Two-stream HSI + LiDAR patch classifier built from stacked cross-modal
//! encoder/decoder blocks, together with the reverse-mode differentiation
//! tape it trains on.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command-line
//! tool and everything else touching the operating system live in the
//! companion `hlfusion` crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod tape;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
