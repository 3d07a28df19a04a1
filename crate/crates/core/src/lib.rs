//! Personalized-attention news recommendation on a small dense-tensor core.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and anything else touching the OS live in the `npa` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Mode, Tensor};
