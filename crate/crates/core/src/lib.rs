// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-versus-neuron interpretability lab.

pub mod attribution;
pub mod checkpoint;
pub mod datasets;
pub mod decomp;
pub mod editing;
pub mod error;
pub mod eval;
pub mod interp;
pub mod sae;
pub mod toylm;
pub mod units;

pub use error::{Error, Result};
