//! Blind membership inference by differential comparison.
//!
//! The attacks look only at output probability vectors. The core idea is to
//! compare a target set against a set of known nonmembers under the kernel
//! MMD distance: moving a target sample into the nonmember set increases the
//! distance when that sample is itself a nonmember.

pub mod baselines;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod harness;
pub mod kernels;
pub mod nonmember;
pub mod oneclass;
pub mod projection;
pub mod toy;

pub use error::{Error, Result};
