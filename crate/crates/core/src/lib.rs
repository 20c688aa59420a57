//! Multi-aspect rationale extraction.
//!
//! A small transformer encoder prepends one classification token per aspect
//! and, from a chosen layer onward, lets an aspect controller decide which
//! text tokens each aspect keeps. The per-aspect keep masks are combined by
//! an outer product into an attention mask, so tokens kept by disjoint
//! aspects never exchange information and every aspect is classified and
//! explained in a single pass.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. File formats, timing and the command line live in the `mare`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod encoder;
pub mod eval;
pub mod mac;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use numerics::{NumericsError, RngState, Stream, Tape, Tensor, Var};
