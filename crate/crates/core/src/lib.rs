//! Ellipse signatures of language-model outputs.
//!
//! A model whose final layer is a normalization followed by a linear
//! unembedding emits centered logits that lie on a fixed ellipsoid inside a
//! low-dimensional subspace of the vocabulary space. This crate synthesizes
//! such models, recovers the ellipsoid from observed logprobs, verifies and
//! attributes outputs against known or recovered ellipsoids, and builds a
//! message-authentication scheme on top.

pub mod cost;
pub mod error;
pub mod fit;
pub mod io;
pub mod linalg;
pub mod logits;
pub mod mac;
pub mod recovery;
pub mod synth;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
