//! Multi-head spatial attention over local image descriptors with temporal
//! softmax pooling over video frames: a trainable sequence-classification
//! library with baseline poolings, a synthetic planted-signal benchmark, a
//! gradient-check harness, and a CLI.

// The numeric kernels index several arrays from one loop variable so the
// code mirrors the subscripted math; iterator rewrites obscure that.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};
