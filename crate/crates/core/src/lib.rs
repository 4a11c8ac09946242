//! A micro deep-learning engine built around batch normalization and its
//! attribute-conditioned variant, plus the synthetic-data experiment battery
//! that probes how conditioning on auxiliary attributes displaces visual
//! feature learning.

pub mod checkpoint;
pub mod conditioning;
pub mod datagen;
pub mod diagnostics;
pub mod digest;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod norm;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{BatchStats, NormMode, Tape, TensorId};
pub use tensor::Tensor;
