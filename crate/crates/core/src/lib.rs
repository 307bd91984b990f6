//! Continual learning with domain-aware categorical representations.
//!
//! Every class is a mixture of von Mises-Fisher components over
//! L2-normalized backbone features. Sessions expand the mixtures, train
//! backbone and means by hard-EM, merge redundant components, and refill
//! a replay memory balanced over classes and components.

pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod memory;
pub mod mixture;
pub mod streams;
pub mod structure;
pub mod trainer;
pub mod vmf;

pub use error::{Error, Result};
