//! Token-space data augmentation with projection for knowledge distillation.
//!
//! The crate contains a small hand-differentiated classifier stack
//! ([`tensor`]), embedding tables with nearest-neighbour projection back to
//! tokens ([`embedding`]), the augmentation operators ([`augment`]), the
//! distillation loop ([`distill`]), a synthetic keyword task ([`data`]),
//! Monte Carlo verifiers for the hypercube diversity results
//! ([`diversity`]), an exact rational 2D hard-margin SVM ([`svm`]) and the
//! command line front end ([`cli`]).

pub mod augment;
pub mod bench;
pub mod cli;
pub mod data;
pub mod distill;
pub mod diversity;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod io;
pub mod rng;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};
