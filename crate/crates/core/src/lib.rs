//! Continual learning for selective state-space models with null-space
//! projected parameter updates.

pub mod benchgen;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod nullspace;
pub mod ssm;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
