//! Bayesian uncertainty-aware segmentation.

pub mod calibration;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod losses;
pub mod models;
pub mod nn;
pub mod output;
pub mod rng;
pub mod tensor;
pub mod uncertainty;
pub mod variational;

pub use error::{Error, Result};
