//! Continuum-robot localization against a prior point-cloud map.
//!
//! The estimator fuses sparse time-of-flight range scans, gyroscope rates and
//! backbone strain measurements in a continuous-time factor graph and solves
//! the MAP problem over a sliding window with Gauss-Newton and IRLS.

pub mod error;
pub mod geom;
pub mod state;
pub mod ply;
pub mod envmap;
pub mod factors;
pub mod banded;
pub mod solver;
pub mod recon;
pub mod records;

pub use error::{Error, Result};
