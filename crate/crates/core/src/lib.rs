//! Detection of surface-quality change between polishing stages.
//!
//! Height maps are levelled by a sphere fit, reduced to bearing area curves
//! on a quantile grid, and compared stage against stage with Westfall-Young
//! permutation tests on the peak tail, the valley tail and the spread.

pub mod calibration;
pub mod decision;
pub mod error;
pub mod io;
pub mod permutation;
pub mod roughness;
pub mod simulation;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
