//! Spatial deformation for non-stationary extremal dependence.
//!
//! Sampling locations are mapped through a restricted thin-plate spline so
//! that pairwise extremal dependence becomes a function of distance in the
//! deformed plane. Stationary Brown–Resnick and inverted Brown–Resnick models
//! are then fitted by censored pairwise likelihood and ranked by CLAIC.

pub mod data;
pub mod deform;
pub mod dependence;
pub mod diagnostics;
pub mod error;
pub mod likelihood;
pub mod optim;
pub mod simulate;
pub mod special;
pub mod study;
pub mod tps;

pub use error::{Error, Result};
