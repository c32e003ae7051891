//! Nonparametric conditional density estimation by orthogonal series
//! expansion with regression-estimated coefficients.

pub mod baselines;
pub mod basis;
pub mod bench;
pub mod datasets;
pub mod diagnostics;
pub mod distreg;
pub mod error;
pub mod flexcode;
pub mod grid;
pub mod loss;
pub mod regress;
pub mod table;

pub use error::{CdeError, Result};
