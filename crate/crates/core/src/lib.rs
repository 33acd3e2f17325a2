//! Regression with a fixed sketching basis built from closed-form deep ReLU
//! components.
//!
//! The pipeline: project inputs onto equal-area sphere directions, feed the
//! projections through trapezoid, square and product components to get a
//! linear feature basis, fit coefficients by minimum-norm least squares and
//! predict through a truncation operator. Hyper-parameters are chosen by
//! hold-out validation or grid search, and [`bench`] reruns the synthetic
//! experiments.

pub mod basis;
pub mod bench;
pub mod components;
pub mod data;
pub mod error;
pub mod report;
pub mod seed;
pub mod selection;
pub mod solver;
pub mod sphere;

pub use error::{Error, Result};
