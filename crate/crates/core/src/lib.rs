//! Post-hoc recalibration of probabilistic regression outputs and the
//! calibration metrics used to judge them.
//!
//! Calibrators consume a [`CalibrationDataset`] of Gaussian predictions with
//! matched ground truths and produce recalibrated [`Prediction`]s: isotonic
//! regression and variance scaling as global baselines, and a family of
//! sparse variational GP calibrators whose recalibration parameters depend on
//! the input distribution.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod dataset;
pub mod detection;
pub mod dist;
pub mod error;
pub mod gp;
pub mod io;
pub mod linalg;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod synth;

pub use dataset::{CalibrationDataset, Sample};
pub use dist::{CauchyPrediction, GaussianPrediction, GridCdf, NonparametricDistribution, Prediction};
pub use error::{Error, Result};
pub use gp::{GpCalibrator, GpConfig};
pub use methods::{GpMethod, GpModel};
pub use model::{Method, ModelFile};
