//! Robust one-shot aggregation of local M-estimators.
//!
//! Each server fits a model on its own shard and sends its estimate and
//! sandwich variance matrix to a central processor. The processor combines
//! the variance matrices with a spatial median, solves Huber-type estimating
//! equations for the parameter, and screens every server with Mahalanobis
//! distances against the robust aggregate.
//!
//! ```
//! use robagg::aggregate::tau_c;
//! assert!((tau_c(1.345) - 0.950).abs() < 1e-3);
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod detect;
pub mod distsim;
pub mod error;
pub mod models;
pub mod numkit;
pub mod spatialmed;

pub use aggregate::{huber_aggregate, tau_c, weighted_average, AggregationResult, HuberConfig, LocalEstimate};
pub use detect::{detect, DetectionReport, ServerRecord};
pub use error::{Error, Result};
pub use models::{fit_local, LocalFit, ModelKind, ModelSpec, Observation};
pub use numkit::SymMatrix;
pub use spatialmed::{aggregate_sigma, spatial_median};
