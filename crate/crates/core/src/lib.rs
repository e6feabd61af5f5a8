//! Covariate balancing weights for clustered observational studies.

pub mod balancer;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod hyperparams;
pub mod ingest;
pub mod qp;
pub mod simulator;
pub mod transform;

pub use data::{ClusterRecord, Counts, CosDataset, UnitRecord};
pub use error::{Error, Result};
