//! Analytics over the weight and validation dumps of a CNN training run.
//!
//! [`ingest`] turns a run directory into a sealed [`store::RunStore`];
//! [`stats`], [`anomaly`], [`partition`], [`correlation`] and [`clustering`]
//! answer the questions asked of it. [`synthgen`] writes synthetic runs with
//! planted phenomena.

pub mod anomaly;
pub mod clustering;
pub mod correlation;
pub mod error;
pub mod ingest;
pub mod model;
pub mod partition;
pub mod stats;
pub mod store;
pub mod synthgen;

pub use error::{Error, Result};
