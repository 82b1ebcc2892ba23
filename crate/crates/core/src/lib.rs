pub mod augment;
pub mod complexity;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod stats;
pub mod store;
pub mod synth;
pub mod transfer;
pub mod zoo;

pub use error::{Error, Result};
