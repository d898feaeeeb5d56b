pub mod cohort;
pub mod config;
pub mod error;
pub mod experiments;
pub mod featurizer;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
