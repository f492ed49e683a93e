pub mod agent;
pub mod bgpo;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod gwr;
pub mod lae;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pca;
pub mod pipeline;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
