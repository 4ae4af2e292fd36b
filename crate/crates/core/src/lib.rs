//! Variational pluralistic preference learning with swap-guided latent regularization.

pub mod boundlab;
pub mod cli;
pub mod config;
pub mod error;
pub mod flows;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rewarddec;
pub mod numcore;
pub mod rng;
pub mod synthpref;
pub mod trainer;
pub mod vencoder;

pub use error::{Error, Result};
