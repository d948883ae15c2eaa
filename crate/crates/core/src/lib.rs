pub mod adapter;
pub mod autodiff;
pub mod bracket;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scene;
pub mod stats;
pub mod tta;

pub use error::{Error, Result};
