pub mod attacker;
pub mod config;
pub mod classifier;
pub mod env;
pub mod episode;
pub mod error;
pub mod harness;
pub mod nn;
pub mod policies;
pub mod rng;
pub mod store;
pub mod world_model;

pub use error::{Error, Result};

pub use config::Config;
pub use env::{EnvConfig, Personality, Trajectory};
pub use harness::{Composition, ExperimentReport, Setting};
