pub mod agents;
pub mod archspec;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalreport;
pub mod manifold;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod pruneloop;
pub mod util;

pub use error::{Error, Result};
