pub mod config;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod kg_store;
pub mod knn;
mod numfmt;
pub mod predictor;
pub mod reasoner;
pub mod train;
pub mod unifier;

pub use error::{Error, Result};
