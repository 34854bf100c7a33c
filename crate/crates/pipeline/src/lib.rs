pub mod ab;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod generator;
pub mod harness;
pub mod io;
pub mod knowledge;
pub mod llm;
pub mod par;
pub mod records;
pub mod report;
pub mod scoring;
pub mod synth;
pub mod transport;

pub use error::{Error, Result};
