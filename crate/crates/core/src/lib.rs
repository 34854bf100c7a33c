//! Allocation-only building blocks for commonsense-causality empathetic
//! response generation.
//!
//! Everything here is pure: no file system, no network, no clock. The
//! `empathic` crate layers IO, backends, caching and the CLI on top.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod prompting;
pub mod selection;
pub mod text;

pub use error::{Error, Result};
