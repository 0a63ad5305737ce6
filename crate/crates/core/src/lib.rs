//! Two-tier semantic image synthesis.
//!
//! A base generator renders a whole scene from a semantic map and an
//! instance edge map. Class-specific generators then re-render individual
//! objects from their surrounding context, and the results are alpha
//! composited onto the base image largest-first.

pub mod datamodel;
pub mod gradcheck;
pub mod error;
pub mod io;
pub mod losses;
pub mod checkpoint;
pub mod cli;
pub mod composition;
pub mod config;
pub mod context_study;
pub mod model;
pub mod optim;
pub mod raster;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
