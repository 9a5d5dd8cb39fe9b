//! Generative embedding-based entity alignment and synthesis over pairs of
//! multi-modal knowledge graphs.

pub mod archive;
pub mod autograd;
pub mod cli;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod kgdata;
pub mod losses;
pub mod mvae;
pub mod params;
pub mod theory;
pub mod training;

pub use error::{GeeaError, Result};
