pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod matchfile;
pub mod nn;
pub mod proposals;
pub mod refine;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
