//! Complementary-aware sequential recommendation with semantic transition priors.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod opq;
pub mod pipeline;
pub mod model;
pub mod relminer;
pub mod train;

pub use error::{Error, Result};
