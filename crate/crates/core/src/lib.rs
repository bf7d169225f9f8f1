//! Convolutional hierarchical attention model (CHAM) for classifying
//! sequences of grid-shaped feature maps, with a hand-written training stack.

pub mod cell;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
