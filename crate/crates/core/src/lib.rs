//! Gated axial attention and the MedT two-branch segmentation network,
//! built on a small reverse-mode autodiff tensor library.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
