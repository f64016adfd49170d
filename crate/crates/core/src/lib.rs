//! Capsule networks with parameter-shared transforms for the Top-2
//! two-label benchmark: train on single-label images, predict both labels of
//! width-concatenated pairs, and render probability-guided activation maps.

pub mod archnet;
pub mod backend;
pub mod capsule;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod objective;
pub mod probam;
pub mod render;
pub mod train;

pub use error::{Error, Result};
