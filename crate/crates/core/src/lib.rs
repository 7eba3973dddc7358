//! Semi-supervised semantic segmentation with labeled-unlabeled image
//! interpolation, similar-pair selection, mutual information transfer and
//! pseudo-mask decoupling.

mod error;

pub mod app;
pub mod data;
pub mod evalkit;
pub mod losses;
pub mod mixing;
pub mod network;
pub mod pairing;
pub mod params;
pub mod pmg;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
