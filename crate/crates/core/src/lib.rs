//! Joint supervised and contrastive learning for slice-wise segmentation of
//! volumetric images, with the experiment protocols and evaluation tooling
//! around it.

pub mod batch;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pairing;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
