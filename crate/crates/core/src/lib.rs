//! Fixed-length video representations from located local descriptors.
//!
//! Descriptors are encoded as Fisher vectors against a diagonal Gaussian
//! mixture. Space-time location enters either through pooling grids
//! (spatio-temporal pyramids) or by appending the normalized location to each
//! descriptor before encoding (space-time extended descriptors).

pub mod bench;
mod binfmt;
pub mod classifier;
pub mod data;
pub mod digest;
pub mod encoder;
pub mod error;
pub mod gmm;
pub mod pipeline;
pub mod pooling;
pub mod preprocess;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
