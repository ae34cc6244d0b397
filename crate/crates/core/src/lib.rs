pub mod backbone;
pub mod benchgen;
pub mod checkpoint;
pub mod error;
pub mod evalsuite;
pub mod geoworld;
pub mod numkernel;
pub mod par;
pub mod projector;
pub mod ridge;
pub mod sequencer;
pub mod trainer;

pub use error::{DfrError, Result};
