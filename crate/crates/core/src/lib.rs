pub mod config;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod history;
pub mod io;
pub mod keyframe;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
