pub mod benchmark;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod lattice;
pub mod losses;
pub mod pseudo_labels;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
