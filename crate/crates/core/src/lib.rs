pub mod augment;
pub mod config;
pub mod error;
pub mod evalx;
pub mod evolve;
pub mod grid;
pub mod gridio;
pub mod morpho;
pub mod rng;
pub mod segnet;
pub mod synthgen;
pub mod teach;
pub mod trajgen;

pub use error::{Result, SegError};
