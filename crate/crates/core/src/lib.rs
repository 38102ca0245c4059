pub mod acopf;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod netmodel;
pub mod neural;
pub mod partition;
pub mod solver;
pub mod training;

pub use error::{Error, Result};
