pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod oim;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vlad;

pub use error::{Error, Result};
