pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod text;
pub mod train;

pub use error::{Error, Result};
