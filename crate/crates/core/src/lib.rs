pub mod error;
pub mod numkit;

pub use error::{Error, Result};
pub mod encoder;
pub mod nn;
pub mod router;
pub mod fusion;
pub mod model;
pub mod objective;
pub mod config;
pub mod bench;
pub mod trainer;
