pub mod cli;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod multitask;
pub mod synthdata;
pub mod xai;

pub use error::{Error, Result};
