pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datapipe;
pub mod discriminator;
mod error;
pub mod evaluation;
pub mod objectives;
pub mod scribblegen;
pub mod segmentor;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
