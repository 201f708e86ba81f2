pub mod datagen;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod interaction;
pub mod numerics;
pub mod objective;
pub mod params;
pub mod quantizer;
pub mod region;

pub use error::{Error, Result};
