pub mod archive;
pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
mod init;
pub mod model;
pub mod params;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
