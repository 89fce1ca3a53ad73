pub mod autoenc;
pub mod carrier;
pub mod cli;
pub mod error;
pub mod eval;
pub mod image;
pub mod ndgrad;
pub mod payload;
pub mod restore;
pub mod vq;

pub use error::{Error, Result};
