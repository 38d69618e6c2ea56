pub mod bsd;
pub mod concepts;
pub mod error;
pub mod guidance;
pub mod image;
pub mod localize;
pub mod mesh;
pub mod optim;
pub mod render;

pub use error::{Error, Result};
