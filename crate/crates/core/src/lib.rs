pub mod case;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod perfusion;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
