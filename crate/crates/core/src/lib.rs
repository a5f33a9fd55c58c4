//! Continual semantic segmentation with pseudo-label fusion, new-class-erased
//! image duplets, a context consistency loss and adaptive class-balance weights.

pub mod bench;
pub mod data;
pub mod duplet;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pseudo;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Tensor3, BACKGROUND_LABEL, IGNORE_LABEL};
