//! Nightlight transfer learning, a ridge wealth head, and explainability
//! tooling for low-resolution satellite tiles.

pub mod attribution;
pub mod error;
pub mod model;
pub mod featviz;
pub mod head;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub(crate) mod plot;
pub mod raster;
pub mod seeds;
pub mod synthgen;

pub use error::{Error, Result};
