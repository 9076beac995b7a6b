//! Tomographic reconstruction with discretized Gaussian primitives.

pub mod bench;
pub mod densify;
pub mod error;
pub mod fvr;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod projector;

pub use error::{Error, Result};
pub use grid::*;
