//! Simulation and certification of networked DC microgrids under
//! distributed price-based control.

pub mod certify;
pub mod consensus;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pricing;
pub mod sim;

pub use error::{Error, Result};
