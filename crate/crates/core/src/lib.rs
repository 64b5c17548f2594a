//! Nijenhuis energy functionals on almost complex structures over flat tori.

pub mod acstruct;
pub mod cli;
pub mod error;
pub mod eulerlagrange;
pub mod flow;
pub mod grid;
pub mod jets;
pub mod nijenhuis;
pub mod scalar;
pub mod variation;

pub use error::{NijError, Result};
