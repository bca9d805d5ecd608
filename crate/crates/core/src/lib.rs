//! Planning-oriented integrated sensing and communication for a roadside
//! unit serving an autonomous vehicle: sensing-error modelling, beam power
//! allocation and uncertainty-aware trajectory planning.

pub mod error;
pub mod geometry;
pub mod isac;
pub mod planner;
pub mod power;
pub mod runner;
pub mod uncertainty;
pub mod validate;

pub use error::{PisacError, Result};
