//! Frame-based simulator of a multi-band, multi-orbit satellite access
//! network with rain sensing, stable cell-to-satellite matching and
//! proportional-fair beam hopping.

pub mod cells;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiments;
pub mod frame;
pub mod geo;
pub mod ids;
pub mod matching;
pub mod orbits;
pub mod output;
pub mod ra;
pub mod rain;
pub mod rng;
pub mod sensing;
pub mod sim;

pub use error::{Error, Result};
pub use ids::{CellId, SatId};
