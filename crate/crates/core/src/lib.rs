//! Desk-scale laboratory for assignment-conditioned traffic surrogate modeling.
//!
//! The pipeline: generate a road network and a fixed trip demand, build per-trip
//! route choice sets, sample route assignments over the simplex of path-rank
//! proportions, simulate each assignment with a deterministic mesoscopic
//! spatial-queue model, and train a neural surrogate that maps an assignment
//! matrix to per-cell flows and system-wide travel time.

pub mod autodiff;
pub mod dataset;
pub mod demand;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod network;
pub mod sampler;
pub mod seed;
pub mod simulator;
pub mod table;
pub mod training;

pub use error::{Error, Result};
