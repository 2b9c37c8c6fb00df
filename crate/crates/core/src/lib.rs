//! Finite-state market laboratory for utility-based pricing.
//!
//! The crate models finite filtered probability spaces as event trees,
//! solves the primal investment problem and its convex dual over the
//! martingale polytope, prices bounded claims by indifference, detects
//! claims whose price survives changes of preferences and beliefs, values
//! weak information given by the law of a statistic, and stress-tests the
//! stability of all of the above under measure perturbations.

pub mod duality;
pub mod error;
mod linalg;
pub mod market;
pub mod models;
pub mod preferences;
pub mod pricing;
pub mod prob_space;
pub mod stability;
pub mod weak_info;

pub use error::{Error, Result};
