//! Learned Lagrangian fluid simulation for tank sloshing.
//!
//! The crate covers the full pipeline at desk scale: a DFSPH ground-truth
//! solver, continuous and momentum-conserving convolutions over particle
//! sets, a triangle-feature-fusion network, a position-based stepper with
//! rollout training, point-set evaluation metrics, and file/CLI plumbing.

pub mod autodiff;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod io;
pub mod math;
pub mod metrics;
pub mod neighbor;
pub mod network;
pub mod sph;
pub mod stepper;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
