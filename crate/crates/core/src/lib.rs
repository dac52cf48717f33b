pub mod beliefmap;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod kinematics;
pub mod metrics;
pub mod pipeline;
pub mod simulator;
pub mod solver;

pub use error::{Error, Result};
