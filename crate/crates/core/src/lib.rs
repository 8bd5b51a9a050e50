//! Policy evaluation for continuous-time diffusions through the martingale
//! characterization of the value function: martingale-loss SGD, residual-gradient
//! baselines, CTD/CLSTD/CGTD methods built on martingale orthogonality conditions,
//! closed-form oracles and a reproducible experiment harness.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the experiment layer uses.

pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod linalg;
pub mod models;
pub mod moments;
pub mod objectives;
pub mod oracles;
pub mod scalar;
pub mod solvers;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TimeGrid = env::TimeGrid<f64>;
pub type DiffusionModel = env::DiffusionModel<f64>;
pub type Trajectory = env::Trajectory<f64>;
pub type EpisodeBatch = env::EpisodeBatch<f64>;
pub type ValueModel = models::ValueModel<f64>;
pub type Family = models::Family<f64>;
pub type TestFunction = moments::TestFunction<f64>;
pub type Algorithm = solvers::Algorithm<f64>;
pub type LearningSchedule = solvers::LearningSchedule<f64>;
pub type SolverRun = solvers::SolverRun<f64>;
