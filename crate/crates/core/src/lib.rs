//! Grid value iteration with state-dependent stopping criteria, together
//! with the a-posteriori certificates they enable.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`.

pub mod certificates;
pub mod check;
pub mod cli;
pub mod comparison;
pub mod config;
pub mod engine;
pub mod grid;
pub mod problem;
pub mod reproduce;
pub mod scalar;
pub mod simulate;

pub use comparison::{ComparisonError, MonotoneFn};
pub use engine::{
    run_fixed_horizon, run_until_stop, CriterionKind, EngineError, RunOptions, RunStatus,
    StoppingCriterion, ViRun,
};
pub use grid::{GridError, InterpMode, RectGrid, ValueTable};
pub use problem::{ControlProblem, CubicIntegrator, ProblemError, Sa1Bounds, Sector};
pub use scalar::Scalar;

pub type MonotoneFn64 = MonotoneFn<f64>;
pub type RectGrid64 = RectGrid<f64>;
pub type ValueTable64 = ValueTable<f64>;
pub type StoppingCriterion64 = StoppingCriterion<f64>;
pub type ViRun64 = ViRun<f64>;
pub type CubicIntegrator64 = CubicIntegrator<f64>;
pub type Sa1Bounds64 = Sa1Bounds<f64>;
