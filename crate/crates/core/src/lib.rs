//! Neural stochastic optimal control with preconditioned Langevin optimizers.
//!
//! Controls are neural networks evaluated along Euler-Maruyama rollouts of a
//! controlled SDE; the expected cost is differentiated by reverse mode
//! through the whole trajectory and minimized with Adam, RMSprop or Adadelta,
//! optionally with Langevin noise on all or part of the layers.

pub mod config;
pub mod env;
pub mod harness;
pub mod nets;
pub mod optim;
pub mod sim;
pub mod streams;
pub mod tape;

pub use env::{EnvKind, EnvSpec};
pub use harness::{ExperimentConfig, HarnessError, RunRecord};
pub use optim::{OptimizerKind, Schedule};
