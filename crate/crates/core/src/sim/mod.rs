//! Synthetic task and experiment harness.

pub mod harness;
pub mod task;

pub use harness::{prepare_seed, run_arm, run_experiment_suite, Arm, ArmRun, ExperimentConfig};
pub use task::{build_world, generate_clients, Dataset, TaskSpec, World};
