//! Synthetic tasks, optimizers and the training loop.

mod optim;
mod run;
mod task;

pub use optim::{adamw_step, sgd_step, AdamParams, AdamState, Optimizer, OptimizerKind};
pub use run::{evaluate, train, train_run, LogEntry, RunResult, RunStatus, TrainConfig, TrainOutcome};
pub use task::{gen_task, Dataset, InputDist, Task, TaskKind, TaskSpec, Teacher};
