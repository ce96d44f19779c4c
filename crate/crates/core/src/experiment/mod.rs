//! End-to-end wiring: environment construction, policy training,
//! evaluation and ablation sweeps.

pub mod ablation;
pub mod config;
pub mod env;
pub mod eval;
pub mod train;

pub use ablation::{run_ablation, AblationPreset, AblationRow};
pub use config::{AblationConfig, DataSource, EnvConfig, ExperimentConfig, Optimizer, PolicyConfig, RewardConfig, RewardSource, TrainerConfig};
pub use env::{EnvContext, Environment};
pub use eval::{run_eval, EvalSummary};
pub use train::{run_train, RewardModel, TrainLogRow, TrainRun};
