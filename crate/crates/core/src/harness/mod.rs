//! Training orchestration, evaluation metrics, the linear probe and plots.

mod config;
pub mod demo;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod probe;
pub mod train;

pub use config::{apply_override, Ablation, EnvConfig, Mode, RunConfig};
pub use train::{build_agent, load_checkpoint, save_checkpoint, train, TrainSummary};
