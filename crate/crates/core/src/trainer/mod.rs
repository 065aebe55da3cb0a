//! Model assembly, loss, training loop, checkpoints and ablations.

mod ablation;
mod checkpoint;
mod config;
mod evaluate;
mod gradcheck;
mod model;
mod train;

pub use ablation::{run_ablation, run_ablation_observed, Ablation, AblationCase, AblationRun, DEFAULT_MATRIX};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, SIFM_MAGIC, SIFM_VERSION,
};
pub use config::{GranularityMode, ModelConfig, TrainConfig};
pub use evaluate::{evaluate_model, evaluate_oracle, evaluate_persistence, evaluate_with, Evaluation, ResidualMap};
pub use gradcheck::{micro_gradcheck, MicroCheck, MICRO_JITTER};
pub use model::{forward_sifm, init_model, loss_multi, model_param_specs, persistence_forecast, predict};
pub use train::{mean_loss, train, train_observed, train_on_split, EpochLog, TrainOutcome};

#[cfg(test)]
mod tests;
