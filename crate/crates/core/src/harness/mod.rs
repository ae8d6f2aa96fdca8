//! Training, checkpointing, evaluation and the verification suite.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use eval::{evaluate, EvalConditioning, EvalOptions, EvalReport};
pub use model::{Corpus, Model};
pub use optim::{adamw_step, OptimizerState};
pub use train::{training_manifest, IterLog, Trainer};

use crate::error::Result;
use crate::synthdata::Manifest;

/// Runs the whole two-stage schedule and returns the final checkpoint.
pub fn train(config: RunConfig, manifest: Manifest, on_iter: impl FnMut(&Trainer, &IterLog) -> Result<()>) -> Result<Checkpoint> {
    let mut trainer = Trainer::with_manifest(config, manifest)?;
    trainer.run(on_iter)?;
    Ok(trainer.checkpoint())
}
