//! Policy optimization for the batched vehicle environment: reverse-mode
//! network layers, spectral constraints, advantage estimation, the
//! clipped-surrogate update, checkpointing, and the training loop that
//! ties them to the curriculum and learning-rate schedules.

pub mod checkpoint;
pub mod gae;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod spectral;
pub mod train;

pub use checkpoint::{config_hash_of, Checkpoint};
pub use gae::gae_advantages;
pub use nn::{AdamParams, Linear, LstmCell, Real};
pub use policy::{Actor, Critic, WindowBuffer, CRITIC_WINDOW};
pub use ppo::{lr_schedule, ppo_update, PpoConfig, RolloutBatch, UpdateStats};
pub use spectral::{spectral_norm, spectral_normalize, SpectralState};
pub use train::{evaluate_policy, train, EvalReport, IterationLog, TrainConfig, TrainResult};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {what}: {detail}")]
    ShapeMismatch {
        what: &'static str,
        detail: String,
    },

    #[error(
        "non-finite loss (policy {policy}, value {value}, entropy {entropy})"
    )]
    NonFiniteLoss {
        policy: f64,
        value: f64,
        entropy: f64,
    },

    #[error(
        "update aborted at minibatch {minibatch}: non-finite loss (policy {policy}, value {value}, entropy {entropy})"
    )]
    AbortedUpdate {
        minibatch: usize,
        policy: f64,
        value: f64,
        entropy: f64,
    },

    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),

    #[error("environment failure: {0}")]
    EnvFailure(String),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}
