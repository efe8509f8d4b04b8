//! Planar variable-pitch-propeller (VPP) MAV stack: batched rigid-body
//! simulation, VPP actuator physics and system identification, the cascade
//! control layers below an RL policy, a batched training environment with
//! domain randomization and curricula, and a PPO learner with a
//! spectral-normalized actor.
//!
//! The crate is organized along the data path:
//!
//! - [`dynamics`]: planar rigid-body integration with actuator lag and drag
//! - [`actuator`]: thrust/drag/motor models, adaptive RPM control, fitting
//! - [`control`]: action mapping, rate PD, control allocation, Kalman fusion
//! - [`env`]: observation/reward/task logic, randomization, batched stepping
//! - [`learner`]: PPO with an LSTM critic and Lipschitz-constrained actor
//! - [`cli`]: the `vpp` command surface (train / eval / fit / bench / export)
//!
//! Everything is deterministic under a fixed seed: per-environment RNG
//! streams, fixed gradient-chunk boundaries and ordered reductions make
//! results independent of the worker count.

pub mod actuator;
pub mod cli;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod env;
pub mod learner;

pub use dynamics::{wrap_angle, BodyParams, RigidState, WrenchCommand};
