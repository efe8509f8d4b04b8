//! Clipped-surrogate policy optimization over a collected rollout batch:
//! minibatched epochs, Adam steps, and the post-step spectral projection
//! that keeps the actor inside its Lipschitz budget.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{AdamParams, Real};
use super::policy::{windows_to_array, Actor, Critic, CRITIC_WINDOW};
use super::LearnerError;

/// PPO hyper-parameters and schedule anchor points.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub discount: f64,
    pub lambda: f64,
    /// Optimization epochs per collected rollout.
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    /// Weight of the value-regression loss.
    pub vf_coef: f64,
    /// Control steps collected per environment per update.
    pub horizon: usize,
    /// Parallel environments (desk scale 256; scales to 8192).
    pub num_envs: usize,
    /// Learning-rate schedule: initial plateau value, final value, end of
    /// the plateau, and where the linear decay settles.
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_hold_until: f64,
    pub lr_settle_at: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            discount: 0.99,
            lambda: 0.95,
            epochs: 4,
            minibatch: 2048,
            entropy_coef: 0.003,
            vf_coef: 0.5,
            horizon: 64,
            num_envs: 256,
            lr_initial: 3e-4,
            lr_final: 9e-5,
            lr_hold_until: 0.1,
            lr_settle_at: 0.7,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(LearnerError::InvalidConfig(format!(
                "clip ratio must be in (0, 1), got {}",
                self.clip
            )));
        }
        for (name, v) in [("discount", self.discount), ("lambda", self.lambda)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(LearnerError::InvalidConfig(format!(
                    "{name} must be in (0, 1], got {v}"
                )));
            }
        }
        if self.epochs == 0 || self.minibatch == 0 || self.horizon == 0 || self.num_envs == 0 {
            return Err(LearnerError::InvalidConfig(
                "epochs, minibatch, horizon, and num_envs must be positive".into(),
            ));
        }
        if !(self.lr_hold_until < self.lr_settle_at && self.lr_settle_at <= 1.0) {
            return Err(LearnerError::InvalidConfig(format!(
                "lr schedule points must satisfy 0 <= hold < settle <= 1, got {} and {}",
                self.lr_hold_until, self.lr_settle_at
            )));
        }
        Ok(())
    }

    /// Learning rate at a training-progress fraction in [0, 1]: flat at
    /// the initial value through the hold point, linear decay to the
    /// final value at the settle point, flat thereafter.
    pub fn lr_schedule(&self, fraction: f64) -> f64 {
        let f = fraction.clamp(0.0, 1.0);
        if f < self.lr_hold_until {
            self.lr_initial
        } else if f >= self.lr_settle_at {
            self.lr_final
        } else {
            let span = self.lr_settle_at - self.lr_hold_until;
            let s = (f - self.lr_hold_until) / span;
            self.lr_initial + s * (self.lr_final - self.lr_initial)
        }
    }
}

/// Learning rate under the default schedule anchors.
pub fn lr_schedule(fraction: f64) -> f64 {
    PpoConfig::default().lr_schedule(fraction)
}

/// Flattened rollout data, one row per transition.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    /// Policy-view observations, B x obs_dim.
    pub obs: Vec<f64>,
    /// Privileged critic windows, B x CRITIC_WINDOW x obs_dim.
    pub windows: Vec<f64>,
    /// Sampled actions, B x act_dim.
    pub actions: Vec<f64>,
    /// Log-probabilities at collection time, B.
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Value-regression targets, B.
    pub returns: Vec<f64>,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.logp_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_old.is_empty()
    }

    fn check(&self) -> Result<(), LearnerError> {
        let b = self.len();
        let ok = self.obs.len() == b * self.obs_dim
            && self.windows.len() == b * CRITIC_WINDOW * self.obs_dim
            && self.actions.len() == b * self.act_dim
            && self.advantages.len() == b
            && self.returns.len() == b;
        if ok && b > 0 {
            Ok(())
        } else {
            Err(LearnerError::ShapeMismatch {
                what: "rollout batch",
                detail: format!(
                    "B={b}, obs {}, windows {}, actions {}, adv {}, ret {}",
                    self.obs.len(),
                    self.windows.len(),
                    self.actions.len(),
                    self.advantages.len(),
                    self.returns.len()
                ),
            })
        }
    }
}

/// Diagnostics of one `ppo_update` call, averaged over minibatches.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of logp_old - logp_new (a cheap KL estimate).
    pub approx_kl: f64,
    /// Fraction of samples with |ratio - 1| beyond the clip band.
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// One minibatch already gathered into dense arrays.
pub struct Minibatch<T: Real> {
    pub obs: Array2<T>,
    pub windows: Array3<T>,
    pub actions: Array2<T>,
    pub logp_old: Array1<T>,
    pub advantages: Array1<T>,
    pub returns: Array1<T>,
}

impl<T: Real> Minibatch<T> {
    pub fn gather(batch: &RolloutBatch, idxs: &[usize]) -> Self {
        let d = batch.obs_dim;
        let a = batch.act_dim;
        let obs = Array2::from_shape_fn((idxs.len(), d), |(r, c)| T::c(batch.obs[idxs[r] * d + c]));
        let mut wflat = Vec::with_capacity(idxs.len() * CRITIC_WINDOW * d);
        for &i in idxs {
            let start = i * CRITIC_WINDOW * d;
            wflat.extend_from_slice(&batch.windows[start..start + CRITIC_WINDOW * d]);
        }
        let windows = windows_to_array(&wflat, d);
        let actions =
            Array2::from_shape_fn((idxs.len(), a), |(r, c)| T::c(batch.actions[idxs[r] * a + c]));
        let logp_old = Array1::from_shape_fn(idxs.len(), |r| T::c(batch.logp_old[idxs[r]]));
        let advantages = Array1::from_shape_fn(idxs.len(), |r| T::c(batch.advantages[idxs[r]]));
        let returns = Array1::from_shape_fn(idxs.len(), |r| T::c(batch.returns[idxs[r]]));
        Self {
            obs,
            windows,
            actions,
            logp_old,
            advantages,
            returns,
        }
    }
}

/// Loss terms of one minibatch (means over its samples).
#[derive(Debug, Clone, Copy)]
pub struct MinibatchStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Forward + backward of the full PPO objective on one minibatch.
/// Gradients are left accumulated in the networks (zeroed on entry) so
/// tests can inspect them; `ppo_update` applies the optimizer right
/// after. Returns an error and leaves parameters untouched if any loss
/// term is non-finite.
pub fn minibatch_backward<T: Real>(
    actor: &mut Actor<T>,
    critic: &mut Critic<T>,
    mb: &Minibatch<T>,
    cfg: &PpoConfig,
) -> Result<MinibatchStats, LearnerError> {
    let b = mb.logp_old.len();
    let bf = T::c(b as f64);
    actor.zero_grad();
    critic.zero_grad();

    // actor path
    let cache = actor.forward(&mb.obs);
    let logp_new = actor.log_prob(&cache.mean, &mb.actions);
    let clip = T::c(cfg.clip);
    let mut policy_loss = T::zero();
    let mut kl = T::zero();
    let mut clipped = 0usize;
    let mut g_logp = Array1::zeros(b);
    for r in 0..b {
        let ratio = (logp_new[r] - mb.logp_old[r]).exp();
        let adv = mb.advantages[r];
        let surr1 = ratio * adv;
        let surr2 = ratio.max(T::one() - clip).min(T::one() + clip) * adv;
        policy_loss = policy_loss - surr1.min(surr2) / bf;
        kl = kl + (mb.logp_old[r] - logp_new[r]) / bf;
        if (ratio - T::one()).abs() > clip {
            clipped += 1;
        }
        // subgradient of -min: only the unclipped branch carries signal
        if surr1 <= surr2 {
            g_logp[r] = -adv * ratio / bf;
        }
    }
    let entropy = actor.entropy();
    let loss_actor = policy_loss - T::c(cfg.entropy_coef) * entropy;

    // critic path
    let vcache = critic.forward(&mb.windows);
    let mut value_loss = T::zero();
    for r in 0..b {
        let d = vcache.values[r] - mb.returns[r];
        value_loss = value_loss + T::c(0.5) * d * d / bf;
    }
    let loss_total = loss_actor + T::c(cfg.vf_coef) * value_loss;
    if !loss_total.f64().is_finite() {
        return Err(LearnerError::NonFiniteLoss {
            policy: policy_loss.f64(),
            value: value_loss.f64(),
            entropy: entropy.f64(),
        });
    }

    let g_mean = actor.log_prob_backward(&cache.mean.clone(), &mb.actions, &g_logp);
    actor.backward(&cache, &g_mean);
    // entropy enters as -coef * H; dH/dlog_std = 1 per dimension
    for c in 0..actor.g_log_std.len() {
        actor.g_log_std[c] = actor.g_log_std[c] - T::c(cfg.entropy_coef);
    }
    let g_v = Array1::from_shape_fn(b, |r| {
        T::c(cfg.vf_coef) * (vcache.values[r] - mb.returns[r]) / bf
    });
    critic.backward(&vcache, &g_v);

    Ok(MinibatchStats {
        policy_loss: policy_loss.f64(),
        value_loss: value_loss.f64(),
        entropy: entropy.f64(),
        approx_kl: kl.f64(),
        clip_fraction: clipped as f64 / b as f64,
    })
}

/// Run the full PPO update: advantage normalization, `epochs` shuffled
/// minibatch passes, Adam steps, and the spectral projection after every
/// step. `opt_step` is the global Adam step counter (bias correction).
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<T: Real>(
    batch: &RolloutBatch,
    actor: &mut Actor<T>,
    critic: &mut Critic<T>,
    cfg: &PpoConfig,
    lr: f64,
    adam: &AdamParams,
    opt_step: &mut i32,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, LearnerError> {
    cfg.validate()?;
    batch.check()?;
    let b = batch.len();

    // batch-level advantage normalization
    let mean = batch.advantages.iter().sum::<f64>() / b as f64;
    let var = batch
        .advantages
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / b as f64;
    let std = var.sqrt().max(1e-8);
    let mut normalized = batch.clone();
    for a in &mut normalized.advantages {
        *a = (*a - mean) / std;
    }

    let mut idxs: Vec<usize> = (0..b).collect();
    let mut stats = UpdateStats::default();
    let mb_size = cfg.minibatch.min(b);
    for _epoch in 0..cfg.epochs {
        idxs.shuffle(rng);
        for chunk in idxs.chunks(mb_size) {
            if chunk.len() < mb_size / 2 {
                continue; // skip a tiny ragged tail
            }
            let mb = Minibatch::gather(&normalized, chunk);
            let s = minibatch_backward(actor, critic, &mb, cfg).map_err(|e| match e {
                LearnerError::NonFiniteLoss { policy, value, entropy } => {
                    LearnerError::AbortedUpdate {
                        minibatch: stats.minibatches,
                        policy,
                        value,
                        entropy,
                    }
                }
                other => other,
            })?;
            *opt_step += 1;
            actor.adam_step(lr, adam, *opt_step);
            critic.adam_step(lr, adam, *opt_step);
            stats.policy_loss += s.policy_loss;
            stats.value_loss += s.value_loss;
            stats.entropy += s.entropy;
            stats.approx_kl += s.approx_kl;
            stats.clip_fraction += s.clip_fraction;
            stats.minibatches += 1;
        }
    }
    let n = stats.minibatches.max(1) as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.approx_kl /= n;
    stats.clip_fraction /= n;
    Ok(stats)
}
