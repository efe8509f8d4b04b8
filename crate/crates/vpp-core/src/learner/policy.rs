//! The asymmetric actor-critic: a small spectrally-constrained MLP policy
//! and a recurrent privileged critic.
//!
//! The actor maps one observation to a squashed action mean with a
//! state-independent log-std; sampling adds Gaussian noise and clamps to
//! the normalized action box. The critic summarizes the last five
//! privileged observations with an LSTM cell (zero initial state each
//! evaluation, so it is stateless across calls) and regresses the value
//! through a two-layer MLP.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::nn::{relu, relu_backward, tanh, tanh_backward, AdamParams, Linear, LstmCell, Real};
use super::spectral::{spectral_normalize, SpectralState};
use crate::env::ObsLayout;

/// Observation steps the critic consumes per value estimate.
pub const CRITIC_WINDOW: usize = 5;

const LOG_STD_MIN: f64 = -4.0;
const LOG_STD_MAX: f64 = 1.0;

/// Policy network with per-layer spectral caps.
#[derive(Debug, Clone)]
pub struct Actor<T: Real> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
    pub head: Linear<T>,
    /// State-independent log standard deviation per action dimension.
    pub log_std: Array1<T>,
    pub g_log_std: Array1<T>,
    adam_log_std_m: Array1<T>,
    adam_log_std_v: Array1<T>,
    /// Composed Lipschitz bound L; each layer is capped at L^(1/3).
    pub lipschitz: f64,
    pub spectral: [SpectralState<T>; 3],
}

/// Forward intermediates needed for the backward pass.
pub struct ActorCache<T: Real> {
    obs: Array2<T>,
    h1: Array2<T>,
    h2: Array2<T>,
    /// Squashed mean (the tanh output itself).
    pub mean: Array2<T>,
}

impl<T: Real> Actor<T> {
    pub fn new(
        obs_dim: usize,
        hidden1: usize,
        hidden2: usize,
        act_dim: usize,
        lipschitz: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let l1 = Linear::new(obs_dim, hidden1, 2f64.sqrt(), rng);
        let l2 = Linear::new(hidden1, hidden2, 1.0, rng);
        let head = Linear::new(hidden2, act_dim, 0.1, rng);
        let log_std = Array1::from_elem(act_dim, T::c((0.6f64).ln()));
        Self {
            spectral: [
                SpectralState::new(l1.in_dim()),
                SpectralState::new(l2.in_dim()),
                SpectralState::new(head.in_dim()),
            ],
            g_log_std: Array1::zeros(act_dim),
            adam_log_std_m: Array1::zeros(act_dim),
            adam_log_std_v: Array1::zeros(act_dim),
            log_std,
            l1,
            l2,
            head,
            lipschitz,
        }
    }

    /// The observation-conditioned policy used throughout: 96- and
    /// 64-unit hidden layers, two action channels.
    pub fn standard(layout: ObsLayout, lipschitz: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(layout.dim(), 96, 64, 2, lipschitz, &mut rng)
    }

    pub fn obs_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.head.out_dim()
    }

    /// obs: [B, D] -> squashed action means [B, A] plus cache.
    pub fn forward(&self, obs: &Array2<T>) -> ActorCache<T> {
        let h1 = relu(&self.l1.forward(obs));
        let h2 = tanh(&self.l2.forward(&h1));
        let mean = tanh(&self.head.forward(&h2));
        ActorCache {
            obs: obs.clone(),
            h1,
            h2,
            mean,
        }
    }

    /// Convenience single-observation mean (deterministic action).
    pub fn act_mean(&self, obs: &[f64]) -> [f64; 2] {
        let arr = Array2::from_shape_fn((1, obs.len()), |(_, j)| T::c(obs[j]));
        let mean = self.forward(&arr).mean;
        [mean[[0, 0]].f64(), mean[[0, 1]].f64()]
    }

    /// Accumulate gradients for dL/dmean (and directly for log-std).
    pub fn backward(&mut self, cache: &ActorCache<T>, g_mean: &Array2<T>) {
        let g_head_pre = tanh_backward(&cache.mean, g_mean);
        let g_h2 = self.head.backward(&cache.h2, &g_head_pre);
        let g_l2_pre = tanh_backward(&cache.h2, &g_h2);
        let g_h1 = self.l2.backward(&cache.h1, &g_l2_pre);
        let g_l1_pre = relu_backward(&cache.h1, &g_h1);
        self.l1.backward(&cache.obs, &g_l1_pre);
    }

    /// Draw actions a = clamp(mean + sigma * eps, -1, 1). Returns the
    /// actions and their log-probabilities under the diagonal Gaussian.
    pub fn sample(
        &self,
        mean: &Array2<T>,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<T>, Array1<T>) {
        let mut actions = Array2::zeros(mean.raw_dim());
        for ((r, c), a) in actions.indexed_iter_mut() {
            let eps: f64 = StandardNormal.sample(rng);
            let sigma = self.log_std[c].exp();
            let raw = mean[[r, c]] + sigma * T::c(eps);
            *a = raw.max(-T::one()).min(T::one());
        }
        let logp = self.log_prob(mean, &actions);
        (actions, logp)
    }

    /// Log-density of `actions` under N(mean, diag(exp(log_std))^2).
    pub fn log_prob(&self, mean: &Array2<T>, actions: &Array2<T>) -> Array1<T> {
        let half_ln_2pi = T::c(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut out = Array1::zeros(mean.nrows());
        for r in 0..mean.nrows() {
            let mut acc = T::zero();
            for c in 0..mean.ncols() {
                let ls = self.log_std[c];
                let z = (actions[[r, c]] - mean[[r, c]]) / ls.exp();
                acc = acc - T::c(0.5) * z * z - ls - half_ln_2pi;
            }
            out[r] = acc;
        }
        out
    }

    /// Gradients of log-prob w.r.t. the mean (returned, [B, A]) and the
    /// log-std (accumulated), given upstream dL/dlogp per sample.
    pub fn log_prob_backward(
        &mut self,
        mean: &Array2<T>,
        actions: &Array2<T>,
        g_logp: &Array1<T>,
    ) -> Array2<T> {
        let mut g_mean = Array2::zeros(mean.raw_dim());
        for r in 0..mean.nrows() {
            for c in 0..mean.ncols() {
                let sigma = self.log_std[c].exp();
                let z = (actions[[r, c]] - mean[[r, c]]) / sigma;
                g_mean[[r, c]] = g_logp[r] * z / sigma;
                self.g_log_std[c] = self.g_log_std[c] + g_logp[r] * (z * z - T::one());
            }
        }
        g_mean
    }

    /// Entropy of the diagonal Gaussian (state-independent).
    pub fn entropy(&self) -> T {
        let per_dim = T::c(0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()));
        self.log_std
            .iter()
            .fold(T::zero(), |acc, &ls| acc + ls + per_dim)
    }

    pub fn zero_grad(&mut self) {
        self.l1.zero_grad();
        self.l2.zero_grad();
        self.head.zero_grad();
        self.g_log_std.fill(T::zero());
    }

    pub fn adam_step(&mut self, lr: f64, opt: &AdamParams, t: i32) {
        self.l1.adam_step(lr, opt, t);
        self.l2.adam_step(lr, opt, t);
        self.head.adam_step(lr, opt, t);
        // inline Adam for the log-std vector
        let b1 = T::c(opt.beta1);
        let b2 = T::c(opt.beta2);
        let eps = T::c(opt.eps);
        let bc1 = T::one() - T::c(opt.beta1.powi(t));
        let bc2 = T::one() - T::c(opt.beta2.powi(t));
        let lr = T::c(lr);
        for c in 0..self.log_std.len() {
            let g = self.g_log_std[c];
            let m = &mut self.adam_log_std_m[c];
            let v = &mut self.adam_log_std_v[c];
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            let updated = self.log_std[c] - step;
            self.log_std[c] = updated
                .max(T::c(LOG_STD_MIN))
                .min(T::c(LOG_STD_MAX));
        }
        self.project_lipschitz();
    }

    /// Enforce the composed Lipschitz bound: cap each weight matrix's
    /// spectral norm at L^(1/3). Called after every optimizer step.
    pub fn project_lipschitz(&mut self) {
        let cap = T::c(self.lipschitz.powf(1.0 / 3.0));
        spectral_normalize(&mut self.l1.w, &mut self.spectral[0], cap, 2);
        spectral_normalize(&mut self.l2.w, &mut self.spectral[1], cap, 2);
        spectral_normalize(&mut self.head.w, &mut self.spectral[2], cap, 2);
    }
}

/// Privileged recurrent critic.
#[derive(Debug, Clone)]
pub struct Critic<T: Real> {
    pub lstm: LstmCell<T>,
    pub f1: Linear<T>,
    pub f2: Linear<T>,
    pub out: Linear<T>,
}

pub struct CriticCache<T: Real> {
    lstm_cache: super::nn::LstmCache<T>,
    h: Array2<T>,
    a1: Array2<T>,
    a2: Array2<T>,
    /// Value estimates, [B].
    pub values: Array1<T>,
}

impl<T: Real> Critic<T> {
    pub fn new(obs_dim: usize, lstm_hidden: usize, mlp_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lstm: LstmCell::new(obs_dim, lstm_hidden, rng),
            f1: Linear::new(lstm_hidden, mlp_hidden, 2f64.sqrt(), rng),
            f2: Linear::new(mlp_hidden, mlp_hidden, 2f64.sqrt(), rng),
            out: Linear::new(mlp_hidden, 1, 1.0, rng),
        }
    }

    /// The value network used throughout: 32 LSTM units into two 512-unit
    /// layers.
    pub fn standard(layout: ObsLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(layout.dim(), 32, 512, &mut rng)
    }

    /// windows: [B, CRITIC_WINDOW, D] -> values [B].
    pub fn forward(&self, windows: &Array3<T>) -> CriticCache<T> {
        debug_assert_eq!(windows.dim().1, CRITIC_WINDOW);
        let (h, lstm_cache) = self.lstm.forward_window(windows);
        let a1 = relu(&self.f1.forward(&h));
        let a2 = relu(&self.f2.forward(&a1));
        let values = self.out.forward(&a2).index_axis(Axis(1), 0).to_owned();
        CriticCache {
            lstm_cache,
            h,
            a1,
            a2,
            values,
        }
    }

    /// Accumulate gradients for upstream dL/dvalue.
    pub fn backward(&mut self, cache: &CriticCache<T>, g_values: &Array1<T>) {
        let g_out = Array2::from_shape_fn((g_values.len(), 1), |(r, _)| g_values[r]);
        let g_a2 = self.out.backward(&cache.a2, &g_out);
        let g_f2_pre = relu_backward(&cache.a2, &g_a2);
        let g_a1 = self.f2.backward(&cache.a1, &g_f2_pre);
        let g_f1_pre = relu_backward(&cache.a1, &g_a1);
        let g_h = self.f1.backward(&cache.h, &g_f1_pre);
        self.lstm.backward_window(&cache.lstm_cache, &g_h);
    }

    pub fn zero_grad(&mut self) {
        self.lstm.zero_grad();
        self.f1.zero_grad();
        self.f2.zero_grad();
        self.out.zero_grad();
    }

    pub fn adam_step(&mut self, lr: f64, opt: &AdamParams, t: i32) {
        self.lstm.adam_step(lr, opt, t);
        self.f1.adam_step(lr, opt, t);
        self.f2.adam_step(lr, opt, t);
        self.out.adam_step(lr, opt, t);
    }
}

/// Fixed-length observation history for one environment, feeding the
/// critic's window. An episode reset fills all slots with the initial
/// observation.
#[derive(Debug, Clone)]
pub struct WindowBuffer {
    data: Vec<f64>,
    dim: usize,
}

impl WindowBuffer {
    pub fn new(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim * CRITIC_WINDOW],
            dim,
        }
    }

    pub fn reset(&mut self, obs: &[f64]) {
        debug_assert_eq!(obs.len(), self.dim);
        for t in 0..CRITIC_WINDOW {
            self.data[t * self.dim..(t + 1) * self.dim].copy_from_slice(obs);
        }
    }

    pub fn push(&mut self, obs: &[f64]) {
        debug_assert_eq!(obs.len(), self.dim);
        self.data.copy_within(self.dim.., 0);
        let start = (CRITIC_WINDOW - 1) * self.dim;
        self.data[start..].copy_from_slice(obs);
    }

    /// Flattened window, oldest step first.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The window that would result from appending `obs`, without
    /// mutating the buffer (used for terminal bootstrap values).
    pub fn peek_push(&self, obs: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        out.extend_from_slice(&self.data[self.dim..]);
        out.extend_from_slice(obs);
        out
    }
}

/// Pack flattened per-sample windows ([B * W * D]) into the critic input.
pub fn windows_to_array<T: Real>(flat: &[f64], dim: usize) -> Array3<T> {
    let batch = flat.len() / (CRITIC_WINDOW * dim);
    debug_assert_eq!(flat.len(), batch * CRITIC_WINDOW * dim);
    Array3::from_shape_fn((batch, CRITIC_WINDOW, dim), |(b, t, d)| {
        T::c(flat[(b * CRITIC_WINDOW + t) * dim + d])
    })
}
