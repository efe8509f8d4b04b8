//! Domain randomization: per-episode physical-parameter jitter, per-step
//! observation noise, and initial-state dispersion, all scaled linearly by
//! the curriculum difficulty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actuator::PropellerModel;
use crate::dynamics::{BodyParams, RigidState};

use super::task::TaskSpec;

/// Per-channel observation noise standard deviations at difficulty 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObsNoiseStd {
    /// Relative-position channels, m.
    pub dp: f64,
    /// Velocity channels, m/s.
    pub v: f64,
    /// sin/cos channels (applied after encoding, not renormalized).
    pub trig: f64,
    /// Wrapped scalar-angle channel, rad.
    pub angle: f64,
    /// Angular-rate channel, rad/s.
    pub q: f64,
    /// Integral channels, m.
    pub gp: f64,
}

impl Default for ObsNoiseStd {
    fn default() -> Self {
        Self {
            dp: 0.005,
            v: 0.01,
            trig: 0.01,
            angle: 0.01,
            q: 0.01,
            gp: 0.01,
        }
    }
}

impl ObsNoiseStd {
    pub fn scaled(&self, difficulty: f64) -> Self {
        Self {
            dp: self.dp * difficulty,
            v: self.v * difficulty,
            trig: self.trig * difficulty,
            angle: self.angle * difficulty,
            q: self.q * difficulty,
            gp: self.gp * difficulty,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("dp", self.dp),
            ("v", self.v),
            ("trig", self.trig),
            ("angle", self.angle),
            ("q", self.q),
            ("gp", self.gp),
        ] {
            if v < 0.0 {
                return Err(format!("observation noise {name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Relative jitter half-ranges at difficulty 1 (a value of 0.2 means the
/// parameter is drawn uniformly within +/-20% of nominal).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParamJitter {
    pub mass: f64,
    pub inertia: f64,
    pub body_drag: f64,
    pub thrust_coeff: f64,
    pub prop_drag: f64,
    pub lag_tau: f64,
}

impl Default for ParamJitter {
    fn default() -> Self {
        Self {
            mass: 0.2,
            inertia: 0.2,
            body_drag: 0.3,
            thrust_coeff: 0.1,
            prop_drag: 0.2,
            lag_tau: 0.3,
        }
    }
}

impl ParamJitter {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("mass", self.mass),
            ("inertia", self.inertia),
            ("body_drag", self.body_drag),
            ("thrust_coeff", self.thrust_coeff),
            ("prop_drag", self.prop_drag),
            ("lag_tau", self.lag_tau),
        ] {
            if v < 0.0 {
                return Err(format!("jitter range {name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Initial-state dispersion at difficulty 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InitSpread {
    /// m, per axis around the target position.
    pub position: f64,
    /// rad.
    pub angle: f64,
    /// m/s, per axis.
    pub velocity: f64,
}

impl Default for InitSpread {
    fn default() -> Self {
        Self {
            position: 0.3,
            angle: 0.3,
            velocity: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RandomizationSpec {
    pub obs_noise: ObsNoiseStd,
    pub jitter: ParamJitter,
    pub init: InitSpread,
}

impl RandomizationSpec {
    pub fn validate(&self) -> Result<(), String> {
        self.obs_noise.validate()?;
        self.jitter.validate()?;
        if self.init.position < 0.0 || self.init.angle < 0.0 || self.init.velocity < 0.0 {
            return Err("initial-state spreads must be >= 0".into());
        }
        Ok(())
    }
}

/// One episode's drawn physics: jittered body/propeller parameters and the
/// servo lag constant, plus the scaled per-step observation noise.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeDraw {
    pub body: BodyParams,
    pub prop: PropellerModel,
    pub lag_tau: f64,
    pub obs_noise: ObsNoiseStd,
    /// Number of parameters that had to be clipped back into physical
    /// validity (zero under the default ranges).
    pub clipped: u32,
}

/// Smallest admissible scale factor after jitter; keeps every positive
/// physical parameter positive even under misconfigured ranges.
const MIN_SCALE: f64 = 0.05;

fn jitter_factor<R: Rng>(rng: &mut R, half_range: f64, difficulty: f64, clipped: &mut u32) -> f64 {
    // always consume one draw so RNG streams stay aligned across
    // difficulty levels
    let u: f64 = rng.random_range(-1.0..=1.0);
    let factor = 1.0 + u * half_range * difficulty;
    if factor < MIN_SCALE {
        *clipped += 1;
        MIN_SCALE
    } else {
        factor
    }
}

/// Draw one episode's parameters. Difficulty 0 returns the nominal values
/// exactly (while still consuming the same number of RNG draws).
pub fn apply_randomization<R: Rng>(
    spec: &RandomizationSpec,
    nominal_body: &BodyParams,
    nominal_prop: &PropellerModel,
    nominal_lag_tau: f64,
    difficulty: f64,
    rng: &mut R,
) -> EpisodeDraw {
    let mut clipped = 0;
    let j = &spec.jitter;
    let body = BodyParams {
        mass: nominal_body.mass * jitter_factor(rng, j.mass, difficulty, &mut clipped),
        inertia: nominal_body.inertia * jitter_factor(rng, j.inertia, difficulty, &mut clipped),
        drag_coeff: nominal_body.drag_coeff
            * jitter_factor(rng, j.body_drag, difficulty, &mut clipped),
        ..*nominal_body
    };
    let k_t_factor = jitter_factor(rng, j.thrust_coeff, difficulty, &mut clipped);
    let drag_factor = jitter_factor(rng, j.prop_drag, difficulty, &mut clipped);
    let prop = PropellerModel {
        k_t: nominal_prop.k_t * k_t_factor,
        k_d1: nominal_prop.k_d1 * drag_factor,
        k_d2: nominal_prop.k_d2 * drag_factor,
        k_d3: nominal_prop.k_d3 * drag_factor,
        ..*nominal_prop
    };
    let lag_tau = nominal_lag_tau * jitter_factor(rng, j.lag_tau, difficulty, &mut clipped);
    EpisodeDraw {
        body,
        prop,
        lag_tau,
        obs_noise: spec.obs_noise.scaled(difficulty),
        clipped,
    }
}

/// Draw an initial state around the task's target position. `init` scales
/// the hover-like dispersion; `explore` additionally opens the attitude
/// range up to the task's maneuver span (training only), capped at a half
/// turn since wider wrapped attitudes do not exist.
pub fn draw_initial_state<R: Rng>(
    spec: &RandomizationSpec,
    task: &TaskSpec,
    init: f64,
    explore: f64,
    rng: &mut R,
) -> RigidState {
    use std::f64::consts::PI;
    let s = &spec.init;
    let u = |rng: &mut R| rng.random_range(-1.0..=1.0);
    let angle_spread = (s.angle * init + task.attitude_span() * explore).min(PI);
    RigidState {
        p: [
            task.target_position[0] + u(rng) * s.position * init,
            task.target_position[1] + u(rng) * s.position * init,
        ],
        v: [u(rng) * s.velocity * init, u(rng) * s.velocity * init],
        theta: u(rng) * angle_spread,
        q: 0.0,
    }
}
