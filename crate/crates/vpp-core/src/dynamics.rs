//! Planar rigid-body dynamics of the VPP MAV.
//!
//! The vehicle is a stick of mass `m` and half length `l` moving in a
//! vertical plane. Two thrust vectors act along the body y-axis at the stick
//! tips; their sum `f` and differential torque `tau = (f1 - f2) l` drive the
//! translational and rotational dynamics. Integration is semi-implicit
//! (symplectic) Euler at a fixed physics step, which keeps the hover
//! equilibrium energy-stable over long episodes.
//!
//! Parasitic effects identified on the bench live here as well: a
//! first-order lag on per-actuator thrust and a quadratic aerodynamic drag
//! `f_d = -k_d |v| v` applied per axis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gravity vector direction is `-e2`; thrust acts along the body `+e2` axis.
pub const E2: [f64; 2] = [0.0, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite state fed to integrator (upstream divergence)")]
    NonFiniteState,
    #[error("batch length mismatch: {states} states vs {wrenches} wrenches")]
    BatchMismatch { states: usize, wrenches: usize },
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Planar rotation matrix `R(theta)`, column-major pair `(R e1, R e2)`.
#[inline]
pub fn rotation(theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, s], [-s, c]]
}

/// Pose and twist of the planar vehicle.
///
/// `theta` accumulates continuously across flips (it is never wrapped by the
/// integrator); use [`RigidState::theta_wrapped`] when a `(-pi, pi]`
/// representative is needed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidState {
    /// Position of the center point, m.
    pub p: [f64; 2],
    /// Velocity, m/s.
    pub v: [f64; 2],
    /// Body angle, rad, unwrapped.
    pub theta: f64,
    /// Angular speed, rad/s.
    pub q: f64,
}

impl RigidState {
    pub const ZERO: RigidState = RigidState {
        p: [0.0, 0.0],
        v: [0.0, 0.0],
        theta: 0.0,
        q: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        self.p[0].is_finite()
            && self.p[1].is_finite()
            && self.v[0].is_finite()
            && self.v[1].is_finite()
            && self.theta.is_finite()
            && self.q.is_finite()
    }

    /// Body angle wrapped into `(-pi, pi]`.
    pub fn theta_wrapped(&self) -> f64 {
        wrap_angle(self.theta)
    }
}

/// Physical parameters of the vehicle body.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BodyParams {
    /// Vehicle mass, kg.
    pub mass: f64,
    /// Half length of the stick, m.
    pub half_length: f64,
    /// Moment of inertia about the body z-axis, kg m^2.
    pub inertia: f64,
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
    /// Quadratic drag coefficient, N s^2/m^2, applied per axis.
    pub drag_coeff: f64,
    /// Ratio of maximum total thrust to weight; sets the per-actuator
    /// saturation limit used by control allocation.
    pub thrust_to_weight: f64,
    /// Sign convention for the torque contribution to `q_dot`. `+1` makes
    /// `f1 > f2` rotate counter-clockwise, consistent with `R(theta)`.
    pub torque_sign: f64,
}

impl Default for BodyParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            half_length: 0.15,
            inertia: 0.012,
            gravity: 9.81,
            drag_coeff: 0.05,
            thrust_to_weight: 2.0,
            torque_sign: 1.0,
        }
    }
}

impl BodyParams {
    /// Saturation limit for a single actuator, N. VPP props produce thrust of
    /// either sign, so the admissible range is `[-limit, +limit]`.
    pub fn per_actuator_limit(&self) -> f64 {
        self.thrust_to_weight * self.mass * self.gravity / 2.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass > 0.0) {
            return Err(format!("mass must be > 0, got {}", self.mass));
        }
        if !(self.half_length > 0.0) {
            return Err(format!("half_length must be > 0, got {}", self.half_length));
        }
        if !(self.inertia > 0.0) {
            return Err(format!("inertia must be > 0, got {}", self.inertia));
        }
        if !(self.gravity > 0.0) {
            return Err(format!("gravity must be > 0, got {}", self.gravity));
        }
        if !(self.drag_coeff >= 0.0) {
            return Err(format!("drag_coeff must be >= 0, got {}", self.drag_coeff));
        }
        if !(self.thrust_to_weight > 0.0) {
            return Err(format!(
                "thrust_to_weight must be > 0, got {}",
                self.thrust_to_weight
            ));
        }
        if self.torque_sign != 1.0 && self.torque_sign != -1.0 {
            return Err(format!("torque_sign must be +1 or -1, got {}", self.torque_sign));
        }
        Ok(())
    }
}

/// Total thrust and torque acting on the body.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WrenchCommand {
    /// Total thrust along the body `+e2` axis, N.
    pub f: f64,
    /// Torque about the body z-axis, N m.
    pub tau: f64,
}

/// Combine per-actuator thrusts into the body wrench:
/// `f = f1 + f2`, `tau = (f1 - f2) l`.
pub fn forces_merge(f1: f64, f2: f64, l: f64) -> WrenchCommand {
    debug_assert!(l > 0.0);
    WrenchCommand {
        f: f1 + f2,
        tau: (f1 - f2) * l,
    }
}

/// First-order actuator lag `G(s) = 1 / (T s + 1)` on commanded thrust.
///
/// Stepping uses the exact discretization of the continuous system, so the
/// response is independent of how a time interval is subdivided.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActuatorLag {
    /// Time constant, s.
    pub time_constant: f64,
    /// Current lagged thrust, N.
    pub output: f64,
}

impl ActuatorLag {
    pub fn new(time_constant: f64) -> Self {
        debug_assert!(time_constant > 0.0);
        Self {
            time_constant,
            output: 0.0,
        }
    }

    /// Smoothing coefficient `1 - exp(-dt/T)` for a fixed step; see
    /// [`ActuatorLag::step_with_coeff`].
    pub fn coeff(&self, dt: f64) -> f64 {
        1.0 - (-dt / self.time_constant).exp()
    }

    /// Advance the lag by `dt` toward `command` and return the new output.
    pub fn step(&mut self, command: f64, dt: f64) -> f64 {
        debug_assert!(dt > 0.0);
        self.step_with_coeff(command, self.coeff(dt))
    }

    /// Hot-path variant with the per-step coefficient precomputed by
    /// [`ActuatorLag::coeff`]; bit-identical to [`ActuatorLag::step`].
    #[inline]
    pub fn step_with_coeff(&mut self, command: f64, coeff: f64) -> f64 {
        self.output += coeff * (command - self.output);
        self.output
    }
}

/// Per-axis quadratic drag `-k_d |v_a| v_a`.
#[inline]
fn drag_force(v: [f64; 2], k_d: f64) -> [f64; 2] {
    [-k_d * v[0].abs() * v[0], -k_d * v[1].abs() * v[1]]
}

/// One semi-implicit Euler step of the planar model.
///
/// Update order: velocities first (gravity, rotated thrust, drag), then
/// positions from the new velocities; likewise `q` before `theta`.
pub fn step(
    state: &RigidState,
    wrench: &WrenchCommand,
    params: &BodyParams,
    dt: f64,
) -> Result<RigidState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    debug_assert!(dt > 0.0 && dt <= 0.01);
    Ok(step_unchecked(state, wrench, params, dt))
}

/// [`step`] without the finiteness check, for batched inner loops that
/// validate at a coarser cadence.
#[inline]
pub fn step_unchecked(
    state: &RigidState,
    wrench: &WrenchCommand,
    params: &BodyParams,
    dt: f64,
) -> RigidState {
    let (s, c) = state.theta.sin_cos();
    let fd = drag_force(state.v, params.drag_coeff);
    let inv_m = 1.0 / params.mass;
    // thrust direction is R(theta) e2 = (-sin, cos)
    let ax = (wrench.f * -s + fd[0]) * inv_m;
    let ay = (wrench.f * c + fd[1]) * inv_m - params.gravity;
    let vx = state.v[0] + dt * ax;
    let vy = state.v[1] + dt * ay;
    let q = state.q + dt * (wrench.tau / params.inertia) * params.torque_sign;
    RigidState {
        p: [state.p[0] + dt * vx, state.p[1] + dt * vy],
        v: [vx, vy],
        theta: state.theta + dt * q,
        q,
    }
}

/// Batched counterpart of [`step`]: result index `i` is bit-identical to
/// `step(&states[i], &wrenches[i], ..)`, whatever the partitioning.
pub fn step_batch(
    states: &[RigidState],
    wrenches: &[WrenchCommand],
    params: &BodyParams,
    dt: f64,
) -> Result<Vec<RigidState>, DynamicsError> {
    if states.len() != wrenches.len() {
        return Err(DynamicsError::BatchMismatch {
            states: states.len(),
            wrenches: wrenches.len(),
        });
    }
    let mut out = states.to_vec();
    step_batch_in_place(&mut out, wrenches, params, dt)?;
    Ok(out)
}

/// In-place batched stepping used by the environment hot loop.
pub fn step_batch_in_place(
    states: &mut [RigidState],
    wrenches: &[WrenchCommand],
    params: &BodyParams,
    dt: f64,
) -> Result<(), DynamicsError> {
    if states.len() != wrenches.len() {
        return Err(DynamicsError::BatchMismatch {
            states: states.len(),
            wrenches: wrenches.len(),
        });
    }
    for s in states.iter() {
        if !s.is_finite() {
            return Err(DynamicsError::NonFiniteState);
        }
    }
    // Each element is independent; chunk only to amortize scheduling.
    const CHUNK: usize = 256;
    if states.len() >= 2 * CHUNK {
        states
            .par_chunks_mut(CHUNK)
            .zip(wrenches.par_chunks(CHUNK))
            .for_each(|(sc, wc)| {
                for (s, w) in sc.iter_mut().zip(wc) {
                    *s = step_unchecked(s, w, params, dt);
                }
            });
    } else {
        for (s, w) in states.iter_mut().zip(wrenches) {
            *s = step_unchecked(s, w, params, dt);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 1e-3;

    #[test]
    fn forces_merge_examples() {
        let w = forces_merge(5.0, 5.0, 0.2);
        assert_eq!((w.f, w.tau), (10.0, 0.0));
        let w = forces_merge(6.0, 4.0, 0.5);
        assert_eq!((w.f, w.tau), (10.0, 1.0));
        let w = forces_merge(0.0, 0.0, 0.3);
        assert_eq!((w.f, w.tau), (0.0, 0.0));
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let params = BodyParams::default();
        let mut state = RigidState::ZERO;
        let wrench = WrenchCommand {
            f: params.mass * params.gravity,
            tau: 0.0,
        };
        for _ in 0..100 {
            state = step(&state, &wrench, &params, DT).unwrap();
        }
        assert!(state.v[0].abs() < 1e-12 && state.v[1].abs() < 1e-12);
        assert!(state.p[0].abs() < 1e-12 && state.p[1].abs() < 1e-12);
    }

    #[test]
    fn free_fall_matches_analytic_velocity() {
        let params = BodyParams {
            drag_coeff: 0.0,
            ..BodyParams::default()
        };
        let mut state = RigidState::ZERO;
        let wrench = WrenchCommand::default();
        for _ in 0..1000 {
            state = step(&state, &wrench, &params, DT).unwrap();
        }
        assert_relative_eq!(state.v[1], -9.81, epsilon = 1e-6);
        assert_eq!(state.v[0], 0.0);
    }

    #[test]
    fn constant_torque_spin_matches_double_integration() {
        let params = BodyParams {
            drag_coeff: 0.0,
            ..BodyParams::default()
        };
        let tau = 0.02;
        let mut state = RigidState::ZERO;
        let wrench = WrenchCommand { f: 0.0, tau };
        let steps = 1000; // 1 s
        for _ in 0..steps {
            state = step(&state, &wrench, &params, DT).unwrap();
        }
        let t = steps as f64 * DT;
        let theta_exact = 0.5 * (tau / params.inertia) * t * t;
        let rel = (state.theta - theta_exact).abs() / theta_exact;
        assert!(rel < 0.01, "relative error {rel} exceeds 1%");
    }

    #[test]
    fn lag_step_analytic_response() {
        let mut lag = ActuatorLag::new(0.05);
        // step 0 -> 1, sampled at t = T
        let y = lag.step(1.0, 0.05);
        assert_relative_eq!(y, 1.0 - (-1.0f64).exp(), epsilon = 1e-9);

        // decay from 1 with zero input over 3T
        let mut lag = ActuatorLag::new(0.05);
        lag.output = 1.0;
        let y = lag.step(0.0, 0.15);
        assert_relative_eq!(y, (-3.0f64).exp(), epsilon = 1e-9);

        // subdividing the interval gives the same response (exact discretization)
        let mut lag = ActuatorLag::new(0.05);
        for _ in 0..50 {
            lag.step(1.0, 0.001);
        }
        assert_relative_eq!(lag.output, 1.0 - (-1.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn lag_converges_to_constant_command() {
        let mut lag = ActuatorLag::new(0.05);
        lag.output = -3.0;
        let mut prev_err = (7.5f64 - lag.output).abs();
        for _ in 0..10_000 {
            lag.step(7.5, 1e-3);
            let err = (7.5 - lag.output).abs();
            assert!(err <= prev_err, "convergence must be monotone");
            prev_err = err;
        }
        assert_relative_eq!(lag.output, 7.5, epsilon = 1e-9);
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_det() {
        for k in -50..=50 {
            let theta = k as f64 * 0.37;
            let r = rotation(theta);
            let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
            assert_relative_eq!(det, 1.0, epsilon = 1e-12);
            let dot = r[0][0] * r[1][0] + r[0][1] * r[1][1];
            assert_relative_eq!(dot, 0.0, epsilon = 1e-12);
            assert_relative_eq!(r[0][0] * r[0][0] + r[0][1] * r[0][1], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn drag_opposes_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let v = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            let fd = drag_force(v, 0.05);
            assert!(v[0] * fd[0] + v[1] * fd[1] <= 0.0);
        }
    }

    #[test]
    fn hover_energy_drift_below_tolerance() {
        // k_d = 0, tau = 0, f = m g, theta = 0: 10 s episode at 1 kHz.
        let params = BodyParams {
            drag_coeff: 0.0,
            ..BodyParams::default()
        };
        let wrench = WrenchCommand {
            f: params.mass * params.gravity,
            tau: 0.0,
        };
        let mut state = RigidState {
            p: [0.0, 1.0],
            ..RigidState::ZERO
        };
        let energy = |s: &RigidState| {
            0.5 * params.mass * (s.v[0] * s.v[0] + s.v[1] * s.v[1])
                + params.mass * params.gravity * s.p[1]
        };
        let e0 = energy(&state);
        for _ in 0..10_000 {
            state = step(&state, &wrench, &params, DT).unwrap();
        }
        assert!((energy(&state) - e0).abs() < 1e-6);
    }

    #[test]
    fn torque_sign_default_rotates_ccw_for_f1_greater() {
        let params = BodyParams::default();
        let w = forces_merge(6.0, 4.0, params.half_length);
        let state = step(&RigidState::ZERO, &w, &params, DT).unwrap();
        assert!(state.q > 0.0);
        let params_flipped = BodyParams {
            torque_sign: -1.0,
            ..params
        };
        let state = step(&RigidState::ZERO, &w, &params_flipped, DT).unwrap();
        assert!(state.q < 0.0);
    }

    #[test]
    fn step_rejects_non_finite_state() {
        let params = BodyParams::default();
        let mut bad = RigidState::ZERO;
        bad.v[0] = f64::NAN;
        assert_eq!(
            step(&bad, &WrenchCommand::default(), &params, DT).unwrap_err(),
            DynamicsError::NonFiniteState
        );
    }

    fn random_state(rng: &mut ChaCha8Rng) -> RigidState {
        RigidState {
            p: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            v: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
            theta: rng.random_range(-10.0..10.0),
            q: rng.random_range(-15.0..15.0),
        }
    }

    #[test]
    fn step_batch_equals_scalar_loop() {
        let params = BodyParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // >= 1e4 random cases, exact equality
        for &n in &[1usize, 64, 1024, 10_000] {
            let states: Vec<_> = (0..n).map(|_| random_state(&mut rng)).collect();
            let wrenches: Vec<_> = (0..n)
                .map(|_| WrenchCommand {
                    f: rng.random_range(-12.0..12.0),
                    tau: rng.random_range(-3.0..3.0),
                })
                .collect();
            let batched = step_batch(&states, &wrenches, &params, DT).unwrap();
            for i in 0..n {
                let scalar = step(&states[i], &wrenches[i], &params, DT).unwrap();
                assert_eq!(batched[i], scalar, "mismatch at index {i} of {n}");
            }
        }
    }

    #[test]
    fn step_batch_rejects_mismatched_lengths() {
        let params = BodyParams::default();
        let states = vec![RigidState::ZERO; 3];
        let wrenches = vec![WrenchCommand::default(); 2];
        assert!(matches!(
            step_batch(&states, &wrenches, &params, DT),
            Err(DynamicsError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn wrap_angle_range_and_continuity() {
        assert_relative_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(0.1), 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = rng.random_range(-50.0..50.0);
            let w = wrap_angle(a);
            assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
            // a and wrap(a) differ by an integer number of turns
            let turns = (a - w) / (2.0 * std::f64::consts::PI);
            assert!((turns - turns.round()).abs() < 1e-9);
        }
    }
}
