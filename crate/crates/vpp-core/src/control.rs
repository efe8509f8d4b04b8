//! The control cascade below the policy: action de-normalization, the
//! 1 kHz angular-rate PD layer, thrust/torque allocation to the two
//! actuators, and a planar Kalman filter fusing 1 kHz IMU samples with
//! 100 Hz pose measurements.
//!
//! Each vehicle owns independent controller and filter instances; nothing
//! here is shared, so batched harnesses can run instances in parallel
//! freely.

use nalgebra::{Matrix2, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{wrap_angle, WrenchCommand};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("covariance lost positive-definiteness and could not be repaired")]
    CovarianceNotPd,
    #[error("measurement noise covariance is not symmetric positive-definite")]
    MeasurementNoiseNotPd,
}

/// Scale factors between the policy's normalized action space and physical
/// commands.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActionMapping {
    /// Collective-thrust magnitude at |action| = 1, N.
    pub f_max: f64,
    /// Angular-rate command magnitude at |action| = 1, rad/s.
    pub q_max: f64,
}

impl Default for ActionMapping {
    fn default() -> Self {
        Self {
            f_max: 10.0,
            q_max: 12.0,
        }
    }
}

impl ActionMapping {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.f_max > 0.0 && self.q_max > 0.0) {
            return Err(format!(
                "action mapping must be positive, got f_max {} q_max {}",
                self.f_max, self.q_max
            ));
        }
        Ok(())
    }
}

/// Map a normalized policy action to a collective-thrust and angular-rate
/// command. Out-of-range network output is clamped into [-1, 1] first,
/// never rejected.
pub fn denormalize_action(a: [f64; 2], mapping: &ActionMapping) -> (f64, f64) {
    let f_cmd = a[0].clamp(-1.0, 1.0) * mapping.f_max;
    let q_des = a[1].clamp(-1.0, 1.0) * mapping.q_max;
    (f_cmd, q_des)
}

/// Gains of the high-frequency angular-rate PD loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatePdGains {
    /// N m s/rad.
    pub kp: f64,
    /// N m s^2/rad; acts on the rate derivative estimate
    /// (derivative-of-measurement, so setpoint steps produce no kick).
    pub kd: f64,
    /// Torque saturation, N m.
    pub tau_limit: f64,
}

impl Default for RatePdGains {
    /// Tuned on the default body (inertia 0.012 kg m^2, arm 0.15 m): a
    /// +/-12 rad/s square wave tracks with under 10% overshoot.
    fn default() -> Self {
        Self {
            kp: 0.3,
            kd: 0.002,
            tau_limit: 2.5,
        }
    }
}

impl RatePdGains {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.kp > 0.0) || self.kd < 0.0 || !(self.tau_limit > 0.0) {
            return Err(format!(
                "require kp > 0, kd >= 0, tau_limit > 0; got {} / {} / {}",
                self.kp, self.kd, self.tau_limit
            ));
        }
        Ok(())
    }
}

/// Angular-rate PD law: `tau = clamp(kp (q_des - q) - kd q_dot_est)`.
#[inline]
pub fn rate_pd(q_des: f64, q_meas: f64, q_dot_est: f64, gains: &RatePdGains) -> f64 {
    (gains.kp * (q_des - q_meas) - gains.kd * q_dot_est).clamp(-gains.tau_limit, gains.tau_limit)
}

/// Split a wrench into per-actuator thrusts, inverting the rigid-body
/// composition `f = f1 + f2`, `tau = l (f1 - f2)`.
///
/// On saturation, torque wins: the differential `f1 - f2` is preserved as
/// far as the actuator limits allow and collective thrust is shed to make
/// room, because attitude authority is the binding constraint during
/// aggressive maneuvers.
pub fn allocate(wrench: &WrenchCommand, l: f64, per_actuator_limit: f64) -> (f64, f64) {
    debug_assert!(l > 0.0);
    let limit = per_actuator_limit;
    // Differential first: feasible range is +/- 2*limit (one actuator at
    // +limit, the other at -limit).
    let d = (wrench.tau / l).clamp(-2.0 * limit, 2.0 * limit);
    // With the differential fixed, collective must leave both actuators
    // inside [-limit, limit].
    let c_room = 2.0 * limit - d.abs();
    let c = wrench.f.clamp(-c_room, c_room);
    let f1 = (0.5 * (c + d)).clamp(-limit, limit);
    let f2 = (0.5 * (c - d)).clamp(-limit, limit);
    (f1, f2)
}

/// Standard deviations of the simulated sensor suite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SensorNoise {
    /// Accelerometer, m/s^2 per axis.
    pub accel_std: f64,
    /// Gyroscope, rad/s.
    pub gyro_std: f64,
    /// Pose position, m per axis.
    pub pos_std: f64,
    /// Pose angle, rad.
    pub angle_std: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            accel_std: 0.1,
            gyro_std: 0.005,
            pos_std: 0.01,
            angle_std: 0.01,
        }
    }
}

impl SensorNoise {
    /// 3x3 pose measurement covariance (p, theta).
    pub fn pose_covariance(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            self.pos_std * self.pos_std,
            self.pos_std * self.pos_std,
            self.angle_std * self.angle_std,
        ))
    }
}

/// One 1 kHz inertial sample: body-frame specific force and angular rate.
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub accel_body: [f64; 2],
    pub gyro: f64,
}

/// Fused state estimate over [px, py, vx, vy, theta, q] with full
/// covariance. Theta is continuous (unwrapped); innovations are wrapped so
/// updates never jump it by a full turn.
#[derive(Debug, Clone)]
pub struct FusedEstimate {
    pub mean: Vector6<f64>,
    pub covariance: Matrix6<f64>,
}

/// Floor added to the diagonal when positive-definiteness is repaired.
const COV_FLOOR: f64 = 1e-12;

impl FusedEstimate {
    pub fn new(mean: Vector6<f64>, covariance: Matrix6<f64>) -> Self {
        Self { mean, covariance }
    }

    /// Start from a known state with small isotropic uncertainty.
    pub fn from_state(p: [f64; 2], v: [f64; 2], theta: f64, q: f64, var: f64) -> Self {
        Self {
            mean: Vector6::new(p[0], p[1], v[0], v[1], theta, q),
            covariance: Matrix6::identity() * var,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.mean[0], self.mean[1]]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.mean[2], self.mean[3]]
    }

    pub fn theta(&self) -> f64 {
        self.mean[4]
    }

    pub fn q(&self) -> f64 {
        self.mean[5]
    }

    /// Symmetrize, then escalate a diagonal floor until Cholesky succeeds.
    /// Returns an error only when entries are non-finite.
    fn repair_covariance(&mut self) -> Result<(), ControlError> {
        self.covariance = 0.5 * (self.covariance + self.covariance.transpose());
        if self.covariance.cholesky().is_some() {
            return Ok(());
        }
        if self.covariance.iter().any(|x| !x.is_finite()) {
            return Err(ControlError::CovarianceNotPd);
        }
        let mut floor = COV_FLOOR;
        for _ in 0..40 {
            let candidate = self.covariance + Matrix6::identity() * floor;
            if candidate.cholesky().is_some() {
                self.covariance = candidate;
                return Ok(());
            }
            floor *= 10.0;
        }
        Err(ControlError::CovarianceNotPd)
    }
}

/// Process-noise configuration of the fusion filter: the IMU standard
/// deviations enter through the input Jacobian, plus a small floor that
/// keeps the covariance regular during long update-free stretches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KalmanConfig {
    pub accel_std: f64,
    pub gyro_std: f64,
    /// Diagonal floor added per predict step.
    pub process_floor: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        let noise = SensorNoise::default();
        Self {
            accel_std: noise.accel_std,
            gyro_std: noise.gyro_std,
            process_floor: 1e-12,
        }
    }
}

/// Propagate the estimate through one IMU interval.
///
/// The gyro drives the rate state directly; the accelerometer specific
/// force is rotated to the world frame with the current attitude estimate
/// and gravity-compensated to drive velocity. The mean uses the same
/// update order as the simulator's integrator (velocity first, then
/// position from the new velocity), so a truth-fed filter tracks exactly.
/// The covariance propagates with the state Jacobian — including the
/// specific-force/attitude coupling — plus process noise mapped through
/// the input Jacobian.
pub fn kalman_predict(
    est: &FusedEstimate,
    imu: &ImuSample,
    gravity: f64,
    cfg: &KalmanConfig,
    dt: f64,
) -> Result<FusedEstimate, ControlError> {
    debug_assert!(dt > 0.0);
    let theta = est.mean[4];
    let (sin_t, cos_t) = theta.sin_cos();
    let rot = Matrix2::new(cos_t, -sin_t, sin_t, cos_t);
    // d/dtheta of rot
    let drot = Matrix2::new(-sin_t, -cos_t, cos_t, -sin_t);
    let accel_b = Vector2::new(imu.accel_body[0], imu.accel_body[1]);
    let a_world = rot * accel_b - Vector2::new(0.0, gravity);

    let mut mean = est.mean;
    let v_new = Vector2::new(mean[2], mean[3]) + dt * a_world;
    mean[0] += dt * v_new[0];
    mean[1] += dt * v_new[1];
    mean[2] = v_new[0];
    mean[3] = v_new[1];
    mean[4] += dt * imu.gyro;
    mean[5] = imu.gyro;

    // State Jacobian.
    let mut f = Matrix6::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    let coupling = drot * accel_b;
    f[(2, 4)] = dt * coupling[0];
    f[(3, 4)] = dt * coupling[1];
    f[(0, 4)] = dt * dt * coupling[0];
    f[(1, 4)] = dt * dt * coupling[1];
    // The rate state is re-seeded from the gyro each step; it carries no
    // memory of the previous state.
    f[(5, 5)] = 0.0;

    // Input Jacobian columns: two accelerometer axes, then the gyro.
    let mut g = nalgebra::SMatrix::<f64, 6, 3>::zeros();
    for axis in 0..2 {
        g[(0, axis)] = dt * dt * rot[(0, axis)];
        g[(1, axis)] = dt * dt * rot[(1, axis)];
        g[(2, axis)] = dt * rot[(0, axis)];
        g[(3, axis)] = dt * rot[(1, axis)];
    }
    g[(4, 2)] = dt;
    g[(5, 2)] = 1.0;
    let noise_diag = Vector3::new(
        cfg.accel_std * cfg.accel_std,
        cfg.accel_std * cfg.accel_std,
        cfg.gyro_std * cfg.gyro_std,
    );
    let process = g * Matrix3::from_diagonal(&noise_diag) * g.transpose()
        + Matrix6::identity() * cfg.process_floor;

    let mut out = FusedEstimate {
        mean,
        covariance: f * est.covariance * f.transpose() + process,
    };
    out.repair_covariance()?;
    Ok(out)
}

/// Fold in one pose measurement `(p, theta)`.
///
/// Linear update with the angle innovation wrapped into (-pi, pi], Joseph
/// covariance form for numerical symmetry.
pub fn kalman_update(
    est: &FusedEstimate,
    pose: ([f64; 2], f64),
    r_meas: &Matrix3<f64>,
) -> Result<FusedEstimate, ControlError> {
    if r_meas.cholesky().is_none() || (r_meas - r_meas.transpose()).norm() > 1e-9 {
        return Err(ControlError::MeasurementNoiseNotPd);
    }
    let mut h = nalgebra::SMatrix::<f64, 3, 6>::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h[(2, 4)] = 1.0;

    let innovation = Vector3::new(
        pose.0[0] - est.mean[0],
        pose.0[1] - est.mean[1],
        wrap_angle(pose.1 - est.mean[4]),
    );
    let s = h * est.covariance * h.transpose() + r_meas;
    let s_inv = s
        .try_inverse()
        .ok_or(ControlError::MeasurementNoiseNotPd)?;
    let k = est.covariance * h.transpose() * s_inv;
    let mean = est.mean + k * innovation;
    let i_kh = Matrix6::identity() - k * h;
    let covariance = i_kh * est.covariance * i_kh.transpose() + k * r_meas * k.transpose();
    let mut out = FusedEstimate { mean, covariance };
    out.repair_covariance()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{forces_merge, step, BodyParams, RigidState};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn denormalize_examples() {
        let m = ActionMapping::default();
        assert_eq!(denormalize_action([1.0, 0.0], &m), (10.0, 0.0));
        assert_eq!(denormalize_action([0.0, -1.0], &m), (0.0, -12.0));
        assert_eq!(denormalize_action([0.0, 0.0], &m), (0.0, 0.0));
        // out-of-range output clamps, never errors
        assert_eq!(denormalize_action([3.5, -7.0], &m), (10.0, -12.0));
    }

    #[test]
    fn rate_pd_examples() {
        let gains = RatePdGains {
            kp: 0.5,
            kd: 0.0,
            tau_limit: 10.0,
        };
        assert_eq!(rate_pd(4.0, 4.0, 0.0, &gains), 0.0);
        assert_relative_eq!(rate_pd(6.0, 4.0, 0.0, &gains), 1.0);
        // clamping
        let tight = RatePdGains {
            tau_limit: 0.3,
            ..gains
        };
        assert_eq!(rate_pd(100.0, 0.0, 0.0, &tight), 0.3);
        assert_eq!(rate_pd(-100.0, 0.0, 0.0, &tight), -0.3);
    }

    #[test]
    fn rate_pd_is_odd_in_error_without_damping() {
        let gains = RatePdGains {
            kp: 0.4,
            kd: 0.0,
            tau_limit: 5.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let err = rng.random_range(-20.0..20.0);
            assert_relative_eq!(
                rate_pd(err, 0.0, 0.0, &gains),
                -rate_pd(-err, 0.0, 0.0, &gains),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rate_square_wave_tracks_with_low_overshoot() {
        // Closed loop on the default body at 1 kHz: +/-12 rad/s square
        // wave, 0.5 s half-period.
        let body = BodyParams::default();
        let gains = RatePdGains::default();
        let dt = 1e-3;
        let mut state = RigidState::ZERO;
        let mut q_prev = 0.0;
        let mut max_overshoot: f64 = 0.0;
        let mut settled_err: f64 = 0.0;
        for k in 0..2000 {
            let t = k as f64 * dt;
            let q_des = if (t / 0.5) as i64 % 2 == 0 { 12.0 } else { -12.0 };
            let q_dot_est = (state.q - q_prev) / dt;
            q_prev = state.q;
            let tau = rate_pd(q_des, state.q, q_dot_est, &gains);
            let (f1, f2) = allocate(
                &WrenchCommand {
                    f: body.mass * body.gravity,
                    tau,
                },
                body.half_length,
                body.per_actuator_limit(),
            );
            let wrench = forces_merge(f1, f2, body.half_length);
            state = step(&state, &wrench, &body, dt).unwrap();
            max_overshoot = max_overshoot.max(state.q.abs() - 12.0);
            // sample tracking error just before each toggle
            let phase = t % 0.5;
            if phase > 0.48 {
                settled_err = settled_err.max((state.q - q_des).abs());
            }
        }
        assert!(
            max_overshoot < 0.1 * 12.0,
            "overshoot {max_overshoot:.3} rad/s exceeds 10% of setpoint"
        );
        assert!(
            settled_err < 0.6,
            "steady tracking error {settled_err:.3} rad/s too large"
        );
    }

    #[test]
    fn allocate_examples() {
        let w = WrenchCommand { f: 10.0, tau: 0.0 };
        assert_eq!(allocate(&w, 0.2, 100.0), (5.0, 5.0));
        let w = WrenchCommand { f: 10.0, tau: 1.0 };
        assert_eq!(allocate(&w, 0.5, 100.0), (6.0, 4.0));
    }

    #[test]
    fn allocate_merge_roundtrip_on_unsaturated_wrenches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = 0.15;
        let limit = 9.81;
        for _ in 0..10_000 {
            // build from feasible per-actuator forces so nothing saturates
            let f1 = rng.random_range(-limit..limit);
            let f2 = rng.random_range(-limit..limit);
            let w = forces_merge(f1, f2, l);
            let (a1, a2) = allocate(&w, l, limit);
            assert_relative_eq!(a1, f1, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(a2, f2, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn allocate_preserves_torque_under_saturation() {
        let l = 0.15;
        let limit = 9.81;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let w = WrenchCommand {
                f: rng.random_range(-60.0..60.0),
                tau: rng.random_range(-8.0..8.0),
            };
            let (f1, f2) = allocate(&w, l, limit);
            assert!(f1.abs() <= limit + 1e-12 && f2.abs() <= limit + 1e-12);
            let desired_diff = (w.tau / l).clamp(-2.0 * limit, 2.0 * limit);
            // torque priority: the differential survives exactly whenever
            // it is feasible at all
            assert_relative_eq!(f1 - f2, desired_diff, max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    /// Noiseless truth-fed filter: IMU synthesized from the simulator's own
    /// state deltas must be tracked exactly (same integrator order).
    #[test]
    fn filter_tracks_truth_with_noiseless_imu() {
        let body = BodyParams::default();
        let dt = 1e-3;
        let mut truth = RigidState {
            p: [1.0, 1.2],
            v: [0.3, -0.2],
            theta: 0.4,
            q: 1.0,
        };
        let mut est = FusedEstimate::from_state(truth.p, truth.v, truth.theta, truth.q, 1e-9);
        let cfg = KalmanConfig::default();
        for k in 0..500 {
            let t = k as f64 * dt;
            let wrench = WrenchCommand {
                f: body.mass * body.gravity + (3.0 * t).sin(),
                tau: 0.4 * (5.0 * t).cos(),
            };
            let prev = truth;
            truth = step(&truth, &wrench, &body, dt).unwrap();
            let a_world = [
                (truth.v[0] - prev.v[0]) / dt,
                (truth.v[1] - prev.v[1]) / dt,
            ];
            // specific force in the body frame at the pre-step attitude
            let (s, c) = prev.theta.sin_cos();
            let fx = a_world[0];
            let fy = a_world[1] + body.gravity;
            let imu = ImuSample {
                accel_body: [c * fx + s * fy, -s * fx + c * fy],
                gyro: truth.q,
            };
            est = kalman_predict(&est, &imu, body.gravity, &cfg, dt).unwrap();
        }
        assert_relative_eq!(est.mean[0], truth.p[0], epsilon = 1e-8);
        assert_relative_eq!(est.mean[1], truth.p[1], epsilon = 1e-8);
        assert_relative_eq!(est.mean[2], truth.v[0], epsilon = 1e-8);
        assert_relative_eq!(est.mean[3], truth.v[1], epsilon = 1e-8);
        assert_relative_eq!(est.mean[4], truth.theta, epsilon = 1e-8);
    }

    #[test]
    fn covariance_grows_without_updates() {
        // start below the per-step sensor-noise floor so every state's
        // variance, including the gyro-reseeded rate, grows monotonically
        let est0 = FusedEstimate::from_state([0.0, 0.0], [0.0, 0.0], 0.0, 0.0, 1e-6);
        let cfg = KalmanConfig::default();
        let imu = ImuSample {
            accel_body: [0.0, 9.81],
            gyro: 0.0,
        };
        let mut est = est0.clone();
        let mut last_trace = est.covariance.trace();
        for _ in 0..1000 {
            est = kalman_predict(&est, &imu, 9.81, &cfg, 1e-3).unwrap();
            let trace = est.covariance.trace();
            assert!(trace > last_trace, "trace must strictly increase");
            last_trace = trace;
        }
        // stationary + gravity-compensated: velocity stays zero
        assert_relative_eq!(est.mean[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(est.mean[3], 0.0, epsilon = 1e-12);
        assert_relative_eq!(est.mean[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn update_with_predicted_mean_shrinks_covariance() {
        let est = FusedEstimate::from_state([0.5, 1.0], [0.0, 0.0], 0.3, 0.0, 1e-2);
        let r = SensorNoise::default().pose_covariance();
        let updated = kalman_update(&est, ([0.5, 1.0], 0.3), &r).unwrap();
        assert_relative_eq!(updated.mean[0], est.mean[0], epsilon = 1e-12);
        assert_relative_eq!(updated.mean[4], est.mean[4], epsilon = 1e-12);
        // measured subspace contracts
        for idx in [0usize, 1, 4] {
            assert!(updated.covariance[(idx, idx)] < est.covariance[(idx, idx)]);
        }
    }

    #[test]
    fn update_wraps_angle_innovation() {
        let mut est = FusedEstimate::from_state([0.0, 0.0], [0.0, 0.0], 3.1, 0.0, 1e-2);
        // make the angle variance dominate so the mean moves visibly
        est.covariance[(4, 4)] = 10.0;
        let r = SensorNoise::default().pose_covariance();
        let updated = kalman_update(&est, ([0.0, 0.0], -3.1), &r).unwrap();
        // -3.1 rad is the same heading as +3.183; the innovation is the
        // wrapped +0.0832 rad, so the estimate moves up, not down by 6.2
        let innovation = wrap_angle(-3.1 - 3.1);
        assert_relative_eq!(innovation, 2.0 * std::f64::consts::PI - 6.2, epsilon = 1e-12);
        assert!(updated.mean[4] > 3.1 && updated.mean[4] < 3.25);
    }

    #[test]
    fn update_rejects_bad_measurement_noise() {
        let est = FusedEstimate::from_state([0.0, 0.0], [0.0, 0.0], 0.0, 0.0, 1e-2);
        let r = Matrix3::from_diagonal(&Vector3::new(1e-4, -1e-4, 1e-4));
        assert!(matches!(
            kalman_update(&est, ([0.0, 0.0], 0.0), &r),
            Err(ControlError::MeasurementNoiseNotPd)
        ));
    }

    #[test]
    fn repair_recovers_slightly_indefinite_covariance() {
        let mut est = FusedEstimate::from_state([0.0, 0.0], [0.0, 0.0], 0.0, 0.0, 1e-6);
        est.covariance[(0, 0)] = -1e-13; // tiny negative from roundoff
        est.covariance[(0, 1)] = 1e-14;
        assert!(est.repair_covariance().is_ok());
        assert!(est.covariance.cholesky().is_some());
        let mut bad = est.clone();
        bad.covariance[(2, 2)] = f64::NAN;
        assert!(bad.repair_covariance().is_err());
    }

    /// Full-rate fusion on a flip trajectory with matched sensor noise:
    /// position RMS must beat the raw pose noise, and the normalized
    /// estimation error squared must sit in the chi-square 95% band.
    #[test]
    fn monte_carlo_filter_consistency() {
        let body = BodyParams::default();
        let noise = SensorNoise::default();
        let cfg = KalmanConfig {
            accel_std: noise.accel_std,
            gyro_std: noise.gyro_std,
            process_floor: 0.0,
        };
        let r = noise.pose_covariance();
        let dt = 1e-3;
        let steps = 1500;
        let runs = 100;

        let mut nees_sum = 0.0;
        let mut pos_sq_sum = 0.0;
        let mut pos_samples = 0usize;

        for run in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + run as u64);
            let acc_n = Normal::new(0.0, noise.accel_std).unwrap();
            let gyro_n = Normal::new(0.0, noise.gyro_std).unwrap();
            let pos_n = Normal::new(0.0, noise.pos_std).unwrap();
            let ang_n = Normal::new(0.0, noise.angle_std).unwrap();

            let mut truth = RigidState {
                p: [1.2, 1.2],
                v: [0.0, 0.0],
                theta: 0.0,
                q: 0.0,
            };
            let mut est =
                FusedEstimate::from_state(truth.p, truth.v, truth.theta, truth.q, 1e-8);

            for k in 0..steps {
                let t = k as f64 * dt;
                // half-flip torque program: spin up, brake, settle
                let tau = if t < 0.25 {
                    0.6
                } else if t < 0.5 {
                    -0.6
                } else {
                    0.0
                };
                let wrench = WrenchCommand {
                    f: body.mass * body.gravity,
                    tau,
                };
                let prev = truth;
                truth = step(&truth, &wrench, &body, dt).unwrap();

                let a_world = [
                    (truth.v[0] - prev.v[0]) / dt,
                    (truth.v[1] - prev.v[1]) / dt,
                ];
                let (s, c) = prev.theta.sin_cos();
                let fx = a_world[0];
                let fy = a_world[1] + body.gravity;
                let imu = ImuSample {
                    accel_body: [
                        c * fx + s * fy + acc_n.sample(&mut rng),
                        -s * fx + c * fy + acc_n.sample(&mut rng),
                    ],
                    gyro: truth.q + gyro_n.sample(&mut rng),
                };
                est = kalman_predict(&est, &imu, body.gravity, &cfg, dt).unwrap();

                if (k + 1) % 10 == 0 {
                    let pose = (
                        [
                            truth.p[0] + pos_n.sample(&mut rng),
                            truth.p[1] + pos_n.sample(&mut rng),
                        ],
                        truth.theta + ang_n.sample(&mut rng),
                    );
                    est = kalman_update(&est, pose, &r).unwrap();
                }

                if k > steps / 2 {
                    let dx = est.mean[0] - truth.p[0];
                    let dy = est.mean[1] - truth.p[1];
                    pos_sq_sum += dx * dx + dy * dy;
                    pos_samples += 1;
                }
            }

            let err = Vector6::new(
                est.mean[0] - truth.p[0],
                est.mean[1] - truth.p[1],
                est.mean[2] - truth.v[0],
                est.mean[3] - truth.v[1],
                est.mean[4] - truth.theta,
                est.mean[5] - truth.q,
            );
            let p_inv = est
                .covariance
                .try_inverse()
                .expect("covariance invertible");
            nees_sum += (err.transpose() * p_inv * err)[(0, 0)];
        }

        let rms_pos = (pos_sq_sum / pos_samples as f64).sqrt();
        assert!(
            rms_pos < noise.pos_std,
            "fused position RMS {rms_pos:.5} m not below raw pose noise {:.5} m",
            noise.pos_std
        );

        // mean NEES over independent runs: runs * mean ~ chi-square with
        // runs * dim degrees of freedom
        let mean_nees = nees_sum / runs as f64;
        let dof = (runs * 6) as f64;
        let chi = statrs::distribution::ChiSquared::new(dof).unwrap();
        use statrs::distribution::ContinuousCDF;
        let lo = chi.inverse_cdf(0.025) / runs as f64;
        let hi = chi.inverse_cdf(0.975) / runs as f64;
        assert!(
            (lo..=hi).contains(&mean_nees),
            "mean NEES {mean_nees:.3} outside 95% band [{lo:.3}, {hi:.3}]"
        );
    }
}
