//! Variable-pitch propeller actuator: thrust and drag as functions of blade
//! pitch and rotational speed, the motor electrical model, the adaptive
//! pitch/RPM controller, the current-based pitch estimator, and least-squares
//! fitting of every coefficient from bench-sweep data.
//!
//! Model summary (all angles rad, speeds rad/s internally; RPM only at
//! module boundaries):
//!
//! ```text
//! T = k_T  w a                                  (thrust)
//! D = k_D1 w^2 + k_D2 w^2 a^2 + k_D3 w a        (drag torque)
//! i = (V - w/k_V) / R_m                         (motor current)
//! I_p dw/dt = (i - i0)/k_Q - D                  (rotor dynamics)
//! ```
//!
//! At constant speed the rotor balance inverts to the estimator
//! `a = sqrt(g0 (i - i0) + g1) - g2`, which recovers pitch (and through
//! `T = k_T w a` thrust) from current and speed alone. The inversion takes
//! the positive root, so it is valid for `a >= -g2`; the negative-pitch
//! branch is indistinguishable from its mirror image in current.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// rad/s per RPM.
pub const RPM_TO_RAD_S: f64 = std::f64::consts::TAU / 60.0;

pub fn rpm_to_rad_s(rpm: f64) -> f64 {
    rpm * RPM_TO_RAD_S
}

pub fn rad_s_to_rpm(rad_s: f64) -> f64 {
    rad_s / RPM_TO_RAD_S
}

#[derive(Debug, Error, PartialEq)]
pub enum ActuatorError {
    #[error("pitch {alpha} rad outside limits [{min}, {max}]")]
    PitchOutOfLimits { alpha: f64, min: f64, max: f64 },
    #[error("negative radicand {0} in pitch estimator (outside fitted envelope)")]
    NegativeRadicand(f64),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("Gauss-Newton did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
}

/// Aerodynamic coefficients of one variable-pitch propeller.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PropellerModel {
    /// Thrust coefficient, N s/rad per rad of pitch.
    pub k_t: f64,
    /// Drag torque coefficients (units per the drag polynomial).
    pub k_d1: f64,
    pub k_d2: f64,
    pub k_d3: f64,
    /// Admissible pitch range, rad; brackets zero (negative thrust is a VPP
    /// capability).
    pub pitch_min: f64,
    pub pitch_max: f64,
    /// Rotor moment of inertia, kg m^2.
    pub prop_inertia: f64,
}

impl Default for PropellerModel {
    /// Synthetic bench truth, sized so a 1 kg vehicle hovers at about
    /// 4.9 N per actuator at 4500 RPM (pitch ~0.26 rad).
    fn default() -> Self {
        Self {
            k_t: 0.04,
            k_d1: 6.0e-7,
            k_d2: 2.0e-6,
            k_d3: 6.0e-4,
            pitch_min: -0.7,
            pitch_max: 0.7,
            prop_inertia: 1.5e-4,
        }
    }
}

impl PropellerModel {
    pub fn check_pitch(&self, alpha: f64) -> Result<(), ActuatorError> {
        if alpha < self.pitch_min || alpha > self.pitch_max {
            return Err(ActuatorError::PitchOutOfLimits {
                alpha,
                min: self.pitch_min,
                max: self.pitch_max,
            });
        }
        Ok(())
    }

    pub fn clamp_pitch(&self, alpha: f64) -> f64 {
        alpha.clamp(self.pitch_min, self.pitch_max)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_t > 0.0) {
            return Err(format!("k_t must be > 0, got {}", self.k_t));
        }
        if self.k_d1 < 0.0 || self.k_d2 < 0.0 {
            return Err("k_d1 and k_d2 must be >= 0".into());
        }
        if !(self.pitch_min < self.pitch_max) || self.pitch_min > 0.0 || self.pitch_max < 0.0 {
            return Err("pitch limits must bracket 0 with min < max".into());
        }
        if !(self.prop_inertia > 0.0) {
            return Err("prop_inertia must be > 0".into());
        }
        Ok(())
    }
}

/// Electrical constants of the drive motor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MotorModel {
    /// Speed constant, rad/s per volt.
    pub kv: f64,
    /// Torque constant denominator: drive torque is `(i - i0) / kq`, so kq
    /// has units A/(N m).
    pub kq: f64,
    /// Winding resistance, ohm.
    pub r_m: f64,
    /// No-load current, A.
    pub i0: f64,
    /// Supply voltage ceiling, V.
    pub v_max: f64,
}

impl Default for MotorModel {
    fn default() -> Self {
        Self {
            kv: 104.72,
            kq: 104.72,
            r_m: 0.12,
            i0: 0.4,
            v_max: 16.0,
        }
    }
}

impl MotorModel {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("kv", self.kv),
            ("kq", self.kq),
            ("r_m", self.r_m),
            ("i0", self.i0),
            ("v_max", self.v_max),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be > 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Motor current at speed `omega` under voltage `v`.
    #[inline]
    pub fn current(&self, v: f64, omega: f64) -> f64 {
        (v - omega / self.kv) / self.r_m
    }
}

/// Coefficients of the current-based pitch estimator
/// `a = sqrt(g0 (i - i0) + g1) - g2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrustEstimatorCoeffs {
    /// rad^2 / A.
    pub g0: f64,
    /// rad^2.
    pub g1: f64,
    /// rad.
    pub g2: f64,
}

impl ThrustEstimatorCoeffs {
    /// Closed-form coefficients implied by the drag model at a fixed
    /// operating speed; used to seed the nonlinear fit and as the test
    /// oracle for the constant-speed simplification.
    pub fn from_models(prop: &PropellerModel, motor: &MotorModel, omega: f64) -> Self {
        let g2 = prop.k_d3 / (2.0 * prop.k_d2 * omega);
        Self {
            g0: 1.0 / (motor.kq * prop.k_d2 * omega * omega),
            g1: g2 * g2 - prop.k_d1 / prop.k_d2,
            g2,
        }
    }
}

/// RPM operating envelope of the actuator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RpmPolicy {
    /// Regulation setpoint, RPM.
    pub target_rpm: f64,
    /// Floor below which thrust authority is insufficient, RPM.
    pub min_rpm: f64,
    /// Ceiling above which blade vibration grows rapidly, RPM.
    pub vibration_rpm: f64,
}

impl Default for RpmPolicy {
    fn default() -> Self {
        Self {
            target_rpm: 4500.0,
            min_rpm: 4000.0,
            vibration_rpm: 5000.0,
        }
    }
}

impl RpmPolicy {
    pub fn target_omega(&self) -> f64 {
        rpm_to_rad_s(self.target_rpm)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_rpm < self.target_rpm && self.target_rpm < self.vibration_rpm) {
            return Err(format!(
                "require min_rpm < target_rpm < vibration_rpm, got {} / {} / {}",
                self.min_rpm, self.target_rpm, self.vibration_rpm
            ));
        }
        Ok(())
    }
}

/// Thrust `T = k_T w a`.
pub fn propeller_thrust(omega: f64, alpha: f64, model: &PropellerModel) -> Result<f64, ActuatorError> {
    model.check_pitch(alpha)?;
    Ok(model.k_t * omega * alpha)
}

/// Drag torque `D = k_D1 w^2 + k_D2 w^2 a^2 + k_D3 w a`.
pub fn propeller_drag(omega: f64, alpha: f64, model: &PropellerModel) -> Result<f64, ActuatorError> {
    model.check_pitch(alpha)?;
    Ok(drag_unchecked(omega, alpha, model))
}

#[inline]
fn drag_unchecked(omega: f64, alpha: f64, model: &PropellerModel) -> f64 {
    let w2 = omega * omega;
    model.k_d1 * w2 + model.k_d2 * w2 * alpha * alpha + model.k_d3 * omega * alpha
}

/// One Euler step of the rotor speed ODE under applied voltage.
/// Returns the new speed (clamped at zero) and the motor current.
pub fn motor_step(
    omega: f64,
    alpha: f64,
    v: f64,
    motor: &MotorModel,
    prop: &PropellerModel,
    dt: f64,
) -> (f64, f64) {
    debug_assert!((0.0..=motor.v_max).contains(&v));
    let i = motor.current(v, omega);
    let torque = (i - motor.i0) / motor.kq - drag_unchecked(omega, alpha, prop);
    let omega_next = (omega + dt * torque / prop.prop_inertia).max(0.0);
    (omega_next, i)
}

/// Full pitch-from-telemetry expression including the acceleration term;
/// reference for the constant-speed simplification, not used in control.
pub fn pitch_from_current_full(
    i: f64,
    omega: f64,
    omega_dot: f64,
    motor: &MotorModel,
    prop: &PropellerModel,
) -> Result<f64, ActuatorError> {
    let half = prop.k_d3 / (2.0 * prop.k_d2 * omega);
    let radicand = ((i - motor.i0) / motor.kq - prop.k_d1 * omega * omega
        - prop.prop_inertia * omega_dot)
        / (prop.k_d2 * omega * omega)
        + half * half;
    if radicand < 0.0 {
        return Err(ActuatorError::NegativeRadicand(radicand));
    }
    Ok(radicand.sqrt() - half)
}

/// Constant-speed pitch estimate `a = sqrt(g0 (i - i0) + g1) - g2`.
pub fn estimate_pitch_from_current(
    i: f64,
    coeffs: &ThrustEstimatorCoeffs,
    i0: f64,
) -> Result<f64, ActuatorError> {
    let radicand = coeffs.g0 * (i - i0) + coeffs.g1;
    if radicand < 0.0 {
        return Err(ActuatorError::NegativeRadicand(radicand));
    }
    Ok(radicand.sqrt() - coeffs.g2)
}

/// PI gains of the RPM regulation loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RpmPiGains {
    /// V per rad/s.
    pub kp: f64,
    /// V per rad.
    pub ki: f64,
}

impl Default for RpmPiGains {
    fn default() -> Self {
        Self { kp: 0.08, ki: 1.2 }
    }
}

/// Adaptive pitch/RPM controller for one VPP actuator.
///
/// Pitch realizes the thrust command at the target speed; voltage holds the
/// speed with a drag-compensating feedforward plus PI feedback. Both outputs
/// saturate (pitch to its mechanical limits, voltage to `[0, v_max]`) and
/// the integrator freezes while the voltage is saturated.
#[derive(Debug, Clone)]
pub struct AdaptiveThrustController {
    pub prop: PropellerModel,
    pub motor: MotorModel,
    pub policy: RpmPolicy,
    pub gains: RpmPiGains,
    integral: f64,
}

impl AdaptiveThrustController {
    pub fn new(prop: PropellerModel, motor: MotorModel, policy: RpmPolicy, gains: RpmPiGains) -> Self {
        Self {
            prop,
            motor,
            policy,
            gains,
            integral: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
    }

    /// Feedforward voltage that holds `omega` at steady state with pitch
    /// `alpha`: no-load term plus drag compensation.
    pub fn feedforward_voltage(&self, omega: f64, alpha: f64) -> f64 {
        let i_ss = self.motor.i0 + self.motor.kq * drag_unchecked(omega, alpha, &self.prop);
        omega / self.motor.kv + i_ss * self.motor.r_m
    }

    /// Compute the pitch and voltage commands for a thrust command, given
    /// the measured rotor speed. `dt` is the controller period.
    pub fn command(&mut self, t_cmd: f64, omega_meas: f64, dt: f64) -> (f64, f64) {
        let omega_t = self.policy.target_omega();
        let alpha_cmd = self.prop.clamp_pitch(t_cmd / (self.prop.k_t * omega_t));
        let err = omega_t - omega_meas;
        let v_raw = self.feedforward_voltage(omega_t, alpha_cmd)
            + self.gains.kp * err
            + self.gains.ki * self.integral;
        let v_cmd = v_raw.clamp(0.0, self.motor.v_max);
        if v_cmd == v_raw {
            self.integral += err * dt;
        }
        (alpha_cmd, v_cmd)
    }

    /// Current-based thrust estimate at the measured speed, via the
    /// constant-speed pitch inversion.
    pub fn estimate_thrust(
        &self,
        i_meas: f64,
        omega_meas: f64,
        coeffs: &ThrustEstimatorCoeffs,
    ) -> Result<f64, ActuatorError> {
        let alpha = estimate_pitch_from_current(i_meas, coeffs, self.motor.i0)?;
        Ok(self.prop.k_t * omega_meas * alpha)
    }
}

/// Speed disturbance as a function of blade pitch:
/// `w' = w (1 + sum_k c_k a^k)`, coefficients indexed from k = 0.
pub fn pitch_disturbance(omega_nominal: f64, alpha: f64, poly: &[f64]) -> f64 {
    let mut factor = 1.0;
    let mut a_pow = 1.0;
    for &c in poly {
        factor += c * a_pow;
        a_pow *= alpha;
    }
    omega_nominal * factor
}

/// One bench measurement row (`omega_rpm, alpha_rad, thrust_n, current_a`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchSample {
    pub omega_rpm: f64,
    pub alpha_rad: f64,
    pub thrust_n: f64,
    pub current_a: f64,
}

/// Steady-state bench sweep generated from ground-truth models over an
/// RPM x pitch grid. For the pitch-estimator coefficients to be fittable
/// the grid must include the RPM policy's target speed (the estimator is
/// only valid there).
pub fn generate_bench_sweep(
    prop: &PropellerModel,
    motor: &MotorModel,
    rpm_grid: &[f64],
    alpha_grid: &[f64],
) -> Vec<BenchSample> {
    let mut out = Vec::with_capacity(rpm_grid.len() * alpha_grid.len());
    for &rpm in rpm_grid {
        let omega = rpm_to_rad_s(rpm);
        for &alpha in alpha_grid {
            let drag = drag_unchecked(omega, alpha, prop);
            out.push(BenchSample {
                omega_rpm: rpm,
                alpha_rad: alpha,
                thrust_n: prop.k_t * omega * alpha,
                current_a: motor.i0 + motor.kq * drag,
            });
        }
    }
    out
}

/// Result of the thrust/drag/estimator fit.
#[derive(Debug, Clone)]
pub struct ThrustFit {
    pub k_t: f64,
    pub k_d1: f64,
    pub k_d2: f64,
    pub k_d3: f64,
    pub estimator: ThrustEstimatorCoeffs,
    /// RMS of the thrust-model residual, N.
    pub thrust_rms: f64,
    /// RMS of the drag-balance residual, N m.
    pub drag_rms: f64,
    /// RMS of the pitch-estimator residual at the target RPM, rad.
    pub estimator_rms: f64,
    pub gauss_newton_iterations: usize,
}

const GN_MAX_ITERATIONS: usize = 50;
const GN_STEP_TOLERANCE: f64 = 1e-10;
/// Samples within this many RPM of the target feed the estimator fit.
const TARGET_RPM_WINDOW: f64 = 1.0;

/// Fit the propeller thrust/drag coefficients and the pitch-estimator
/// coefficients from bench data.
///
/// `k_T` comes from linear least squares on `T = k_T w a`; the drag
/// coefficients from linear least squares on the steady-state balance
/// `(i - i0)/k_Q = D(w, a)`; `(g0, g1, g2)` from Gauss-Newton on the pitch
/// residual over the target-RPM subset, seeded with the closed-form values
/// implied by the drag fit (iteration cap 50, step tolerance 1e-12).
pub fn fit_thrust_coeffs(
    samples: &[BenchSample],
    motor: &MotorModel,
    policy: &RpmPolicy,
) -> Result<ThrustFit, ActuatorError> {
    const MIN_SAMPLES: usize = 10;
    if samples.len() < MIN_SAMPLES {
        return Err(ActuatorError::InsufficientSamples {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let alpha_lo = samples.iter().map(|s| s.alpha_rad).fold(f64::INFINITY, f64::min);
    let alpha_hi = samples.iter().map(|s| s.alpha_rad).fold(f64::NEG_INFINITY, f64::max);
    if alpha_hi - alpha_lo < 1e-6 {
        return Err(ActuatorError::DegenerateData(
            "samples do not span a pitch range".into(),
        ));
    }

    // k_T: one-parameter least squares on x = w a.
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for s in samples {
        let x = rpm_to_rad_s(s.omega_rpm) * s.alpha_rad;
        sxx += x * x;
        sxy += x * s.thrust_n;
    }
    if sxx < 1e-12 {
        return Err(ActuatorError::RankDeficient("thrust regressor w*a is identically zero".into()));
    }
    let k_t = sxy / sxx;
    let thrust_rms = {
        let sse: f64 = samples
            .iter()
            .map(|s| {
                let r = s.thrust_n - k_t * rpm_to_rad_s(s.omega_rpm) * s.alpha_rad;
                r * r
            })
            .sum();
        (sse / samples.len() as f64).sqrt()
    };

    // Drag coefficients: y = (i - i0)/kq against [w^2, w^2 a^2, w a].
    let n = samples.len();
    let mut design = nalgebra::DMatrix::<f64>::zeros(n, 3);
    let mut target = nalgebra::DVector::<f64>::zeros(n);
    for (j, s) in samples.iter().enumerate() {
        let w = rpm_to_rad_s(s.omega_rpm);
        design[(j, 0)] = w * w;
        design[(j, 1)] = w * w * s.alpha_rad * s.alpha_rad;
        design[(j, 2)] = w * s.alpha_rad;
        target[j] = (s.current_a - motor.i0) / motor.kq;
    }
    // Column scaling keeps the rank check meaningful despite the disparate
    // magnitudes of w^2 and w*a.
    let mut scales = [0.0f64; 3];
    for c in 0..3 {
        scales[c] = design.column(c).norm().max(1e-300);
        for j in 0..n {
            design[(j, c)] /= scales[c];
        }
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin < 1e-10 * smax {
        return Err(ActuatorError::RankDeficient(format!(
            "drag design matrix condition {:e}",
            smax / smin
        )));
    }
    let sol = svd
        .solve(&target, 0.0)
        .map_err(|e| ActuatorError::RankDeficient(e.to_string()))?;
    let k_d1 = sol[0] / scales[0];
    let k_d2 = sol[1] / scales[1];
    let k_d3 = sol[2] / scales[2];
    let drag_rms = {
        let mut sse = 0.0;
        for s in samples {
            let w = rpm_to_rad_s(s.omega_rpm);
            let pred = k_d1 * w * w + k_d2 * w * w * s.alpha_rad * s.alpha_rad + k_d3 * w * s.alpha_rad;
            let r = (s.current_a - motor.i0) / motor.kq - pred;
            sse += r * r;
        }
        (sse / n as f64).sqrt()
    };

    // Estimator coefficients: Gauss-Newton at the target-RPM subset. Only
    // non-negative pitches participate: the square-root inversion returns
    // the positive branch, so negative-pitch samples beyond -g2 sit on the
    // mirror branch and would poison the fit.
    let subset: Vec<&BenchSample> = samples
        .iter()
        .filter(|s| {
            (s.omega_rpm - policy.target_rpm).abs() <= TARGET_RPM_WINDOW && s.alpha_rad >= 0.0
        })
        .collect();
    if subset.len() < 4 {
        return Err(ActuatorError::DegenerateData(format!(
            "estimator fit needs >= 4 samples at the target RPM, got {}",
            subset.len()
        )));
    }
    let fitted_prop = PropellerModel {
        k_t,
        k_d1,
        k_d2,
        k_d3,
        ..PropellerModel::default()
    };
    let seed = ThrustEstimatorCoeffs::from_models(&fitted_prop, motor, policy.target_omega());
    let (estimator, iterations, estimator_rms) =
        gauss_newton_estimator(&subset, motor.i0, seed)?;

    Ok(ThrustFit {
        k_t,
        k_d1,
        k_d2,
        k_d3,
        estimator,
        thrust_rms,
        drag_rms,
        estimator_rms,
        gauss_newton_iterations: iterations,
    })
}

/// Gauss-Newton refinement of `(g0, g1, g2)` on residuals
/// `sqrt(g0 (i - i0) + g1) - g2 - alpha`.
fn gauss_newton_estimator(
    subset: &[&BenchSample],
    i0: f64,
    seed: ThrustEstimatorCoeffs,
) -> Result<(ThrustEstimatorCoeffs, usize, f64), ActuatorError> {
    let mut g = nalgebra::Vector3::new(seed.g0, seed.g1, seed.g2);
    let radicand_ok = |g: &nalgebra::Vector3<f64>| {
        subset.iter().all(|s| g[0] * (s.current_a - i0) + g[1] > 0.0)
    };
    if !radicand_ok(&g) {
        return Err(ActuatorError::DegenerateData(
            "estimator seed produces non-positive radicand".into(),
        ));
    }
    let rms = |g: &nalgebra::Vector3<f64>| {
        let sse: f64 = subset
            .iter()
            .map(|s| {
                let r = (g[0] * (s.current_a - i0) + g[1]).sqrt() - g[2] - s.alpha_rad;
                r * r
            })
            .sum();
        (sse / subset.len() as f64).sqrt()
    };
    let mut iterations = 0;
    for iter in 1..=GN_MAX_ITERATIONS {
        iterations = iter;
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = nalgebra::Vector3::<f64>::zeros();
        for s in subset {
            let di = s.current_a - i0;
            let root = (g[0] * di + g[1]).sqrt();
            let r = root - g[2] - s.alpha_rad;
            let jac = nalgebra::Vector3::new(di / (2.0 * root), 1.0 / (2.0 * root), -1.0);
            jtj += jac * jac.transpose();
            jtr += jac * r;
        }
        let delta = jtj
            .lu()
            .solve(&jtr)
            .ok_or_else(|| ActuatorError::RankDeficient("singular Gauss-Newton normal matrix".into()))?;
        // Halve the step while it would leave the admissible region.
        let mut scale = 1.0;
        let mut next = g - delta;
        let mut halvings = 0;
        while !radicand_ok(&next) {
            scale *= 0.5;
            halvings += 1;
            if halvings > 30 {
                return Err(ActuatorError::NonConvergence(iter));
            }
            next = g - delta * scale;
        }
        g = next;
        if (delta * scale).norm() <= GN_STEP_TOLERANCE * (1.0 + g.norm()) {
            break;
        }
        if iter == GN_MAX_ITERATIONS {
            return Err(ActuatorError::NonConvergence(GN_MAX_ITERATIONS));
        }
    }
    let coeffs = ThrustEstimatorCoeffs {
        g0: g[0],
        g1: g[1],
        g2: g[2],
    };
    Ok((coeffs, iterations, rms(&g)))
}

/// One drag bench record: net commanded force along the motion axis,
/// measured acceleration along that axis, and velocity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DragSample {
    pub force_n: f64,
    pub accel: f64,
    pub velocity: f64,
}

/// Scalar least squares for the quadratic drag coefficient on the residual
/// force `f - m a = k_d |v| v`.
pub fn fit_drag_coeff(samples: &[DragSample], mass: f64) -> Result<f64, ActuatorError> {
    const MIN_SAMPLES: usize = 5;
    if samples.len() < MIN_SAMPLES {
        return Err(ActuatorError::InsufficientSamples {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for s in samples {
        let x = s.velocity.abs() * s.velocity;
        sxx += x * x;
        sxy += x * (s.force_n - mass * s.accel);
    }
    if sxx <= 0.0 {
        return Err(ActuatorError::DegenerateData(
            "all sample velocities are zero".into(),
        ));
    }
    Ok(sxy / sxx)
}

/// Polynomial least squares for the pitch-dependent speed disturbance.
/// Samples are `(alpha, omega_measured / omega_nominal)`; returns `c_0..c_d`
/// with the model `ratio = 1 + sum c_k a^k`.
pub fn fit_pitch_disturbance(
    samples: &[(f64, f64)],
    degree: usize,
) -> Result<Vec<f64>, ActuatorError> {
    let n = samples.len();
    let cols = degree + 1;
    if n < cols + 1 {
        return Err(ActuatorError::InsufficientSamples {
            needed: cols + 1,
            got: n,
        });
    }
    let mut design = nalgebra::DMatrix::<f64>::zeros(n, cols);
    let mut target = nalgebra::DVector::<f64>::zeros(n);
    for (j, &(alpha, ratio)) in samples.iter().enumerate() {
        let mut a_pow = 1.0;
        for c in 0..cols {
            design[(j, c)] = a_pow;
            a_pow *= alpha;
        }
        target[j] = ratio - 1.0;
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin < 1e-10 * smax {
        return Err(ActuatorError::RankDeficient(
            "disturbance design matrix is rank deficient (pitch grid too narrow)".into(),
        ));
    }
    let sol = svd
        .solve(&target, 0.0)
        .map_err(|e| ActuatorError::RankDeficient(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}
