//! Observation construction, the decayed position-error integral, and the
//! five-term tracking reward.

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, RigidState};

/// Which channels the policy sees. The four setups differ only here — same
/// reward, same dynamics, same everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsLayout {
    /// Wrapped scalar angle, no integral channels (6 inputs).
    VA,
    /// sin/cos angle encoding, no integral channels (7 inputs).
    TA,
    /// Wrapped scalar angle plus integral channels (8 inputs).
    PI,
    /// sin/cos encoding plus integral channels (9 inputs).
    All,
}

impl ObsLayout {
    pub fn dim(&self) -> usize {
        match self {
            ObsLayout::VA => 6,
            ObsLayout::TA => 7,
            ObsLayout::PI => 8,
            ObsLayout::All => 9,
        }
    }

    pub fn uses_trig_angle(&self) -> bool {
        matches!(self, ObsLayout::TA | ObsLayout::All)
    }

    pub fn uses_integral(&self) -> bool {
        matches!(self, ObsLayout::PI | ObsLayout::All)
    }
}

impl std::str::FromStr for ObsLayout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "VA" | "va" => Ok(ObsLayout::VA),
            "TA" | "ta" => Ok(ObsLayout::TA),
            "PI" | "pi" => Ok(ObsLayout::PI),
            "All" | "ALL" | "all" => Ok(ObsLayout::All),
            other => Err(format!("unknown setup '{other}' (expected VA, TA, PI, or All)")),
        }
    }
}

impl std::fmt::Display for ObsLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObsLayout::VA => "VA",
            ObsLayout::TA => "TA",
            ObsLayout::PI => "PI",
            ObsLayout::All => "All",
        };
        f.write_str(s)
    }
}

/// Position and attitude setpoint at one instant.
#[derive(Debug, Clone, Copy)]
pub struct TargetState {
    pub p_t: [f64; 2],
    /// Unwrapped target angle (flip profiles pass through multiples of pi).
    pub theta_t: f64,
}

/// Full observation in canonical channel order; layouts project out of it.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub dp: [f64; 2],
    pub v: [f64; 2],
    /// Wrapped relative angle (scalar-angle layouts expose this directly,
    /// with its discontinuity at +/-pi — the ablation point).
    pub dth: f64,
    pub sin_dth: f64,
    pub cos_dth: f64,
    pub q: f64,
    pub gp: [f64; 2],
}

impl Observation {
    /// Project into the channel vector a given setup feeds its policy.
    /// Canonical full order: [dpx, dpy, vx, vy, sin, cos, q, gpx, gpy].
    pub fn write_vec(&self, layout: ObsLayout, out: &mut [f64]) {
        debug_assert_eq!(out.len(), layout.dim());
        out[0] = self.dp[0];
        out[1] = self.dp[1];
        out[2] = self.v[0];
        out[3] = self.v[1];
        let mut k = 4;
        if layout.uses_trig_angle() {
            out[k] = self.sin_dth;
            out[k + 1] = self.cos_dth;
            k += 2;
        } else {
            out[k] = self.dth;
            k += 1;
        }
        out[k] = self.q;
        k += 1;
        if layout.uses_integral() {
            out[k] = self.gp[0];
            out[k + 1] = self.gp[1];
        }
    }

    pub fn to_vec(&self, layout: ObsLayout) -> Vec<f64> {
        let mut v = vec![0.0; layout.dim()];
        self.write_vec(layout, &mut v);
        v
    }
}

/// Decayed accumulator of the position error:
/// `acc <- gamma * acc + dp`, the recursive form of `sum gamma^n dp(n)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntegralState {
    pub gamma: f64,
    pub accumulator: [f64; 2],
}

impl Default for IntegralState {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            accumulator: [0.0, 0.0],
        }
    }
}

impl IntegralState {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        Ok(())
    }
}

/// Fold one position error into the integral.
pub fn update_integral(integ: &IntegralState, dp: [f64; 2]) -> IntegralState {
    IntegralState {
        gamma: integ.gamma,
        accumulator: [
            integ.gamma * integ.accumulator[0] + dp[0],
            integ.gamma * integ.accumulator[1] + dp[1],
        ],
    }
}

/// Build the observation for one vehicle against the current target.
pub fn build_observation(
    state: &RigidState,
    target: &TargetState,
    integ: &IntegralState,
) -> Observation {
    debug_assert!(state.is_finite());
    let dth = wrap_angle(target.theta_t - state.theta);
    let (sin_dth, cos_dth) = dth.sin_cos();
    Observation {
        dp: [target.p_t[0] - state.p[0], target.p_t[1] - state.p[1]],
        v: state.v,
        dth,
        sin_dth,
        cos_dth,
        q: state.q,
        gp: integ.accumulator,
    }
}

/// Weights of the five reward terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_p: f64,
    pub w_o: f64,
    pub w_v: f64,
    pub w_omega: f64,
    pub w_i: f64,
}

impl Default for RewardWeights {
    /// Flip-maneuver weighting: position and orientation dominate.
    fn default() -> Self {
        Self {
            w_p: 0.8,
            w_o: 0.8,
            w_v: 0.2,
            w_omega: 0.2,
            w_i: 0.2,
        }
    }
}

impl RewardWeights {
    pub fn sum(&self) -> f64 {
        self.w_p + self.w_o + self.w_v + self.w_omega + self.w_i
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [
            ("w_p", self.w_p),
            ("w_o", self.w_o),
            ("w_v", self.w_v),
            ("w_omega", self.w_omega),
            ("w_i", self.w_i),
        ] {
            if w < 0.0 {
                return Err(format!("{name} must be >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

/// The individual reward terms, each in [0, 1]. The velocity and
/// angular-rate terms carry the position-reward factor, so holding still
/// far from the target earns little.
#[derive(Debug, Clone, Copy, Default)]
pub struct RewardTerms {
    pub r_p: f64,
    pub r_o: f64,
    pub r_v: f64,
    pub r_omega: f64,
    pub r_i: f64,
}

/// Five-term tracking reward.
///
/// `R = w_p r_p + r_p (w_o r_o + w_v s_v + w_omega s_omega) + w_i r_i`
/// with `s_v = 1/(1+|v|^2)` and `s_omega = 1/(1+q^2)`; the reported terms
/// fold the position factor in: `r_v = r_p s_v`, `r_omega = r_p s_omega`.
pub fn reward(
    state: &RigidState,
    target: &TargetState,
    integ: &IntegralState,
    weights: &RewardWeights,
) -> (f64, RewardTerms) {
    let dp = [target.p_t[0] - state.p[0], target.p_t[1] - state.p[1]];
    let dth = target.theta_t - state.theta;
    let r_p = 1.0 / (1.0 + 10.0 * (dp[0] * dp[0] + dp[1] * dp[1]));
    let r_o = 0.5 * (1.0 + dth.cos());
    let s_v = 1.0 / (1.0 + state.v[0] * state.v[0] + state.v[1] * state.v[1]);
    let s_omega = 1.0 / (1.0 + state.q * state.q);
    let gp = integ.accumulator;
    let r_i = 1.0 / (1.0 + gp[0] * gp[0] + gp[1] * gp[1]);
    let terms = RewardTerms {
        r_p,
        r_o,
        r_v: r_p * s_v,
        r_omega: r_p * s_omega,
        r_i,
    };
    let total = weights.w_p * r_p
        + r_p * (weights.w_o * r_o + weights.w_v * s_v + weights.w_omega * s_omega)
        + weights.w_i * r_i;
    (total, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state_at(p: [f64; 2], v: [f64; 2], theta: f64, q: f64) -> RigidState {
        RigidState { p, v, theta, q }
    }

    #[test]
    fn observation_at_target_is_unit_cos() {
        let target = TargetState {
            p_t: [1.2, 1.2],
            theta_t: 0.0,
        };
        let obs = build_observation(
            &state_at([1.2, 1.2], [0.0, 0.0], 0.0, 0.0),
            &target,
            &IntegralState::default(),
        );
        assert_eq!(
            obs.to_vec(ObsLayout::All),
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn observation_relative_position_example() {
        let target = TargetState {
            p_t: [1.2, 1.25],
            theta_t: 0.0,
        };
        let obs = build_observation(
            &state_at([0.0, 1.0], [0.0, 0.0], 0.0, 0.0),
            &target,
            &IntegralState::default(),
        );
        assert_relative_eq!(obs.dp[0], 1.2);
        assert_relative_eq!(obs.dp[1], 0.25);
    }

    #[test]
    fn observation_is_continuous_across_angle_wrap() {
        let target = TargetState {
            p_t: [1.2, 1.2],
            theta_t: std::f64::consts::PI,
        };
        let integ = IntegralState::default();
        // relative angle +pi and -pi describe the same attitude
        let a = build_observation(&state_at([1.0, 1.0], [0.1, 0.2], 0.0, 0.3), &target, &integ);
        let b = build_observation(
            &state_at([1.0, 1.0], [0.1, 0.2], 2.0 * std::f64::consts::PI, 0.3),
            &target,
            &integ,
        );
        let va = a.to_vec(ObsLayout::TA);
        let vb = b.to_vec(ObsLayout::TA);
        for (x, y) in va.iter().zip(vb.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn observation_trig_channels_stay_on_unit_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let integ = IntegralState::default();
        for _ in 0..1000 {
            let target = TargetState {
                p_t: [rng.random_range(0.0..2.4), rng.random_range(0.0..2.4)],
                theta_t: rng.random_range(-20.0..20.0),
            };
            let state = state_at(
                [rng.random_range(0.0..2.4), rng.random_range(0.0..2.4)],
                [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                rng.random_range(-20.0..20.0),
                rng.random_range(-12.0..12.0),
            );
            let obs = build_observation(&state, &target, &integ);
            assert_relative_eq!(
                obs.sin_dth * obs.sin_dth + obs.cos_dth * obs.cos_dth,
                1.0,
                epsilon = 1e-12
            );
            assert!(obs.dth > -std::f64::consts::PI && obs.dth <= std::f64::consts::PI);
        }
    }

    #[test]
    fn layout_dims_and_projection() {
        let obs = Observation {
            dp: [1.0, 2.0],
            v: [3.0, 4.0],
            dth: 0.5,
            sin_dth: 0.5f64.sin(),
            cos_dth: 0.5f64.cos(),
            q: 7.0,
            gp: [8.0, 9.0],
        };
        assert_eq!(obs.to_vec(ObsLayout::VA), vec![1.0, 2.0, 3.0, 4.0, 0.5, 7.0]);
        assert_eq!(
            obs.to_vec(ObsLayout::TA),
            vec![1.0, 2.0, 3.0, 4.0, 0.5f64.sin(), 0.5f64.cos(), 7.0]
        );
        assert_eq!(
            obs.to_vec(ObsLayout::PI),
            vec![1.0, 2.0, 3.0, 4.0, 0.5, 7.0, 8.0, 9.0]
        );
        assert_eq!(obs.to_vec(ObsLayout::All).len(), 9);
    }

    #[test]
    fn integral_examples() {
        let zero = IntegralState::default();
        let next = update_integral(&zero, [0.0, 0.0]);
        assert_eq!(next.accumulator, [0.0, 0.0]);

        // dp = [1, 1, 1] -> 1, 1.9, 2.71
        let mut integ = IntegralState::default();
        let expect = [1.0, 1.9, 2.71];
        for e in expect {
            integ = update_integral(&integ, [1.0, 0.0]);
            assert_relative_eq!(integ.accumulator[0], e, epsilon = 1e-12);
        }

        // constant dp converges to dp / (1 - gamma) = 10 dp
        let mut integ = IntegralState::default();
        for _ in 0..500 {
            integ = update_integral(&integ, [0.3, -0.2]);
        }
        assert_relative_eq!(integ.accumulator[0], 3.0, epsilon = 1e-9);
        assert_relative_eq!(integ.accumulator[1], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn integral_norm_stays_below_geometric_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dp_max = 1.7f64;
        let bound = dp_max * 2.0f64.sqrt() / (1.0 - 0.9);
        let mut integ = IntegralState::default();
        for _ in 0..20_000 {
            let dp = [
                rng.random_range(-dp_max..dp_max),
                rng.random_range(-dp_max..dp_max),
            ];
            integ = update_integral(&integ, dp);
            let norm = (integ.accumulator[0].powi(2) + integ.accumulator[1].powi(2)).sqrt();
            assert!(norm <= bound + 1e-9);
        }
    }

    #[test]
    fn reward_perfect_state_hits_weight_sum() {
        let target = TargetState {
            p_t: [1.2, 1.2],
            theta_t: 0.0,
        };
        let w = RewardWeights::default();
        let (total, terms) = reward(
            &state_at([1.2, 1.2], [0.0, 0.0], 0.0, 0.0),
            &target,
            &IntegralState::default(),
            &w,
        );
        assert_relative_eq!(total, w.sum(), epsilon = 1e-12);
        for t in [terms.r_p, terms.r_o, terms.r_v, terms.r_omega, terms.r_i] {
            assert_relative_eq!(t, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn reward_orientation_zero_at_half_turn() {
        let target = TargetState {
            p_t: [1.2, 1.2],
            theta_t: std::f64::consts::PI,
        };
        let (_, terms) = reward(
            &state_at([1.2, 1.2], [0.0, 0.0], 0.0, 0.0),
            &target,
            &IntegralState::default(),
            &RewardWeights::default(),
        );
        assert_relative_eq!(terms.r_o, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn reward_worked_flip_example() {
        // |dp| chosen so 10 |dp|^2 = 1 exactly: r_p = 0.5; all other errors
        // zero; flip weights -> R = 0.8*0.5 + 0.5*(0.8 + 0.2 + 0.2) + 0.2
        let dp = (0.1f64).sqrt();
        let target = TargetState {
            p_t: [1.2 + dp, 1.2],
            theta_t: 0.0,
        };
        let (total, terms) = reward(
            &state_at([1.2, 1.2], [0.0, 0.0], 0.0, 0.0),
            &target,
            &IntegralState::default(),
            &RewardWeights {
                w_p: 0.8,
                w_o: 0.8,
                w_v: 0.2,
                w_omega: 0.2,
                w_i: 0.2,
            },
        );
        assert_relative_eq!(terms.r_p, 0.5, epsilon = 1e-12);
        assert_relative_eq!(total, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn reward_terms_bounded_and_total_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = RewardWeights::default();
        for _ in 0..10_000 {
            let target = TargetState {
                p_t: [rng.random_range(0.0..2.4), rng.random_range(0.0..2.4)],
                theta_t: rng.random_range(-10.0..10.0),
            };
            let state = state_at(
                [rng.random_range(-1.0..3.4), rng.random_range(-1.0..3.4)],
                [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                rng.random_range(-10.0..10.0),
                rng.random_range(-15.0..15.0),
            );
            let integ = IntegralState {
                gamma: 0.9,
                accumulator: [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
            };
            let (total, terms) = reward(&state, &target, &integ, &w);
            for t in [terms.r_p, terms.r_o, terms.r_v, terms.r_omega, terms.r_i] {
                assert!((0.0..=1.0).contains(&t), "term {t} out of [0,1]");
            }
            assert!((0.0..=w.sum()).contains(&total));
        }
    }

    #[test]
    fn reward_invariant_under_full_turn() {
        let w = RewardWeights::default();
        let integ = IntegralState::default();
        let state = state_at([1.0, 1.1], [0.2, -0.1], 0.7, 1.0);
        let t1 = TargetState {
            p_t: [1.2, 1.2],
            theta_t: 2.5,
        };
        let t2 = TargetState {
            p_t: [1.2, 1.2],
            theta_t: 2.5 + 2.0 * std::f64::consts::PI,
        };
        let (r1, _) = reward(&state, &t1, &integ, &w);
        let (r2, _) = reward(&state, &t2, &integ, &w);
        assert_relative_eq!(r1, r2, epsilon = 1e-12);
    }

    #[test]
    fn reward_monotonicity_in_position_and_angle() {
        let w = RewardWeights::default();
        let integ = IntegralState::default();
        let mut last_rp = f64::INFINITY;
        for k in 0..50 {
            let d = k as f64 * 0.05;
            let target = TargetState {
                p_t: [1.2 + d, 1.2],
                theta_t: 0.0,
            };
            let (_, terms) = reward(
                &state_at([1.2, 1.2], [0.0, 0.0], 0.0, 0.0),
                &target,
                &integ,
                &w,
            );
            assert!(terms.r_p < last_rp || k == 0);
            last_rp = terms.r_p;
        }
        let mut last_ro = f64::INFINITY;
        for k in 0..50 {
            let a = 1e-3 + k as f64 * (std::f64::consts::PI - 2e-3) / 49.0;
            let target = TargetState {
                p_t: [1.2, 1.2],
                theta_t: a,
            };
            let (_, terms) = reward(
                &state_at([1.2, 1.2], [0.0, 0.0], 0.0, 0.0),
                &target,
                &integ,
                &w,
            );
            assert!(terms.r_o < last_ro || k == 0);
            last_ro = terms.r_o;
        }
    }
}
