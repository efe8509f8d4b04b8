//! Task definitions: target profiles for hover, the two flip maneuvers and
//! wall-backtrack, crash/success rules, and the training difficulty
//! schedule.

use serde::{Deserialize, Serialize};

use super::obs::{RewardWeights, TargetState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Hover,
    FlipHalf,
    FlipFull,
    WallBacktrack,
}

impl std::str::FromStr for TaskName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hover" => Ok(TaskName::Hover),
            "flip_half" => Ok(TaskName::FlipHalf),
            "flip_full" => Ok(TaskName::FlipFull),
            "wall_backtrack" => Ok(TaskName::WallBacktrack),
            other => Err(format!(
                "unknown task '{other}' (expected hover, flip_half, flip_full, wall_backtrack)"
            )),
        }
    }
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskName::Hover => "hover",
            TaskName::FlipHalf => "flip_half",
            TaskName::FlipFull => "flip_full",
            TaskName::WallBacktrack => "wall_backtrack",
        };
        f.write_str(s)
    }
}

/// Workspace box; leaving it ends the episode as a crash. The floor sits at
/// 0.05 m so ground contact counts as a crash.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CrashBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for CrashBounds {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 2.4,
            y_min: 0.05,
            y_max: 2.4,
        }
    }
}

impl CrashBounds {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x_min..=self.x_max).contains(&p[0]) && (self.y_min..=self.y_max).contains(&p[1])
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err("crash bounds are degenerate".into());
        }
        Ok(())
    }
}

/// Success means holding both tolerances for the hold duration, evaluated
/// only once the target profile has settled at its final value. Below the
/// relaxation difficulty, one satisfied criterion suffices.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SuccessSpec {
    /// m.
    pub pos_tol: f64,
    /// rad, on the wrapped relative angle.
    pub ang_tol: f64,
    /// s.
    pub hold_time: f64,
    /// Below this difficulty one criterion is enough.
    pub relax_below: f64,
}

impl Default for SuccessSpec {
    fn default() -> Self {
        Self {
            pos_tol: 0.05,
            ang_tol: 0.1,
            hold_time: 0.5,
            relax_below: 0.4,
        }
    }
}

/// One task: target profile, episode budget, reward weights, workspace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub target_position: [f64; 2],
    /// Maneuver start, s.
    pub trigger_time: f64,
    /// Flip tasks: time over which the target angle sweeps to its final
    /// value (a half or a full turn).
    pub ramp_duration: f64,
    /// wall_backtrack: dwell at the vertical attitude before returning.
    pub hold_duration: f64,
    /// Control steps per episode.
    pub episode_length: usize,
    pub weights: RewardWeights,
    pub crash_bounds: CrashBounds,
    pub success: SuccessSpec,
    /// Thrust-to-weight the airframe is configured for in this task.
    pub thrust_to_weight: f64,
}

impl TaskSpec {
    pub fn preset(name: TaskName) -> Self {
        let base = Self {
            name,
            target_position: [1.2, 1.2],
            trigger_time: 1.0,
            ramp_duration: 0.8,
            hold_duration: 0.3,
            episode_length: 500,
            weights: RewardWeights::default(),
            crash_bounds: CrashBounds::default(),
            success: SuccessSpec::default(),
            thrust_to_weight: 2.0,
        };
        match name {
            // The half flip must be quick: while the body transits the
            // sideways attitudes the thrust vector cannot hold position, so
            // the longer the transit the larger the position excursion (and
            // the position kernel gates the whole reward). 0.4 s keeps the
            // mean tracking rate at pi/0.4 ~ 7.9 rad/s, inside the rate
            // interface, while the full turn needs the longer window to
            // stay trackable (2*pi/0.8 ~ 7.9 rad/s as well).
            TaskName::FlipHalf => Self {
                ramp_duration: 0.4,
                ..base
            },
            // Reaching the vertical attitude is the priority; position is
            // weighted just enough to avoid the ground, and the airframe
            // carries extra authority for the aggressive out-and-back.
            TaskName::WallBacktrack => Self {
                thrust_to_weight: 2.5,
                weights: RewardWeights {
                    w_p: 0.5,
                    w_o: 1.0,
                    w_v: 0.1,
                    w_omega: 0.1,
                    w_i: 0.1,
                },
                ..base
            },
            _ => base,
        }
    }

    /// Unwrapped target angle at episode time `t`.
    pub fn theta_target(&self, t: f64) -> f64 {
        use std::f64::consts::PI;
        match self.name {
            TaskName::Hover => 0.0,
            // Both flips ramp the target through the intermediate attitudes
            // rather than stepping it: a step to pi parks the relative angle
            // at the cosine kernel's stationary point (zero reward gradient),
            // and a step to 2 pi would be invisible through the wrapped
            // relative angle entirely. The ramp keeps the tracking error --
            // and hence the orientation reward gradient -- small and dense
            // over the whole maneuver window.
            TaskName::FlipHalf => {
                if t < self.trigger_time {
                    0.0
                } else if t < self.trigger_time + self.ramp_duration {
                    PI * (t - self.trigger_time) / self.ramp_duration
                } else {
                    PI
                }
            }
            TaskName::FlipFull => {
                if t < self.trigger_time {
                    0.0
                } else if t < self.trigger_time + self.ramp_duration {
                    2.0 * PI * (t - self.trigger_time) / self.ramp_duration
                } else {
                    2.0 * PI
                }
            }
            TaskName::WallBacktrack => {
                if t < self.trigger_time {
                    0.0
                } else if t < self.trigger_time + self.hold_duration {
                    0.5 * PI
                } else {
                    0.0
                }
            }
        }
    }

    pub fn target_at(&self, t: f64) -> TargetState {
        TargetState {
            p_t: self.target_position,
            theta_t: self.theta_target(t),
        }
    }

    /// Widest attitude (as a wrapped angle) the target profile commands;
    /// used to size the training-time initial-attitude exploration.
    pub fn attitude_span(&self) -> f64 {
        use std::f64::consts::PI;
        match self.name {
            TaskName::Hover => 0.0,
            // the full turn passes through the same wrapped attitudes as
            // the half turn
            TaskName::FlipHalf | TaskName::FlipFull => PI,
            TaskName::WallBacktrack => 0.5 * PI,
        }
    }

    /// Time from which the target profile stays at its final value; success
    /// is only counted from here, so pre-maneuver hovering cannot end the
    /// episode early.
    pub fn settle_time(&self) -> f64 {
        match self.name {
            TaskName::Hover => 0.0,
            TaskName::FlipHalf | TaskName::FlipFull => self.trigger_time + self.ramp_duration,
            TaskName::WallBacktrack => self.trigger_time + self.hold_duration,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.episode_length == 0 {
            return Err("episode_length must be > 0".into());
        }
        self.crash_bounds.validate()?;
        self.weights.validate()?;
        if !(self.thrust_to_weight > 1.0) {
            return Err(format!(
                "thrust_to_weight must exceed 1 to hover, got {}",
                self.thrust_to_weight
            ));
        }
        if self.trigger_time < 0.0 || self.ramp_duration <= 0.0 || self.hold_duration <= 0.0 {
            return Err("profile times must be positive".into());
        }
        Ok(())
    }
}

/// Training difficulty at a given fraction of the epoch budget: zero for
/// the first tenth, then linear to one at the midpoint.
pub fn curriculum_difficulty(epoch_fraction: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&epoch_fraction));
    if epoch_fraction < 0.1 {
        0.0
    } else if epoch_fraction < 0.5 {
        (epoch_fraction - 0.1) / 0.4
    } else {
        1.0
    }
}

/// Difficulty paired with the epoch fraction it was computed from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurriculumState {
    pub difficulty: f64,
    pub epoch_fraction: f64,
}

impl CurriculumState {
    pub fn at(epoch_fraction: f64) -> Self {
        Self {
            difficulty: curriculum_difficulty(epoch_fraction),
            epoch_fraction,
        }
    }
}
