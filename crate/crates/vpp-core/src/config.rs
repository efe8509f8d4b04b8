//! Run configuration: a single TOML document whose sections mirror the
//! crate modules (`[run]` command-level knobs, `[env]` with nested
//! dynamics/actuator/control tables, `[learner]` optimization knobs).
//!
//! The file written next to every command's outputs is always the *resolved*
//! form — every default expanded — so a run can be reproduced from its
//! snapshot alone and two snapshots can be diffed field by field. The
//! SHA-256 of the resolved text is embedded in checkpoints; `eval` and
//! `export` compare it against their own resolved config and warn on
//! mismatch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvMode, ObsLayout, TaskName};
use crate::learner::{config_hash_of, PpoConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Command-level section: what to run, where, and for how long.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub task: TaskName,
    /// Observation setup (VA / TA / PI / All).
    pub setup: ObsLayout,
    pub seed: u64,
    pub n_envs: usize,
    /// Rollout-update cycles for `train`.
    pub iterations: usize,
    /// Evaluation episodes for `eval`.
    pub episodes: usize,
    /// Estimator-in-the-loop observations instead of privileged state.
    pub deployment_mode: bool,
    pub out_dir: PathBuf,
}

/// Optimization section. PPO hyperparameters plus the knobs that sit above
/// the update rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerSection {
    /// Actor Lipschitz bound.
    pub lipschitz: f64,
    /// Intermediate checkpoint period in iterations (0 = final only).
    pub checkpoint_every: usize,
    pub ppo: PpoConfig,
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            lipschitz: 8.0,
            checkpoint_every: 0,
            ppo: PpoConfig::default(),
        }
    }
}

/// Fully resolved configuration: serializing this struct *is* the snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub learner: LearnerSection,
}

/// Optional command-line overrides applied on top of a config file (or the
/// defaults when no file is given). `None` leaves the underlying value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<TaskName>,
    pub setup: Option<ObsLayout>,
    pub seed: Option<u64>,
    pub envs: Option<usize>,
    pub epochs: Option<usize>,
    pub episodes: Option<usize>,
    pub deployment_mode: bool,
    pub out: Option<PathBuf>,
}

impl ResolvedConfig {
    /// Baseline configuration for a task/setup pair: environment and
    /// learner defaults, hover-calibrated budget.
    pub fn defaults(task: TaskName, setup: ObsLayout) -> Self {
        let run = RunSection {
            task,
            setup,
            seed: 0,
            n_envs: 256,
            iterations: 100,
            episodes: 100,
            deployment_mode: false,
            out_dir: PathBuf::from("out"),
        };
        let env = EnvConfig::new(task, setup, run.n_envs, run.seed);
        Self {
            run,
            env,
            learner: LearnerSection::default(),
        }
    }

    /// Load a snapshot, or start from defaults when `path` is `None`, then
    /// apply CLI overrides and re-synchronize the derived fields.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str::<ResolvedConfig>(&text)?
            }
            None => Self::defaults(
                ov.task.unwrap_or(TaskName::Hover),
                ov.setup.unwrap_or(ObsLayout::All),
            ),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(t) = ov.task {
            self.run.task = t;
            // task presets carry their own targets/limits; rebuild the env
            // around them but keep any non-task tuning from the file
            let fresh = EnvConfig::new(t, self.run.setup, self.run.n_envs, self.run.seed);
            self.env.task = fresh.task;
            self.env.body = fresh.body;
        }
        if let Some(s) = ov.setup {
            self.run.setup = s;
        }
        if let Some(s) = ov.seed {
            self.run.seed = s;
        }
        if let Some(n) = ov.envs {
            self.run.n_envs = n;
        }
        if let Some(e) = ov.epochs {
            self.run.iterations = e;
        }
        if let Some(e) = ov.episodes {
            self.run.episodes = e;
        }
        if ov.deployment_mode {
            self.run.deployment_mode = true;
        }
        if let Some(o) = &ov.out {
            self.run.out_dir = o.clone();
        }
        self.sync();
    }

    /// Push run-section values into the sections derived from them.
    fn sync(&mut self) {
        self.env.layout = self.run.setup;
        self.env.n_envs = self.run.n_envs;
        self.env.seed = self.run.seed;
        self.env.mode = if self.run.deployment_mode {
            EnvMode::Deployment
        } else {
            EnvMode::Training
        };
        self.learner.ppo.num_envs = self.run.n_envs;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.iterations == 0 {
            return Err(ConfigError::Invalid("iterations must be > 0".into()));
        }
        if self.run.episodes == 0 {
            return Err(ConfigError::Invalid("episodes must be > 0".into()));
        }
        if self.env.layout != self.run.setup {
            return Err(ConfigError::Invalid(format!(
                "env.layout {} disagrees with run.setup {}",
                self.env.layout, self.run.setup
            )));
        }
        self.env
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.learner
            .ppo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.learner.lipschitz > 0.0) {
            return Err(ConfigError::Invalid("lipschitz bound must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// The resolved text with output location and evaluation episode count
    /// pinned to fixed values: those don't change what gets trained, so
    /// they are excluded from the configuration identity.
    fn identity_text(&self) -> Result<String, ConfigError> {
        let mut pinned = self.clone();
        pinned.run.out_dir = PathBuf::new();
        pinned.run.episodes = 0;
        pinned.to_toml()
    }

    /// SHA-256 identity embedded in checkpoints; everything except output
    /// location and episode count (task, setup, physics, optimization,
    /// seed) contributes.
    pub fn hash(&self) -> Result<[u8; 32], ConfigError> {
        Ok(config_hash_of(&self.identity_text()?))
    }

    /// Persist the snapshot beside a command's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir).map_err(|source| ConfigError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join("resolved_config.toml");
        let text = self.to_toml()?;
        std::fs::write(&path, text).map_err(|source| ConfigError::Write {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Bundle everything the trainer needs.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            env: self.env.clone(),
            ppo: self.learner.ppo,
            total_iterations: self.run.iterations,
            seed: self.run.seed,
            lipschitz: self.learner.lipschitz,
            checkpoint_every: self.learner.checkpoint_every,
            out_dir: self.run.out_dir.clone(),
            config_text: self.identity_text()?,
        })
    }
}

/// Dotted paths whose values differ between two TOML documents (present in
/// one side only also counts). Used to audit that two run configs differ
/// exactly where intended.
pub fn toml_diff_paths(a: &str, b: &str) -> Result<Vec<String>, ConfigError> {
    let va: toml::Value = toml::from_str(a)?;
    let vb: toml::Value = toml::from_str(b)?;
    let mut out = Vec::new();
    diff_value(&va, &vb, String::new(), &mut out);
    out.sort();
    out.dedup();
    Ok(out)
}

fn diff_value(a: &toml::Value, b: &toml::Value, path: String, out: &mut Vec<String>) {
    match (a, b) {
        (toml::Value::Table(ta), toml::Value::Table(tb)) => {
            for (k, va) in ta {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match tb.get(k) {
                    Some(vb) => diff_value(va, vb, sub, out),
                    None => out.push(sub),
                }
            }
            for k in tb.keys() {
                if !ta.contains_key(k) {
                    out.push(if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    });
                }
            }
        }
        _ => {
            if a != b {
                out.push(path);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips_through_toml() {
        let cfg = ResolvedConfig::defaults(TaskName::FlipHalf, ObsLayout::PI);
        let text = cfg.to_toml().unwrap();
        let back: ResolvedConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.run.task, TaskName::FlipHalf);
        assert_eq!(back.run.setup, ObsLayout::PI);
        assert_eq!(back.env.layout, ObsLayout::PI);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    /// Changing only the observation setup must leave every physical and
    /// optimization section untouched: the resolved snapshots may differ
    /// only in observation-related fields.
    #[test]
    fn setups_differ_only_in_observation_fields() {
        let va = ResolvedConfig::defaults(TaskName::Hover, ObsLayout::VA);
        let all = ResolvedConfig::defaults(TaskName::Hover, ObsLayout::All);
        let paths =
            toml_diff_paths(&va.to_toml().unwrap(), &all.to_toml().unwrap()).unwrap();
        assert_eq!(paths, vec!["env.layout".to_string(), "run.setup".to_string()]);
    }

    #[test]
    fn overrides_take_effect_and_stay_consistent() {
        let ov = Overrides {
            task: Some(TaskName::FlipFull),
            setup: Some(ObsLayout::TA),
            seed: Some(9),
            envs: Some(32),
            epochs: Some(7),
            deployment_mode: true,
            ..Overrides::default()
        };
        let cfg = ResolvedConfig::load(None, &ov).unwrap();
        assert_eq!(cfg.run.task, TaskName::FlipFull);
        assert_eq!(cfg.env.layout, ObsLayout::TA);
        assert_eq!(cfg.env.seed, 9);
        assert_eq!(cfg.env.n_envs, 32);
        assert_eq!(cfg.learner.ppo.num_envs, 32);
        assert_eq!(cfg.run.iterations, 7);
        assert_eq!(cfg.env.mode, EnvMode::Deployment);
        // flip task presets land in the env section
        assert!(cfg.env.task.theta_target(10.0).abs() > 1.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ResolvedConfig::defaults(TaskName::Hover, ObsLayout::All);
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.learner.ppo.clip = 0.3;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn snapshot_file_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ResolvedConfig::defaults(TaskName::WallBacktrack, ObsLayout::All);
        let path = cfg.write_snapshot(dir.path()).unwrap();
        let re = ResolvedConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(re.to_toml().unwrap(), cfg.to_toml().unwrap());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ResolvedConfig::defaults(TaskName::Hover, ObsLayout::All);
        cfg.run.iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ResolvedConfig::defaults(TaskName::Hover, ObsLayout::All);
        cfg.learner.lipschitz = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ResolvedConfig::defaults(TaskName::Hover, ObsLayout::All);
        cfg.env.layout = ObsLayout::VA; // desynchronized sections
        assert!(cfg.validate().is_err());
    }
}
