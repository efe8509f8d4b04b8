//! The training loop: rollout collection on the batched environment,
//! advantage assembly, PPO updates under the curriculum and
//! learning-rate schedules, periodic checkpoints, and the curves CSV.
//!
//! Rollout inference runs on an immutable snapshot of the actor (the
//! forward pass never mutates weights); optimizer steps happen strictly
//! between rollouts, one minibatch at a time.

use std::collections::VecDeque;
use std::io::Write;
use std::path::PathBuf;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{config_hash_of, Checkpoint};
use super::gae::gae_advantages;
use super::nn::AdamParams;
use super::policy::{windows_to_array, Actor, Critic, WindowBuffer, CRITIC_WINDOW};
use super::ppo::{ppo_update, PpoConfig, RolloutBatch};
use super::LearnerError;
use crate::env::{curriculum_difficulty, DifficultyProfile, EnvConfig, VecEnv};

/// Everything `train` needs, bundled.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    /// Rollout-update cycles to run; schedules are defined on the
    /// fraction of this total, so short runs reuse the same shape.
    pub total_iterations: usize,
    pub seed: u64,
    /// Actor Lipschitz bound L.
    pub lipschitz: f64,
    /// Save an intermediate checkpoint every this many iterations
    /// (0 disables; the final checkpoint is always written).
    pub checkpoint_every: usize,
    /// Output directory for checkpoints and curves.
    pub out_dir: PathBuf,
    /// Resolved configuration text, hashed into checkpoints.
    pub config_text: String,
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy)]
pub struct IterationLog {
    pub iteration: usize,
    /// Running mean return of recently finished episodes.
    pub mean_reward: f64,
    pub mean_ep_len: f64,
    pub lr: f64,
    pub difficulty: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub curves: Vec<IterationLog>,
}

/// Observation snapshot bookkeeping for one environment's stream during
/// rollout collection.
struct EnvStream {
    window: WindowBuffer,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    /// Indices into the flat transition order (t * n_envs + i).
    rows: Vec<usize>,
    /// (local step, value) pairs for truncated bootstrap fix-ups.
    truncated: Vec<(usize, usize)>,
}

/// Train a policy from scratch and return the final checkpoint plus the
/// curve rows (also streamed to `out_dir/curves.csv`).
pub fn train(
    cfg: &TrainConfig,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainResult, LearnerError> {
    cfg.ppo.validate()?;
    if cfg.total_iterations == 0 {
        return Err(LearnerError::InvalidConfig(
            "total_iterations must be positive".into(),
        ));
    }
    let mut env_cfg = cfg.env.clone();
    env_cfg.n_envs = cfg.ppo.num_envs;
    env_cfg.seed = cfg.seed;
    let mut env = VecEnv::new(env_cfg.clone()).map_err(LearnerError::EnvFailure)?;
    let layout = env_cfg.layout;
    let dim = layout.dim();
    let n = env.n_envs();
    let horizon = cfg.ppo.horizon;

    let mut actor: Actor<f32> = Actor::standard(layout, cfg.lipschitz, cfg.seed ^ 0xAC7);
    actor.project_lipschitz();
    let mut critic: Critic<f32> = Critic::standard(layout, cfg.seed ^ 0xC417);
    let adam = AdamParams::default();
    let mut opt_step = 0i32;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5A17));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0FF5));

    std::fs::create_dir_all(&cfg.out_dir)?;
    let curves_path = cfg.out_dir.join("curves.csv");
    let mut curves_file = std::io::BufWriter::new(std::fs::File::create(&curves_path)?);
    writeln!(
        curves_file,
        "epoch,mean_reward,mean_ep_len,lr,difficulty,clip_fraction,kl"
    )?;

    let config_hash = config_hash_of(&cfg.config_text);
    let mut recent_returns: VecDeque<f64> = VecDeque::with_capacity(256);
    let mut recent_lengths: VecDeque<f64> = VecDeque::with_capacity(256);
    let mut curves = Vec::with_capacity(cfg.total_iterations);

    let first_difficulty = curriculum_difficulty(0.0);
    env.set_difficulty(DifficultyProfile::uniform(first_difficulty));
    let (mut obs_policy, obs_clean) = env.reset();
    let mut windows: Vec<WindowBuffer> = (0..n).map(|_| WindowBuffer::new(dim)).collect();
    for i in 0..n {
        windows[i].reset(&obs_clean[i * dim..(i + 1) * dim]);
    }

    for iter in 0..cfg.total_iterations {
        let fraction = iter as f64 / cfg.total_iterations as f64;
        let difficulty = curriculum_difficulty(fraction);
        let lr = cfg.ppo.lr_schedule(fraction);
        env.set_difficulty(DifficultyProfile::uniform(difficulty));

        // ---- collect one rollout -------------------------------------
        let total = horizon * n;
        let mut batch = RolloutBatch {
            obs: Vec::with_capacity(total * dim),
            windows: Vec::with_capacity(total * CRITIC_WINDOW * dim),
            actions: Vec::with_capacity(total * 2),
            logp_old: Vec::with_capacity(total),
            advantages: vec![0.0; total],
            returns: vec![0.0; total],
            obs_dim: dim,
            act_dim: 2,
        };
        let mut streams: Vec<EnvStream> = (0..n)
            .map(|_| EnvStream {
                window: WindowBuffer::new(dim),
                rewards: Vec::with_capacity(horizon),
                dones: Vec::with_capacity(horizon),
                rows: Vec::with_capacity(horizon),
                truncated: Vec::new(),
            })
            .collect();
        for i in 0..n {
            streams[i].window = windows[i].clone();
        }
        // flat windows needing a terminal value: (stream, local step)
        let mut terminal_windows: Vec<f64> = Vec::new();
        let mut terminal_refs: Vec<(usize, usize)> = Vec::new();

        for t in 0..horizon {
            let obs_arr =
                Array2::from_shape_fn((n, dim), |(r, c)| obs_policy[r * dim + c] as f32);
            let cache = actor.forward(&obs_arr);
            let (actions_arr, logp) = actor.sample(&cache.mean, &mut sample_rng);
            let mut actions = Vec::with_capacity(n * 2);
            for r in 0..n {
                actions.push(actions_arr[[r, 0]] as f64);
                actions.push(actions_arr[[r, 1]] as f64);
            }
            let res = env.step(&actions).map_err(LearnerError::EnvFailure)?;

            for i in 0..n {
                let row = t * n + i;
                batch.obs.extend_from_slice(&obs_policy[i * dim..(i + 1) * dim]);
                batch
                    .windows
                    .extend_from_slice(streams[i].window.as_slice());
                batch.actions.push(actions[i * 2]);
                batch.actions.push(actions[i * 2 + 1]);
                batch.logp_old.push(logp[i] as f64);
                streams[i].rewards.push(res.rewards[i]);
                streams[i].dones.push(res.dones[i]);
                streams[i].rows.push(row);
                if res.dones[i] {
                    if !res.crashed[i] {
                        // truncated episode: bootstrap through the
                        // terminal observation window
                        let term =
                            streams[i].window.peek_push(&res.terminal_obs_clean[i * dim..(i + 1) * dim]);
                        let local_t = streams[i].rewards.len() - 1;
                        terminal_refs.push((i, local_t));
                        streams[i].truncated.push((local_t, terminal_windows.len() / (CRITIC_WINDOW * dim)));
                        terminal_windows.extend_from_slice(&term);
                    }
                    streams[i]
                        .window
                        .reset(&res.obs_clean[i * dim..(i + 1) * dim]);
                } else {
                    streams[i]
                        .window
                        .push(&res.obs_clean[i * dim..(i + 1) * dim]);
                }
            }
            obs_policy = res.obs;
            for out in &res.outcomes {
                if recent_returns.len() == 256 {
                    recent_returns.pop_front();
                    recent_lengths.pop_front();
                }
                recent_returns.push_back(out.ep_return);
                recent_lengths.push_back(out.steps as f64);
            }
        }

        // ---- value estimates -------------------------------------------
        let values_all = batch_values(&critic, &batch.windows, dim);
        let mut tail_windows: Vec<f64> = Vec::with_capacity(n * CRITIC_WINDOW * dim);
        for stream in &streams {
            tail_windows.extend_from_slice(stream.window.as_slice());
        }
        let values_tail = batch_values(&critic, &tail_windows, dim);
        let values_term = if terminal_windows.is_empty() {
            Vec::new()
        } else {
            batch_values(&critic, &terminal_windows, dim)
        };

        // ---- advantage assembly per stream ------------------------------
        let gamma = cfg.ppo.discount;
        for (i, stream) in streams.iter().enumerate() {
            let t_len = stream.rewards.len();
            let mut rewards = stream.rewards.clone();
            for &(local_t, term_idx) in &stream.truncated {
                rewards[local_t] += gamma * values_term[term_idx];
            }
            let mut values = Vec::with_capacity(t_len + 1);
            for &row in &stream.rows {
                values.push(values_all[row]);
            }
            values.push(values_tail[i]);
            let (adv, ret) =
                gae_advantages(&rewards, &values, &stream.dones, gamma, cfg.ppo.lambda)?;
            for (k, &row) in stream.rows.iter().enumerate() {
                batch.advantages[row] = adv[k];
                batch.returns[row] = ret[k];
            }
        }
        let _ = terminal_refs;

        // carry the windows into the next rollout
        for i in 0..n {
            windows[i] = streams[i].window.clone();
        }

        // ---- optimize ----------------------------------------------------
        let stats = ppo_update(
            &batch,
            &mut actor,
            &mut critic,
            &cfg.ppo,
            lr,
            &adam,
            &mut opt_step,
            &mut shuffle_rng,
        )?;

        let mean_reward = if recent_returns.is_empty() {
            0.0
        } else {
            recent_returns.iter().sum::<f64>() / recent_returns.len() as f64
        };
        let mean_ep_len = if recent_lengths.is_empty() {
            0.0
        } else {
            recent_lengths.iter().sum::<f64>() / recent_lengths.len() as f64
        };
        let log = IterationLog {
            iteration: iter,
            mean_reward,
            mean_ep_len,
            lr,
            difficulty,
            clip_fraction: stats.clip_fraction,
            kl: stats.approx_kl,
        };
        writeln!(
            curves_file,
            "{},{:.6},{:.2},{:.6e},{:.4},{:.4},{:.6}",
            log.iteration,
            log.mean_reward,
            log.mean_ep_len,
            log.lr,
            log.difficulty,
            log.clip_fraction,
            log.kl
        )?;
        curves_file.flush()?;
        progress(&log);
        curves.push(log);

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            let ck = Checkpoint {
                seed: cfg.seed,
                config_hash,
                layout,
                actor: actor.clone(),
                critic: critic.clone(),
            };
            ck.save(cfg.out_dir.join(format!("checkpoint_{:04}.ckpt", iter + 1)))?;
        }
    }

    let checkpoint = Checkpoint {
        seed: cfg.seed,
        config_hash,
        layout,
        actor,
        critic,
    };
    checkpoint.save(cfg.out_dir.join("checkpoint.ckpt"))?;
    Ok(TrainResult { checkpoint, curves })
}

/// Critic values for flat windows, evaluated in fixed-size chunks.
fn batch_values(critic: &Critic<f32>, flat_windows: &[f64], dim: usize) -> Vec<f64> {
    let stride = CRITIC_WINDOW * dim;
    let b = flat_windows.len() / stride;
    let mut out = Vec::with_capacity(b);
    const CHUNK: usize = 2048;
    let mut start = 0;
    while start < b {
        let end = (start + CHUNK).min(b);
        let arr = windows_to_array::<f32>(&flat_windows[start * stride..end * stride], dim);
        let values = critic.forward(&arr).values;
        out.extend(values.iter().map(|&v| v as f64));
        start = end;
    }
    out
}

/// Per-episode record from an evaluation sweep.
#[derive(Debug, Clone, Copy)]
pub struct EvalEpisode {
    pub env: usize,
    pub steps: usize,
    pub ep_return: f64,
    pub mean_step_reward: f64,
    pub success: bool,
    pub crashed: bool,
    pub final_pos_err: f64,
    pub final_ang_err: f64,
    pub upright_pos_err: f64,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub episodes: Vec<EvalEpisode>,
    pub success_rate: f64,
    pub crash_rate: f64,
    pub mean_final_pos_err: f64,
    pub mean_final_ang_err: f64,
    pub mean_upright_pos_err: f64,
    pub mean_step_reward: f64,
    pub mean_return: f64,
    pub mean_ep_len: f64,
}

/// Run `episodes` independent evaluation episodes under `profile`,
/// acting deterministically (the policy mean). With no actor, the
/// analytic hover action is applied instead — the reward ceiling oracle.
pub fn evaluate_policy(
    actor: Option<&Actor<f32>>,
    env_cfg: &EnvConfig,
    profile: DifficultyProfile,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, LearnerError> {
    if episodes == 0 {
        return Err(LearnerError::InvalidConfig(
            "need at least one evaluation episode".into(),
        ));
    }
    let mut cfg = env_cfg.clone();
    cfg.n_envs = episodes;
    cfg.seed = seed;
    if let Some(a) = actor {
        if a.obs_dim() != cfg.layout.dim() {
            return Err(LearnerError::ShapeMismatch {
                what: "evaluation actor",
                detail: format!(
                    "actor expects obs dim {}, layout {} provides {}",
                    a.obs_dim(),
                    cfg.layout,
                    cfg.layout.dim()
                ),
            });
        }
    }
    let mut env = VecEnv::new(cfg.clone()).map_err(LearnerError::EnvFailure)?;
    env.set_difficulty(profile);
    let dim = env.obs_dim();
    let n = env.n_envs();
    let (mut obs, _) = env.reset();
    let hover = env.hover_action();
    let mut first: Vec<Option<EvalEpisode>> = vec![None; n];
    let mut returns = vec![0.0f64; n];
    let mut remaining = n;
    let max_steps = cfg.task.episode_length + 16;
    for _ in 0..max_steps {
        let actions: Vec<f64> = match actor {
            Some(a) => {
                let arr = Array2::from_shape_fn((n, dim), |(r, c)| obs[r * dim + c] as f32);
                let mean = a.forward(&arr).mean;
                (0..n)
                    .flat_map(|r| [mean[[r, 0]] as f64, mean[[r, 1]] as f64])
                    .collect()
            }
            None => (0..n).flat_map(|_| hover).collect(),
        };
        let res = env.step(&actions).map_err(LearnerError::EnvFailure)?;
        for i in 0..n {
            if first[i].is_none() {
                returns[i] += res.rewards[i];
            }
        }
        for out in &res.outcomes {
            if first[out.env].is_none() {
                first[out.env] = Some(EvalEpisode {
                    env: out.env,
                    steps: out.steps,
                    ep_return: out.ep_return,
                    mean_step_reward: out.ep_return / out.steps.max(1) as f64,
                    success: out.success,
                    crashed: out.crashed,
                    final_pos_err: out.final_pos_err,
                    final_ang_err: out.final_ang_err,
                    upright_pos_err: out.upright_pos_err,
                });
                remaining -= 1;
            }
        }
        if remaining == 0 {
            break;
        }
        obs = res.obs;
    }
    let episodes: Vec<EvalEpisode> = first.into_iter().flatten().collect();
    if episodes.is_empty() {
        return Err(LearnerError::EnvFailure(
            "no evaluation episode finished within the step budget".into(),
        ));
    }
    let n_ep = episodes.len() as f64;
    let report = EvalReport {
        success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n_ep,
        crash_rate: episodes.iter().filter(|e| e.crashed).count() as f64 / n_ep,
        mean_final_pos_err: episodes.iter().map(|e| e.final_pos_err).sum::<f64>() / n_ep,
        mean_final_ang_err: episodes.iter().map(|e| e.final_ang_err).sum::<f64>() / n_ep,
        mean_upright_pos_err: episodes.iter().map(|e| e.upright_pos_err).sum::<f64>() / n_ep,
        mean_step_reward: episodes.iter().map(|e| e.mean_step_reward).sum::<f64>() / n_ep,
        mean_return: episodes.iter().map(|e| e.ep_return).sum::<f64>() / n_ep,
        mean_ep_len: episodes.iter().map(|e| e.steps as f64).sum::<f64>() / n_ep,
        episodes,
    };
    Ok(report)
}
