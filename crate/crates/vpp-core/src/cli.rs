//! The `vpp` command surface.
//!
//! Five subcommands cover the workflow end to end: `train` a policy,
//! `eval`uate a checkpoint, `fit` actuator/body coefficients from bench
//! CSVs, `bench`mark simulation throughput, and `export` a trajectory for
//! plotting. Every command that produces outputs also writes the fully
//! resolved configuration snapshot beside them, so a run can be reproduced
//! from its output directory alone.
//!
//! Exit codes: 0 on success, 2 for configuration/input errors (bad flags,
//! malformed CSV schemas, incompatible checkpoints), 3 when a run diverges
//! at runtime (non-finite losses or simulation states).
//!
//! `VPP_THREADS` caps the worker pool; results are bit-identical across
//! worker counts by construction.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::actuator::{
    fit_drag_coeff, fit_pitch_disturbance, fit_thrust_coeffs, BenchSample, DragSample,
};
use crate::config::{ConfigError, Overrides, ResolvedConfig};
use crate::dynamics::{step_batch_in_place, RigidState, WrenchCommand};
use crate::env::{DifficultyProfile, EnvMode, ObsLayout, TaskName, VecEnv};
use crate::learner::{evaluate_policy, train, Checkpoint, LearnerError};

pub const EXIT_OK: i32 = 0;
/// Configuration or input-data problem (flags, files, schemas).
pub const EXIT_CONFIG: i32 = 2;
/// The run itself went non-finite.
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser)]
#[command(
    name = "vpp",
    version,
    about = "Planar variable-pitch-propeller MAV: simulate, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy with PPO and write checkpoints + training curves.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the analytic hover action) over episodes.
    Eval(EvalArgs),
    /// Fit actuator / drag / disturbance coefficients from bench CSV data.
    Fit(FitArgs),
    /// Measure simulation throughput and cross-worker determinism.
    Bench(BenchArgs),
    /// Roll out one episode and write the per-step trajectory CSV.
    Export(ExportArgs),
}

/// Flags shared by every subcommand; unset values fall back to the config
/// file (when given) and then to built-in defaults.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Resolved-config snapshot to start from.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// hover | flip_half | flip_full | wall_backtrack
    #[arg(long)]
    task: Option<TaskName>,
    /// Observation setup: VA | TA | PI | All
    #[arg(long)]
    setup: Option<ObsLayout>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel environments.
    #[arg(long)]
    envs: Option<usize>,
    /// Rollout-update cycles for training.
    #[arg(long)]
    epochs: Option<usize>,
    /// Evaluation episode count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Feed the policy state estimates instead of privileged state.
    #[arg(long)]
    deployment_mode: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            task: self.task,
            setup: self.setup,
            seed: self.seed,
            envs: self.envs,
            epochs: self.epochs,
            episodes: self.episodes,
            deployment_mode: self.deployment_mode,
            out: self.out.clone(),
        }
    }

    fn resolve(&self) -> Result<ResolvedConfig, CliError> {
        Ok(ResolvedConfig::load(
            self.config.as_deref(),
            &self.overrides(),
        )?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

/// Evaluation protocol selector (which difficulty dials are active).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum EvalProfile {
    /// Nominal plant, dispersed starts, realistic sensor noise.
    #[default]
    Nominal,
    /// Everything randomized at full scale.
    Randomized,
    /// Nominal plant starting exactly in hover trim.
    Trim,
}

impl std::str::FromStr for EvalProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nominal" => Ok(Self::Nominal),
            "randomized" => Ok(Self::Randomized),
            "trim" => Ok(Self::Trim),
            other => Err(format!(
                "unknown profile '{other}' (expected nominal, randomized, or trim)"
            )),
        }
    }
}

impl EvalProfile {
    fn difficulty(self) -> DifficultyProfile {
        match self {
            Self::Nominal => DifficultyProfile::eval_nominal(),
            Self::Randomized => DifficultyProfile::eval_randomized(),
            Self::Trim => DifficultyProfile::trim_start(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Nominal => "nominal",
            Self::Randomized => "randomized",
            Self::Trim => "trim",
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint to evaluate.
    #[arg(value_name = "CHECKPOINT", required_unless_present = "analytic")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the analytic hover action instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    analytic: bool,
    /// nominal | randomized | trim
    #[arg(long, default_value = "nominal")]
    profile: EvalProfile,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FitWhat {
    Thrust,
    Drag,
    Disturbance,
}

impl std::str::FromStr for FitWhat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "thrust" => Ok(Self::Thrust),
            "drag" => Ok(Self::Drag),
            "disturbance" => Ok(Self::Disturbance),
            other => Err(format!(
                "unknown fit target '{other}' (expected thrust, drag, or disturbance)"
            )),
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// thrust | drag | disturbance
    #[arg(long)]
    what: FitWhat,
    /// Input CSV. Schemas: thrust `omega_rpm,alpha_rad,thrust_n,current_a`;
    /// drag `force_n,accel_mps2,velocity_mps`; disturbance
    /// `alpha_rad,omega_ratio`.
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    /// Disturbance polynomial degree.
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Batch sizes to measure.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 64, 256, 1024])]
    batch: Vec<usize>,
    /// Minimum wall time per measurement, s.
    #[arg(long, default_value_t = 0.3)]
    min_time: f64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Trained checkpoint to roll out.
    #[arg(value_name = "CHECKPOINT", required_unless_present = "analytic")]
    checkpoint: Option<PathBuf>,
    /// Export the analytic hover action instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    analytic: bool,
    /// nominal | randomized | trim
    #[arg(long, default_value = "trim")]
    profile: EvalProfile,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug)]
enum CliError {
    /// Anything wrong with flags, files, or input data: exit 2.
    Config(String),
    /// The run went non-finite: exit 3.
    Diverged(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Diverged(_) => EXIT_DIVERGED,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Diverged(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<LearnerError> for CliError {
    fn from(e: LearnerError) -> Self {
        match &e {
            LearnerError::NonFiniteLoss { .. }
            | LearnerError::AbortedUpdate { .. }
            | LearnerError::EnvFailure(_) => Self::Diverged(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Config(format!("i/o error: {e}"))
    }
}

/// Entry point used by the `vpp` binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parse `argv` and execute; returns the process exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own help/version through this path
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    init_thread_pool();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

/// Apply the `VPP_THREADS` cap to the global worker pool. Calling this
/// more than once (or after the pool already started) is harmless.
fn init_thread_pool() {
    if let Some(n) = threads_from_env() {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn threads_from_env() -> Option<usize> {
    std::env::var("VPP_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    cfg.write_snapshot(&cfg.run.out_dir)?;
    println!(
        "train: task={} setup={} envs={} iterations={} seed={} horizon={} out={}",
        cfg.run.task,
        cfg.run.setup,
        cfg.run.n_envs,
        cfg.run.iterations,
        cfg.run.seed,
        cfg.learner.ppo.horizon,
        cfg.run.out_dir.display()
    );
    let tc = cfg.train_config()?;
    let started = Instant::now();
    let result = train(&tc, |log| {
        println!(
            "iter {:>4}/{} reward {:>8.3} ep_len {:>6.1} lr {:.2e} difficulty {:.2} clip {:.3} kl {:.4}",
            log.iteration + 1,
            tc.total_iterations,
            log.mean_reward,
            log.mean_ep_len,
            log.lr,
            log.difficulty,
            log.clip_fraction,
            log.kl
        );
        let _ = std::io::stdout().flush();
    })?;
    println!(
        "done in {:.1} s: checkpoint={} curves={}",
        started.elapsed().as_secs_f64(),
        cfg.run.out_dir.join("checkpoint.ckpt").display(),
        cfg.run.out_dir.join("curves.csv").display()
    );
    let last = result.curves.last().expect("at least one iteration");
    println!("final mean episode reward: {:.3}", last.mean_reward);
    Ok(())
}

/// Load a checkpoint and reconcile its observation layout with the CLI
/// setup flag (they must agree when both are present).
fn load_checkpoint(
    path: &Path,
    requested: Option<ObsLayout>,
) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(setup) = requested {
        if setup != ckpt.layout {
            return Err(CliError::Config(format!(
                "checkpoint was trained with setup {} but --setup {} was requested",
                ckpt.layout, setup
            )));
        }
    }
    Ok(ckpt)
}

/// Compare the checkpoint's embedded config hash against the resolved
/// config; mismatch warns and proceeds (flagged in the report header).
fn hash_matches(cfg: &ResolvedConfig, ckpt: &Checkpoint) -> Result<bool, CliError> {
    let ours = cfg.hash()?;
    let matches = ours == ckpt.config_hash;
    if !matches {
        eprintln!(
            "warning: config hash mismatch (checkpoint {:02x}{:02x}.., resolved {:02x}{:02x}..); proceeding",
            ckpt.config_hash[0], ckpt.config_hash[1], ours[0], ours[1]
        );
    }
    Ok(matches)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p, args.common.setup)?),
        None => None,
    };
    let mut common = args.common;
    if let Some(c) = &ckpt {
        common.setup = Some(c.layout);
    }
    let cfg = common.resolve()?;
    let hash_ok = match &ckpt {
        Some(c) => hash_matches(&cfg, c)?,
        None => true,
    };

    let report = evaluate_policy(
        ckpt.as_ref().map(|c| &c.actor),
        &cfg.env,
        args.profile.difficulty(),
        cfg.run.episodes,
        cfg.run.seed,
    )?;

    let s = &cfg.env.task.success;
    let b = &cfg.env.task.crash_bounds;
    println!(
        "eval: task={} setup={} episodes={} profile={} deployment={} policy={}",
        cfg.run.task,
        cfg.run.setup,
        cfg.run.episodes,
        args.profile.name(),
        cfg.run.deployment_mode,
        if ckpt.is_some() { "checkpoint" } else { "analytic-hover" }
    );
    println!(
        "success: pos err < {:.2} m and wrapped angle err < {:.2} rad held {:.1} s \
         (one criterion suffices below difficulty {:.1})",
        s.pos_tol, s.ang_tol, s.hold_time, s.relax_below
    );
    println!(
        "crash: leaving x in [{:.2}, {:.2}] m, y in [{:.2}, {:.2}] m",
        b.x_min, b.x_max, b.y_min, b.y_max
    );
    if !hash_ok {
        println!("config-hash match: NO (results may not correspond to the training config)");
    }
    println!(
        "{:<22} {:<22} {:<10}",
        "mean pos err [m]", "mean inv pos err [m]", "fail rate"
    );
    println!(
        "{:<22.4} {:<22.4} {:<10.3}",
        report.mean_upright_pos_err,
        report.mean_final_pos_err,
        1.0 - report.success_rate
    );
    println!(
        "detail: success {:.3} crash {:.3} mean return {:.2} mean step reward {:.3} mean len {:.1}",
        report.success_rate,
        report.crash_rate,
        report.mean_return,
        report.mean_step_reward,
        report.mean_ep_len
    );

    std::fs::create_dir_all(&cfg.run.out_dir)?;
    cfg.write_snapshot(&cfg.run.out_dir)?;
    let csv_path = cfg.run.out_dir.join("eval_episodes.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(
        w,
        "episode,setup,final_pos_err_m,final_ang_err_rad,upright_pos_err_m,success,crashed,steps"
    )?;
    for (i, ep) in report.episodes.iter().enumerate() {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{},{},{}",
            i,
            cfg.run.setup,
            ep.final_pos_err,
            ep.final_ang_err,
            ep.upright_pos_err,
            ep.success as u8,
            ep.crashed as u8,
            ep.steps
        )?;
    }
    w.flush()?;
    println!("episodes csv: {}", csv_path.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let ckpt = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p, args.common.setup)?),
        None => None,
    };
    let mut common = args.common;
    if let Some(c) = &ckpt {
        common.setup = Some(c.layout);
    }
    let cfg = common.resolve()?;
    if let Some(c) = &ckpt {
        hash_matches(&cfg, c)?;
    }

    let mut env_cfg = cfg.env.clone();
    env_cfg.n_envs = 1;
    let deployment = env_cfg.mode == EnvMode::Deployment;
    let mut env = VecEnv::new(env_cfg).map_err(CliError::Config)?;
    env.set_difficulty(args.profile.difficulty());
    let (mut obs, _) = env.reset();
    let hover = env.hover_action();

    std::fs::create_dir_all(&cfg.run.out_dir)?;
    cfg.write_snapshot(&cfg.run.out_dir)?;
    let csv_path = cfg.run.out_dir.join("trajectory.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    write!(w, "t_s,px,py,vx,vy,theta,q,f_cmd,qdes_cmd,f1,f2,reward")?;
    if deployment {
        write!(w, ",est_px,est_py,est_vx,est_vy,est_theta,est_q")?;
    }
    writeln!(w)?;

    let episode_length = cfg.env.task.episode_length;
    let mut ep_return = 0.0;
    let mut outcome = None;
    for _ in 0..episode_length {
        let t = env.episode_time(0);
        let state = env.true_state(0);
        let est = env.estimate(0).map(|e| {
            let p = e.position();
            let v = e.velocity();
            [p[0], p[1], v[0], v[1], e.theta(), e.q()]
        });
        let action = match &ckpt {
            Some(c) => c.actor.act_mean(&obs),
            None => hover,
        };
        let step = env
            .step(&[action[0], action[1]])
            .map_err(CliError::Diverged)?;
        let trace = env.trace(0);
        ep_return += step.rewards[0];
        write!(
            w,
            "{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            t,
            state.p[0],
            state.p[1],
            state.v[0],
            state.v[1],
            state.theta,
            state.q,
            trace.f_cmd,
            trace.qdes_cmd,
            trace.f1,
            trace.f2,
            step.rewards[0]
        )?;
        if deployment {
            let e = est.unwrap_or([state.p[0], state.p[1], state.v[0], state.v[1], state.theta, state.q]);
            write!(
                w,
                ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                e[0], e[1], e[2], e[3], e[4], e[5]
            )?;
        }
        writeln!(w)?;
        if let Some(o) = step.outcomes.first() {
            outcome = Some(*o);
            break;
        }
        obs = step.obs;
    }
    w.flush()?;

    println!(
        "export: task={} setup={} profile={} deployment={} policy={}",
        cfg.run.task,
        cfg.run.setup,
        args.profile.name(),
        deployment,
        if ckpt.is_some() { "checkpoint" } else { "analytic-hover" }
    );
    match outcome {
        Some(o) => println!(
            "episode: steps={} return={:.2} success={} crashed={} final pos err {:.4} m",
            o.steps, o.ep_return, o.success, o.crashed, o.final_pos_err
        ),
        None => println!("episode: ran the full {episode_length} steps (return {ep_return:.2})"),
    }
    println!("trajectory csv: {}", csv_path.display());
    Ok(())
}

/// Strict header check: the CSV must contain exactly the expected columns
/// (order-insensitive); returns the index of each expected column.
fn check_headers(
    rdr: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
    path: &Path,
) -> Result<Vec<usize>, CliError> {
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .clone();
    let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
    let mut idx = Vec::with_capacity(expected.len());
    for want in expected {
        match got.iter().position(|g| g == want) {
            Some(i) => idx.push(i),
            None => {
                return Err(CliError::Config(format!(
                    "{}: missing column '{want}' (found: {}) — expected schema {}",
                    path.display(),
                    got.join(","),
                    expected.join(",")
                )))
            }
        }
    }
    if got.len() != expected.len() {
        return Err(CliError::Config(format!(
            "{}: unexpected extra columns (found: {}) — expected schema {}",
            path.display(),
            got.join(","),
            expected.join(",")
        )));
    }
    Ok(idx)
}

fn read_numeric_rows(
    path: &Path,
    expected: &[&str],
) -> Result<Vec<Vec<f64>>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let idx = check_headers(&mut rdr, expected, path)?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut row = Vec::with_capacity(idx.len());
        for (&i, name) in idx.iter().zip(expected) {
            let field = rec.get(i).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| {
                CliError::Config(format!(
                    "{} row {}: column '{name}' is not a number: '{field}'",
                    path.display(),
                    line + 2
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let out_path = cfg.run.out_dir.join("fitted_coefficients.toml");
    let mut out = String::new();
    out.push_str(&format!(
        "# fitted from {} ({:?})\n",
        args.data.display(),
        args.what
    ));

    match args.what {
        FitWhat::Thrust => {
            let rows = read_numeric_rows(
                &args.data,
                &["omega_rpm", "alpha_rad", "thrust_n", "current_a"],
            )?;
            let samples: Vec<BenchSample> = rows
                .iter()
                .map(|r| BenchSample {
                    omega_rpm: r[0],
                    alpha_rad: r[1],
                    thrust_n: r[2],
                    current_a: r[3],
                })
                .collect();
            let fit = fit_thrust_coeffs(&samples, &cfg.env.motor, &cfg.env.rpm_policy)
                .map_err(|e| CliError::Config(format!("thrust fit failed: {e}")))?;
            println!(
                "thrust fit over {} samples: k_t={:.6e} k_d1={:.6e} k_d2={:.6e} k_d3={:.6e}",
                samples.len(),
                fit.k_t,
                fit.k_d1,
                fit.k_d2,
                fit.k_d3
            );
            println!(
                "pitch estimator at {:.0} RPM: g0={:.6e} g1={:.6e} g2={:.6e} ({} Gauss-Newton iterations)",
                cfg.env.rpm_policy.target_rpm,
                fit.estimator.g0,
                fit.estimator.g1,
                fit.estimator.g2,
                fit.gauss_newton_iterations
            );
            println!(
                "residual RMS: thrust {:.3e} N, drag balance {:.3e} N m, pitch estimate {:.3e} rad",
                fit.thrust_rms, fit.drag_rms, fit.estimator_rms
            );
            out.push_str("[propeller]\n");
            out.push_str(&format!("k_t = {:e}\n", fit.k_t));
            out.push_str(&format!("k_d1 = {:e}\n", fit.k_d1));
            out.push_str(&format!("k_d2 = {:e}\n", fit.k_d2));
            out.push_str(&format!("k_d3 = {:e}\n", fit.k_d3));
            out.push_str(&format!("thrust_rms_n = {:e}\n", fit.thrust_rms));
            out.push_str("\n[estimator]\n");
            out.push_str(&format!("g0 = {:e}\n", fit.estimator.g0));
            out.push_str(&format!("g1 = {:e}\n", fit.estimator.g1));
            out.push_str(&format!("g2 = {:e}\n", fit.estimator.g2));
            out.push_str(&format!("rms_rad = {:e}\n", fit.estimator_rms));
        }
        FitWhat::Drag => {
            let rows =
                read_numeric_rows(&args.data, &["force_n", "accel_mps2", "velocity_mps"])?;
            let samples: Vec<DragSample> = rows
                .iter()
                .map(|r| DragSample {
                    force_n: r[0],
                    accel: r[1],
                    velocity: r[2],
                })
                .collect();
            let mass = cfg.env.body.mass;
            let k_d = fit_drag_coeff(&samples, mass)
                .map_err(|e| CliError::Config(format!("drag fit failed: {e}")))?;
            let rms = (samples
                .iter()
                .map(|s| {
                    let r = s.force_n - mass * s.accel - k_d * s.velocity.abs() * s.velocity;
                    r * r
                })
                .sum::<f64>()
                / samples.len() as f64)
                .sqrt();
            println!(
                "drag fit over {} samples (mass {:.3} kg): k_d={:.6e}, residual RMS {:.3e} N",
                samples.len(),
                mass,
                k_d,
                rms
            );
            out.push_str("[body]\n");
            out.push_str(&format!("drag_coeff = {k_d:e}\n"));
            out.push_str(&format!("residual_rms_n = {rms:e}\n"));
        }
        FitWhat::Disturbance => {
            let rows = read_numeric_rows(&args.data, &["alpha_rad", "omega_ratio"])?;
            let samples: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
            let poly = fit_pitch_disturbance(&samples, args.degree)
                .map_err(|e| CliError::Config(format!("disturbance fit failed: {e}")))?;
            let rms = (samples
                .iter()
                .map(|&(a, ratio)| {
                    let pred: f64 = poly
                        .iter()
                        .enumerate()
                        .map(|(k, c)| c * a.powi(k as i32))
                        .sum();
                    let r = ratio - (1.0 + pred);
                    r * r
                })
                .sum::<f64>()
                / samples.len() as f64)
                .sqrt();
            println!(
                "disturbance fit over {} samples, degree {}: poly={:?}, residual RMS {:.3e}",
                samples.len(),
                args.degree,
                poly,
                rms
            );
            out.push_str("[disturbance]\n");
            out.push_str(&format!(
                "poly = [{}]\n",
                poly.iter()
                    .map(|c| format!("{c:e}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
            out.push_str(&format!("residual_rms = {rms:e}\n"));
        }
    }

    std::fs::write(&out_path, out)?;
    println!("coefficients: {}", out_path.display());
    Ok(())
}

/// Throughput of the raw rigid-body integrator, steps/s at `batch`.
fn bench_physics(batch: usize, min_time: f64) -> f64 {
    let body = crate::dynamics::BodyParams::default();
    let hover = WrenchCommand {
        f: body.mass * body.gravity,
        tau: 0.0,
    };
    let mut states = vec![
        RigidState {
            p: [1.2, 1.2],
            v: [0.0, 0.0],
            theta: 0.0,
            q: 0.0,
        };
        batch
    ];
    let wrenches = vec![hover; batch];
    // warm-up
    for _ in 0..16 {
        step_batch_in_place(&mut states, &wrenches, &body, 1e-3).unwrap();
    }
    let started = Instant::now();
    let mut iters = 0usize;
    while started.elapsed().as_secs_f64() < min_time {
        for _ in 0..32 {
            step_batch_in_place(&mut states, &wrenches, &body, 1e-3).unwrap();
        }
        iters += 32;
    }
    (batch * iters) as f64 / started.elapsed().as_secs_f64()
}

/// Throughput of the full environment step (cascade control, observation,
/// reward, episode logic), control steps/s at `batch`.
fn bench_pipeline(batch: usize, min_time: f64, seed: u64) -> Result<f64, CliError> {
    let cfg = crate::env::EnvConfig::new(TaskName::Hover, ObsLayout::All, batch, seed);
    let mut env = VecEnv::new(cfg).map_err(CliError::Config)?;
    env.set_difficulty(DifficultyProfile::uniform(0.5));
    env.reset();
    let action: Vec<f64> = env
        .hover_action()
        .iter()
        .copied()
        .cycle()
        .take(2 * batch)
        .collect();
    for _ in 0..4 {
        env.step(&action).map_err(CliError::Diverged)?;
    }
    let started = Instant::now();
    let mut iters = 0usize;
    while started.elapsed().as_secs_f64() < min_time {
        for _ in 0..8 {
            env.step(&action).map_err(CliError::Diverged)?;
        }
        iters += 8;
    }
    Ok((batch * iters) as f64 / started.elapsed().as_secs_f64())
}

/// Reward stream fingerprint after `steps` pipeline steps, used to prove
/// bit-identical results across worker counts.
fn pipeline_fingerprint(batch: usize, steps: usize, seed: u64) -> Result<Vec<u64>, CliError> {
    let cfg = crate::env::EnvConfig::new(TaskName::Hover, ObsLayout::All, batch, seed);
    let mut env = VecEnv::new(cfg).map_err(CliError::Config)?;
    env.set_difficulty(DifficultyProfile::uniform(1.0));
    env.reset();
    let action: Vec<f64> = env
        .hover_action()
        .iter()
        .copied()
        .cycle()
        .take(2 * batch)
        .collect();
    let mut fp = Vec::with_capacity(batch * steps);
    for _ in 0..steps {
        let r = env.step(&action).map_err(CliError::Diverged)?;
        fp.extend(r.rewards.iter().map(|x| x.to_bits()));
        fp.extend(r.obs.iter().map(|x| x.to_bits()));
    }
    Ok(fp)
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let max_workers = threads_from_env().unwrap_or_else(rayon::current_num_threads);
    let mut worker_counts = vec![1usize];
    if max_workers > 1 {
        worker_counts.push(max_workers);
    }
    println!(
        "bench: batches {:?}, workers {:?}, min {:.1} s per point",
        args.batch, worker_counts, args.min_time
    );
    println!(
        "{:>8} {:>8} {:>18} {:>18}",
        "batch", "workers", "physics steps/s", "pipeline steps/s"
    );

    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    for &workers in &worker_counts {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        for &batch in &args.batch {
            if batch == 0 {
                return Err(CliError::Config("batch size 0 is meaningless".into()));
            }
            let phys = pool.install(|| bench_physics(batch, args.min_time));
            let pipe = pool.install(|| bench_pipeline(batch, args.min_time, cfg.run.seed))?;
            println!("{batch:>8} {workers:>8} {phys:>18.0} {pipe:>18.0}");
            rows.push((batch, workers, phys, pipe));
        }
    }

    // batch-1 vs largest batch: how much the batching amortizes per-env cost
    let largest = *args.batch.iter().max().unwrap_or(&1);
    let pick = |b: usize| {
        rows.iter()
            .filter(move |r| r.0 == b)
            .map(|r| r.3)
            .fold(0.0f64, f64::max)
    };
    if args.batch.contains(&1) && largest > 1 {
        let (one, big) = (pick(1), pick(largest));
        if one > 0.0 {
            println!(
                "pipeline throughput ratio batch {largest} vs batch 1: {:.1}x",
                big / one
            );
        }
    }

    // determinism across worker counts: fingerprint the reward/obs streams
    let mut fingerprints = Vec::new();
    for &workers in &worker_counts {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        fingerprints.push(pool.install(|| pipeline_fingerprint(256, 20, cfg.run.seed))?);
    }
    let identical = fingerprints.windows(2).all(|w| w[0] == w[1]);
    println!(
        "bit-identical across worker counts {:?}: {}",
        worker_counts, identical
    );
    if !identical {
        return Err(CliError::Diverged(
            "results differ across worker counts".into(),
        ));
    }

    if let Some(out) = &args.common.out {
        std::fs::create_dir_all(out)?;
        let path = out.join("bench.csv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "batch,workers,physics_steps_per_s,pipeline_steps_per_s")?;
        for (b, k, p, q) in &rows {
            writeln!(w, "{b},{k},{p:.0},{q:.0}")?;
        }
        w.flush()?;
        println!("bench csv: {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_and_stable() {
        assert_eq!(EXIT_OK, 0);
        assert_eq!(EXIT_CONFIG, 2);
        assert_eq!(EXIT_DIVERGED, 3);
        assert_eq!(CliError::Config("x".into()).code(), 2);
        assert_eq!(CliError::Diverged("x".into()).code(), 3);
    }

    #[test]
    fn learner_errors_map_to_the_right_exit() {
        let diverged: CliError = LearnerError::NonFiniteLoss {
            policy: f64::NAN,
            value: 0.0,
            entropy: 0.0,
        }
        .into();
        assert_eq!(diverged.code(), EXIT_DIVERGED);
        let config: CliError = LearnerError::InvalidConfig("bad".into()).into();
        assert_eq!(config.code(), EXIT_CONFIG);
    }

    #[test]
    fn unknown_flags_and_tasks_are_config_errors() {
        assert_eq!(run_from(["vpp", "train", "--task", "juggle"]), EXIT_CONFIG);
        assert_eq!(run_from(["vpp", "no-such-command"]), EXIT_CONFIG);
        // eval requires a checkpoint or --analytic
        assert_eq!(run_from(["vpp", "eval"]), EXIT_CONFIG);
    }

    #[test]
    fn fit_rejects_schema_violations() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "omega_rpm,alpha_rad,thrust\n1,2,3\n").unwrap();
        let code = run_from([
            "vpp",
            "fit",
            "--what",
            "thrust",
            "--data",
            bad.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);

        let nan = dir.path().join("nan.csv");
        std::fs::write(
            &nan,
            "omega_rpm,alpha_rad,thrust_n,current_a\n4500,0.1,abc,2.0\n",
        )
        .unwrap();
        let code = run_from([
            "vpp",
            "fit",
            "--what",
            "thrust",
            "--data",
            nan.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn fit_rejects_zero_velocity_drag_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drag.csv");
        let mut text = String::from("force_n,accel_mps2,velocity_mps\n");
        for i in 0..20 {
            text.push_str(&format!("{},{},0.0\n", i as f64 * 0.1, i as f64 * 0.1));
        }
        std::fs::write(&path, text).unwrap();
        let code = run_from([
            "vpp",
            "fit",
            "--what",
            "drag",
            "--data",
            path.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }

    /// End-to-end thrust fit through the CLI against a synthetic bench
    /// sweep generated from the ground-truth models.
    #[test]
    fn fit_thrust_recovers_truth_from_generated_sweep() {
        use crate::actuator::{generate_bench_sweep, MotorModel, PropellerModel};
        let dir = tempfile::tempdir().unwrap();
        let prop = PropellerModel::default();
        let motor = MotorModel::default();
        // the grid must visit the RPM policy's target speed (4500) or the
        // pitch-estimator subset is empty
        let rpms: Vec<f64> = (0..11).map(|i| 4000.0 + 100.0 * i as f64).collect();
        let alphas: Vec<f64> = (0..25).map(|i| 0.02 + 0.016 * i as f64).collect();
        let sweep = generate_bench_sweep(&prop, &motor, &rpms, &alphas);
        let path = dir.path().join("sweep.csv");
        let mut text = String::from("omega_rpm,alpha_rad,thrust_n,current_a\n");
        for s in &sweep {
            text.push_str(&format!(
                "{},{},{},{}\n",
                s.omega_rpm, s.alpha_rad, s.thrust_n, s.current_a
            ));
        }
        std::fs::write(&path, text).unwrap();
        let code = run_from([
            "vpp",
            "fit",
            "--what",
            "thrust",
            "--data",
            path.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        let coeffs = std::fs::read_to_string(dir.path().join("fitted_coefficients.toml")).unwrap();
        let val: toml::Value = toml::from_str(coeffs.split_once('\n').unwrap().1).unwrap();
        let k_t = val["propeller"]["k_t"].as_float().unwrap();
        assert!((k_t - prop.k_t).abs() / prop.k_t < 1e-6, "k_t {k_t}");
    }

    #[test]
    fn eval_profile_parses() {
        use std::str::FromStr as _;
        assert_eq!(EvalProfile::from_str("nominal").unwrap(), EvalProfile::Nominal);
        assert_eq!(
            EvalProfile::from_str("randomized").unwrap(),
            EvalProfile::Randomized
        );
        assert_eq!(EvalProfile::from_str("trim").unwrap(), EvalProfile::Trim);
        assert!(EvalProfile::from_str("??").is_err());
    }
}
