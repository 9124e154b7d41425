//! `softdiff` command-line driver.
//!
//! Exit codes: 0 success, 1 failure (I/O, bad policy file, gradient check
//! above threshold), 2 bad arguments, 3 scene errors, 4 solver failures.

mod gradcheck;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use softdiff::rollout::{rollout, rollout_stochastic, write_trajectory, Controller, RolloutError};
use softdiff::scene::SceneError;
use softdiff::sim::{SimError, SimOptions};
use softdiff::training::{stream_rng, train_bptt, train_ppo, PolicyParams, PpoConfig, TrainConfig, TrainError};
use softdiff::Simulator;

#[derive(Parser)]
#[command(name = "softdiff", version, about = "Differentiable soft-body simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a scene and write the trajectory as JSON lines.
    Simulate(SimulateArgs),
    /// Solve one quasistatic equilibrium and write the positions.
    Quasistatic(QuasistaticArgs),
    /// Compare implicit gradients against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Train a policy with either algorithm.
    Train(TrainArgs),
    /// Train a policy by backpropagation through the simulator.
    #[command(name = "train-bptt")]
    TrainBptt(TrainCommon),
    /// Train a policy with PPO.
    #[command(name = "train-ppo")]
    TrainPpo(TrainCommon),
}

/// Actions given on the command line: `const:VAL` or a comma list, one per fiber.
#[derive(Clone, Debug, PartialEq)]
enum ActionSpec {
    Const(f64),
    PerFiber(Vec<f64>),
}

fn parse_actions(s: &str) -> Result<ActionSpec, String> {
    let number = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|e| format!("invalid action value {v:?}: {e}"))
    };
    if let Some(v) = s.strip_prefix("const:") {
        return number(v).map(ActionSpec::Const);
    }
    s.split(',')
        .map(number)
        .collect::<Result<Vec<_>, _>>()
        .map(ActionSpec::PerFiber)
}

impl ActionSpec {
    fn controller(&self) -> Controller<'_, f64> {
        match self {
            ActionSpec::Const(v) => Controller::Constant(*v),
            ActionSpec::PerFiber(v) => Controller::PerFiber(v),
        }
    }

    fn per_fiber(&self, fibers: usize) -> Result<Vec<f64>, CliError> {
        match self {
            ActionSpec::Const(v) => Ok(vec![*v; fibers]),
            ActionSpec::PerFiber(v) if v.len() == fibers => Ok(v.clone()),
            ActionSpec::PerFiber(v) => Err(CliError::Usage(format!(
                "--actions lists {} values but the scene has {fibers} fibers",
                v.len()
            ))),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    /// Policy parameters as JSON (from `train --save-policy`).
    #[arg(long, conflicts_with = "actions")]
    policy: Option<PathBuf>,
    /// `const:VAL` or comma-separated per-fiber values; defaults to `const:1.0`.
    #[arg(long, value_parser = parse_actions)]
    actions: Option<ActionSpec>,
    /// Sample actions from the Gaussian policy instead of using its mean.
    #[arg(long, requires = "policy")]
    stochastic: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stationarity tolerance of each step; defaults to the mass-scaled rule.
    #[arg(long)]
    forward_tol: Option<f64>,
}

#[derive(Args)]
struct QuasistaticArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_parser = parse_actions, default_value = "const:1.0")]
    actions: ActionSpec,
    /// Output JSON path, or `-` for stdout.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    forward_tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Bptt,
    Ppo,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    algo: Algo,
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Args)]
struct TrainCommon {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    horizon: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TrainLog CSV output.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Horizon of the deterministic evaluation logged every iteration.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    eval_horizon: u64,
    /// PPO trajectories per iteration.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    /// Initial policy standard deviation (PPO).
    #[arg(long, default_value_t = 0.1)]
    init_std: f64,
    /// PPO epochs per iteration.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// PPO clipping parameter.
    #[arg(long, default_value_t = 0.2)]
    clip: f64,
    /// Threads for PPO sampling; results do not depend on it.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Write the trained policy as JSON.
    #[arg(long)]
    save_policy: Option<PathBuf>,
    /// Fill the wall_ms column (otherwise 0, keeping seeded logs byte-identical).
    #[arg(long)]
    record_wall_time: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Scene(String),
    Solver(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Scene(_) => 3,
            CliError::Solver(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Scene(m) | CliError::Solver(m) | CliError::Failed(m) => m,
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Scene(format!("scene error: {e}"))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scene(s) => s.into(),
            SimError::NotConverged { .. } | SimError::AdjointFailed { .. } => CliError::Solver(e.to_string()),
            SimError::Unpinned | SimError::MasslessVertex { .. } => CliError::Scene(format!("scene error: {e}")),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Step { step, source } => match CliError::from(source) {
                CliError::Solver(m) => CliError::Solver(format!("step {step}: {m}")),
                CliError::Scene(m) => CliError::Scene(format!("step {step}: {m}")),
                other => CliError::Failed(format!("step {step}: {}", other.message())),
            },
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Rollout(r) => r.into(),
            other => CliError::Failed(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

fn load_simulator(path: &Path) -> Result<Simulator, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Scene(format!("{}: {e}", path.display())))?;
    let scene = softdiff::load_scene(&text).map_err(|e| CliError::Scene(format!("{}: {e}", path.display())))?;
    Ok(Simulator::new(scene)?)
}

fn is_stdout(path: &Path) -> bool {
    path.as_os_str() == "-"
}

/// Fails early when an output file could not be created later.
fn check_output(flag: &str, path: &Path) -> Result<(), CliError> {
    if is_stdout(path) {
        return Ok(());
    }
    if path.is_dir() {
        return Err(CliError::Usage(format!("{flag} {} is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "{flag} {}: directory {} does not exist",
                path.display(),
                dir.display()
            )));
        }
    }
    Ok(())
}

fn check_input(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag} {}: no such file", path.display())))
    }
}

fn write_output(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    if is_stdout(path) {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        return body(&mut lock).map_err(|e| io_error(path, e));
    }
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn load_policy(path: &Path) -> Result<PolicyParams<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let p: PolicyParams<f64> =
        serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: invalid policy: {e}", path.display())))?;
    p.validate()
        .map_err(|e| CliError::Failed(format!("{}: invalid policy: {e}", path.display())))?;
    Ok(p)
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    check_input("--scene", &args.scene)?;
    if let Some(p) = &args.policy {
        check_input("--policy", p)?;
    }
    check_output("--out", &args.out)?;
    let mut sim = load_simulator(&args.scene)?;
    sim.options.forward_tol = args.forward_tol;
    let steps = args.steps as usize;
    let traj = match (&args.policy, &args.actions) {
        (Some(path), _) => {
            let policy = load_policy(path)?;
            if args.stochastic {
                // stream 1 is not used by training, which owns 0 and (i << 32) | b for i >= 1
                rollout_stochastic(&sim, &policy, steps, &mut stream_rng(args.seed, 1))?
            } else {
                rollout(&sim, &Controller::Policy(&policy), steps)?
            }
        }
        (None, Some(spec)) => rollout(&sim, &spec.controller(), steps)?,
        (None, None) => rollout(&sim, &Controller::Constant(1.0), steps)?,
    };
    write_output(&args.out, |w| write_trajectory(&traj, w))
}

fn quasistatic(args: &QuasistaticArgs) -> Result<(), CliError> {
    check_input("--scene", &args.scene)?;
    check_output("--out", &args.out)?;
    let sim = load_simulator(&args.scene)?.with_options(SimOptions {
        forward_tol: Some(args.forward_tol),
        forward_max_iters: args.max_iters,
        ..Default::default()
    });
    let a = args.actions.per_fiber(sim.num_fibers())?;
    let rest = sim.scene().rest_positions();
    let (x1, ctx) = sim.quasistatic_forward(&a, &rest)?;
    let doc = serde_json::json!({
        "x": x1.chunks_exact(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>(),
        "iterations": ctx.report.iterations,
        "gradient_inf_norm": ctx.report.final_gradient_inf_norm,
    });
    write_output(&args.out, |w| {
        serde_json::to_writer(&mut *w, &doc)?;
        w.write_all(b"\n")
    })
}

fn train(algo: Algo, args: &TrainCommon) -> Result<(), CliError> {
    check_input("--scene", &args.scene)?;
    check_output("--log", &args.log)?;
    if let Some(p) = &args.save_policy {
        check_output("--save-policy", p)?;
    }
    if !(args.init_std > 0.0) {
        return Err(CliError::Usage("--init-std must be positive".into()));
    }
    let sim = load_simulator(&args.scene)?;
    let cfg = TrainConfig {
        horizon: args.horizon as usize,
        iterations: args.iters,
        lr: args.lr,
        seed: args.seed,
        eval_horizon: args.eval_horizon as usize,
        init_std: args.init_std,
        record_wall_time: args.record_wall_time,
    };
    let (policy, log) = match algo {
        Algo::Bptt => train_bptt(&sim, &cfg)?,
        Algo::Ppo => {
            let ppo = PpoConfig {
                batch_size: args.batch as usize,
                epochs: args.epochs,
                clip: args.clip,
                jobs: args.jobs as usize,
            };
            train_ppo(&sim, &cfg, &ppo)?
        }
    };
    write_output(&args.log, |w| log.write_csv(w))?;
    if let Some(path) = &args.save_policy {
        write_output(path, |w| {
            serde_json::to_writer_pretty(&mut *w, &policy)?;
            w.write_all(b"\n")
        })?;
    }
    if let Some(r) = log.final_reward() {
        println!("final reward {r}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Quasistatic(a) => quasistatic(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
        Command::Train(a) => train(a.algo, &a.common),
        Command::TrainBptt(a) => train(Algo::Bptt, &a),
        Command::TrainPpo(a) => train(Algo::Ppo, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
