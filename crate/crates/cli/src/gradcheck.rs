//! Finite-difference checks of the implicit backward passes.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softdiff::rollout::{bptt_gradient, rollout, Controller};
use softdiff::sim::SimOptions;
use softdiff::training::{initial_policy, TrainConfig};
use softdiff::{Simulator, State};

use crate::{check_input, load_simulator, CliError};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Quasistatic,
    Dynamic,
    Bptt,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Largest accepted relative error; 1e-4, or 1e-3 for bptt.
    #[arg(long)]
    threshold: Option<f64>,
    /// Forward stationarity tolerance; 1e-10, or 1e-12 for bptt.
    #[arg(long)]
    forward_tol: Option<f64>,
    /// Rollout length for bptt.
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    /// Policy parameters sampled for bptt.
    #[arg(long, default_value_t = 5)]
    params: usize,
    /// Scale of the per-vertex state perturbation in dynamic mode; 0 keeps
    /// the body rigid.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

/// Gradient and finite-difference estimate for one group of inputs.
struct Group {
    name: &'static str,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl Group {
    /// `max |g - fd| / max(‖fd‖∞, 1e-300)`.
    fn relative_error(&self) -> f64 {
        let scale = self.numeric.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale
    }
}

/// Fourth-order central difference `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`.
/// Contact and friction terms have large third derivatives, which the
/// second-order stencil turns into `O(h²)` errors above the threshold.
fn central(step: f64, mut f: impl FnMut(f64) -> Result<f64, CliError>) -> Result<f64, CliError> {
    let near = f(step)? - f(-step)?;
    let far = f(2.0 * step)? - f(-2.0 * step)?;
    Ok((8.0 * near - far) / (12.0 * step))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn quasistatic(sim: &Simulator, args: &GradcheckArgs, rng: &mut ChaCha8Rng) -> Result<Vec<Group>, CliError> {
    let n = sim.num_vertices();
    let a = uniform(rng, sim.num_fibers(), 0.6, 1.0);
    let w = uniform(rng, 2 * n, -1.0, 1.0);
    let rest = sim.scene().rest_positions();
    let (_, ctx) = sim.quasistatic_forward(&a, &rest)?;
    let (da, _) = sim.quasistatic_backward(&ctx, &w)?;
    let mut fd = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        fd.push(central(args.fd_step, |d| {
            let mut p = a.clone();
            p[i] += d;
            Ok(dot(&w, &sim.quasistatic_forward(&p, &rest)?.0))
        })?);
    }
    Ok(vec![Group {
        name: "a",
        analytic: da,
        numeric: fd,
    }])
}

/// Rest positions moving with one shared random velocity, plus per-vertex
/// noise on free vertices.
fn random_state(sim: &Simulator, noise: f64, rng: &mut ChaCha8Rng) -> State {
    let mut st = sim.initial_state();
    let shared = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    for &v in sim.free_vertices() {
        for c in 0..2 {
            st.x[2 * v + c] += 0.1 * noise * rng.random_range(-1.0..1.0);
            st.v[2 * v + c] = shared[c] + noise * rng.random_range(-1.0..1.0);
        }
    }
    st
}

fn dynamic(sim: &Simulator, args: &GradcheckArgs, rng: &mut ChaCha8Rng) -> Result<Vec<Group>, CliError> {
    let n = sim.num_vertices();
    let st = random_state(sim, args.noise, rng);
    let a = uniform(rng, sim.num_fibers(), 0.6, 1.0);
    let wx = uniform(rng, 2 * n, -1.0, 1.0);
    let wv = uniform(rng, 2 * n, -1.0, 1.0);
    // v1 carries the solver residual divided by h; weighting it by h keeps
    // both outputs at the same resolution.
    let h_step = sim.model().dt();
    let wv: Vec<f64> = wv.iter().map(|w| w * h_step).collect();
    // Measuring x1 from the unperturbed x0 keeps the summed terms small, so
    // the rounding of each loss value stays well below the FD signal.
    let base = st.x.clone();
    let loss = |p: &State, a: &[f64]| -> Result<f64, CliError> {
        let (s1, _) = sim.dynamic_forward(p, a)?;
        let dx: Vec<f64> = s1.x.iter().zip(&base).map(|(x, b)| x - b).collect();
        Ok(dot(&wx, &dx) + dot(&wv, &s1.v))
    };
    let (_, ctx) = sim.dynamic_forward(&st, &a)?;
    let g = sim.dynamic_backward(&ctx, &wx, &wv)?;
    let h = args.fd_step;
    let mut fd_x0 = Vec::with_capacity(2 * n);
    let mut fd_v0 = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        fd_x0.push(central(h, |d| {
            let mut p = st.clone();
            p.x[i] += d;
            loss(&p, &a)
        })?);
        fd_v0.push(central(h, |d| {
            let mut p = st.clone();
            p.v[i] += d;
            loss(&p, &a)
        })?);
    }
    let mut fd_a = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        fd_a.push(central(h, |d| {
            let mut p = a.clone();
            p[i] += d;
            loss(&st, &p)
        })?);
    }
    Ok(vec![
        Group {
            name: "x0",
            analytic: g.dx0,
            numeric: fd_x0,
        },
        Group {
            name: "v0",
            analytic: g.dv0,
            numeric: fd_v0,
        },
        Group {
            name: "a",
            analytic: g.da,
            numeric: fd_a,
        },
    ])
}

fn bptt(sim: &Simulator, args: &GradcheckArgs, rng: &mut ChaCha8Rng) -> Result<Vec<Group>, CliError> {
    let cfg = TrainConfig {
        seed: args.seed,
        ..Default::default()
    };
    let policy = initial_policy(sim, &cfg);
    let out = bptt_gradient(sim, &policy, args.horizon)?;
    let flat = policy.to_flat();
    let count = policy.num_mean_params();
    let mut analytic = Vec::with_capacity(args.params);
    let mut numeric = Vec::with_capacity(args.params);
    for _ in 0..args.params {
        let k = rng.random_range(0..count);
        analytic.push(out.grad[k]);
        numeric.push(central(args.fd_step, |d| {
            let mut q = policy.clone();
            let mut f = flat.clone();
            f[k] += d;
            q.set_flat(&f);
            Ok(rollout(sim, &Controller::Policy(&q), args.horizon)?.reward)
        })?);
    }
    Ok(vec![Group {
        name: "policy",
        analytic,
        numeric,
    }])
}

pub fn run(args: &GradcheckArgs) -> Result<(), CliError> {
    check_input("--scene", &args.scene)?;
    if args.mode == Mode::Bptt && args.horizon == 0 {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    if !(args.fd_step > 0.0) {
        return Err(CliError::Usage("--fd-step must be positive".into()));
    }
    let bptt_mode = args.mode == Mode::Bptt;
    let threshold = args.threshold.unwrap_or(if bptt_mode { 1e-3 } else { 1e-4 });
    let tol = args.forward_tol.unwrap_or(if bptt_mode { 1e-12 } else { 1e-10 });
    let sim = load_simulator(&args.scene)?.with_options(SimOptions {
        forward_tol: Some(tol),
        forward_max_iters: 1_000_000,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let groups = match args.mode {
        Mode::Quasistatic => quasistatic(&sim, args, &mut rng)?,
        Mode::Dynamic => dynamic(&sim, args, &mut rng)?,
        Mode::Bptt => bptt(&sim, args, &mut rng)?,
    };
    let mut ok = true;
    for g in &groups {
        if g.analytic.is_empty() {
            println!("{}: no inputs", g.name);
            continue;
        }
        let err = g.relative_error();
        let pass = err < threshold;
        ok &= pass;
        println!(
            "{}: max relative error {err:.3e} over {} inputs ({})",
            g.name,
            g.analytic.len(),
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        println!("gradcheck passed (threshold {threshold:e})");
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradcheck failed (threshold {threshold:e})")))
    }
}
