//! Policy network, Adam, and the two training loops: backpropagation
//! through the simulator and a PPO baseline.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{affine, gradient, AutodiffError, Graph, Var};
use crate::rollout::{bptt_gradient, rollout, rollout_stochastic, Controller, RolloutError, Trajectory};
use crate::scalar::Real;
use crate::scene::{PolicyIoConfig, State};
use crate::sim::Simulator;

pub const HIDDEN_UNITS: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("policy parameters contain a non-finite value")]
    NotFinite,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Interval the squashed policy output is mapped onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRange<T> {
    pub min: T,
    pub max: T,
}

impl<T: Real> Default for ActionRange<T> {
    fn default() -> Self {
        Self {
            min: T::lit(0.3),
            max: T::lit(1.0),
        }
    }
}

/// One-hidden-layer ReLU network with a per-fiber log standard deviation.
///
/// `w1` is `hidden x input_dim` and `w2` is `num_actions x hidden`, both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams<T> {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_actions: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub log_std: Vec<T>,
    pub action_range: ActionRange<T>,
}

impl<T: Real> PolicyParams<T> {
    pub fn zeros(input_dim: usize, num_actions: usize) -> Self {
        let h = HIDDEN_UNITS;
        Self {
            input_dim,
            hidden: h,
            num_actions,
            w1: vec![T::zero(); h * input_dim],
            b1: vec![T::zero(); h],
            w2: vec![T::zero(); num_actions * h],
            b2: vec![T::zero(); num_actions],
            log_std: vec![T::zero(); num_actions],
            action_range: ActionRange::default(),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases, `log_std = ln(init_std)`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, num_actions: usize, init_std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, num_actions);
        let b = 1.0 / (input_dim.max(1) as f64).sqrt();
        for w in &mut p.w1 {
            *w = T::lit(rng.random_range(-b..b));
        }
        let b = 1.0 / (p.hidden as f64).sqrt();
        for w in &mut p.w2 {
            *w = T::lit(rng.random_range(-b..b));
        }
        p.log_std = vec![T::lit(init_std.ln()); num_actions];
        p
    }

    /// Parameters of the mean network, which come first in the flat layout.
    pub fn num_mean_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn num_params(&self) -> usize {
        self.num_mean_params() + self.log_std.len()
    }

    /// Flat layout `[w1, b1, w2, b2, log_std]`.
    pub fn to_flat(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.log_std]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut rest = flat;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.log_std] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
    }

    /// Checks that every array matches the declared dimensions and is finite.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let (d, h, f) = (self.input_dim, self.hidden, self.num_actions);
        for (what, got, expected) in [
            ("w1 length", self.w1.len(), h * d),
            ("b1 length", self.b1.len(), h),
            ("w2 length", self.w2.len(), f * h),
            ("b2 length", self.b2.len(), f),
            ("log_std length", self.log_std.len(), f),
        ] {
            if got != expected {
                return Err(PolicyError::Shape { what, expected, got });
            }
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(PolicyError::NotFinite);
        }
        Ok(())
    }

    /// Checks the policy against the scene it is about to drive.
    pub fn check_scene(&self, sim: &Simulator<T>) -> Result<(), PolicyError> {
        self.validate()?;
        let d = feature_dim(sim.num_vertices());
        if self.input_dim != d {
            return Err(PolicyError::Shape {
                what: "policy input dimension",
                expected: d,
                got: self.input_dim,
            });
        }
        if self.num_actions != sim.num_fibers() {
            return Err(PolicyError::Shape {
                what: "policy action count",
                expected: sim.num_fibers(),
                got: self.num_actions,
            });
        }
        Ok(())
    }
}

pub fn feature_dim(num_vertices: usize) -> usize {
    4 * num_vertices
}

/// Policy input: positions (x relative to the mean x when `center_x`),
/// followed by velocities, both flattened.
pub fn policy_features<T: Real>(io: &PolicyIoConfig, state: &State<T>) -> Vec<T> {
    let n = state.num_vertices();
    let mut feat = Vec::with_capacity(4 * n);
    feat.extend_from_slice(&state.x);
    if io.center_x && n > 0 {
        let c = (0..n).map(|i| state.x[2 * i]).sum::<T>() / T::from_usize_lossy(n);
        for i in 0..n {
            feat[2 * i] -= c;
        }
    }
    feat.extend_from_slice(&state.v);
    feat
}

/// Pulls a feature gradient back to `(dL/dx, dL/dv)`.
pub fn features_backward<T: Real>(io: &PolicyIoConfig, n: usize, dfeat: &[T]) -> (Vec<T>, Vec<T>) {
    let mut dx = dfeat[..2 * n].to_vec();
    let dv = dfeat[2 * n..].to_vec();
    if io.center_x && n > 0 {
        let mean = (0..n).map(|i| dfeat[2 * i]).sum::<T>() / T::from_usize_lossy(n);
        for i in 0..n {
            dx[2 * i] -= mean;
        }
    }
    (dx, dv)
}

struct PolicyVars<T: Real> {
    w1: Var<T>,
    b1: Var<T>,
    w2: Var<T>,
    b2: Var<T>,
    log_std: Var<T>,
}

impl<T: Real> PolicyVars<T> {
    fn new(g: &Graph<T>, p: &PolicyParams<T>, leaves: bool) -> Result<Self, PolicyError> {
        let make = |v: &[T], shape: &[usize]| {
            if leaves {
                g.leaf(v.to_vec(), shape)
            } else {
                g.constant(v.to_vec(), shape)
            }
        };
        Ok(Self {
            w1: make(&p.w1, &[p.hidden, p.input_dim])?,
            b1: make(&p.b1, &[p.hidden])?,
            w2: make(&p.w2, &[p.num_actions, p.hidden])?,
            b2: make(&p.b2, &[p.num_actions])?,
            log_std: make(&p.log_std, &[p.num_actions])?,
        })
    }

    fn all(&self) -> [&Var<T>; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.log_std]
    }

    /// Squashed mean action for features of shape `(d,)` or `(n, d)`.
    fn mean(&self, range: &ActionRange<T>, feat: &Var<T>) -> Result<Var<T>, PolicyError> {
        let h = affine(&self.w1, feat, &self.b1)?.relu();
        let raw = affine(&self.w2, &h, &self.b2)?;
        Ok(raw.sigmoid().scale(range.max - range.min).add_scalar(range.min))
    }
}

fn check_features<T: Real>(p: &PolicyParams<T>, feat: &[T]) -> Result<(), PolicyError> {
    if feat.len() != p.input_dim {
        return Err(PolicyError::Shape {
            what: "policy features",
            expected: p.input_dim,
            got: feat.len(),
        });
    }
    Ok(())
}

/// `a = a_min + sigmoid(W2 relu(W1 feat + b1) + b2) (a_max - a_min)`.
pub fn policy_forward<T: Real>(p: &PolicyParams<T>, feat: &[T]) -> Result<Vec<T>, PolicyError> {
    check_features(p, feat)?;
    let g = Graph::new();
    let vars = PolicyVars::new(&g, p, false)?;
    let x = g.constant(feat.to_vec(), &[feat.len()])?;
    Ok(vars.mean(&p.action_range, &x)?.values())
}

/// Pulls `dL/da` back through the mean network. Returns the flat parameter
/// gradient (zero on `log_std`) and the feature gradient.
pub fn policy_vjp<T: Real>(p: &PolicyParams<T>, feat: &[T], da: &[T]) -> Result<(Vec<T>, Vec<T>), PolicyError> {
    check_features(p, feat)?;
    if da.len() != p.num_actions {
        return Err(PolicyError::Shape {
            what: "action gradient",
            expected: p.num_actions,
            got: da.len(),
        });
    }
    let g = Graph::new();
    let vars = PolicyVars::new(&g, p, true)?;
    let x = g.leaf(feat.to_vec(), &[feat.len()])?;
    let a = vars.mean(&p.action_range, &x)?;
    let s = a.dot(&g.constant(da.to_vec(), &[da.len()])?)?;
    let mut targets: Vec<&Var<T>> = vars.all().to_vec();
    targets.push(&x);
    let mut grads = gradient(&s, &targets, false)?;
    let dfeat = grads.pop().map(|v| v.values()).unwrap_or_default();
    let flat = grads.iter().flat_map(|v| v.values()).collect();
    Ok((flat, dfeat))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(num_params: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step_count: 0,
        }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.step_count += 1;
        let t = i32::try_from(self.step_count).unwrap_or(i32::MAX);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    /// Deterministic evaluation reward after this iteration's update.
    pub reward: f64,
    pub env_steps: u64,
    pub wall_ms: u64,
}

/// One row per iteration, plus a row for iteration 0 holding the
/// evaluation of the initial policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iter,reward,env_steps,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.iter, r.reward, r.env_steps, r.wall_ms));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(self.to_csv().as_bytes())?;
        out.flush()
    }

    pub fn final_reward(&self) -> Option<f64> {
        self.rows.last().map(|r| r.reward)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub horizon: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    /// Horizon of the deterministic evaluation logged each iteration.
    pub eval_horizon: usize,
    /// Initial standard deviation of the Gaussian policy (PPO only).
    pub init_std: f64,
    /// Fill `wall_ms`; off by default so logs of seeded runs stay byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            iterations: 30,
            lr: 1e-3,
            seed: 0,
            eval_horizon: 100,
            init_std: 0.1,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Clipping parameter; `f64::INFINITY` disables clipping.
    pub clip: f64,
    /// Worker threads for trajectory sampling; results do not depend on it.
    pub jobs: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 10,
            clip: 0.2,
            jobs: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("could not start sampling threads: {0}")]
    Threads(String),
}

/// Seeded generator on one stream. Stream 0 initializes the policy; PPO
/// iteration `i` (from 1) samples trajectory `b` on stream `(i << 32) | b`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial policy for a scene; identical for both trainers given the seed.
pub fn initial_policy<T: Real>(sim: &Simulator<T>, cfg: &TrainConfig) -> PolicyParams<T> {
    PolicyParams::init(
        feature_dim(sim.num_vertices()),
        sim.num_fibers(),
        cfg.init_std,
        &mut stream_rng(cfg.seed, 0),
    )
}

pub fn evaluate<T: Real>(sim: &Simulator<T>, params: &PolicyParams<T>, horizon: usize) -> Result<T, RolloutError> {
    Ok(rollout(sim, &Controller::Policy(params), horizon)?.reward)
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn ms(&self) -> u64 {
        if self.enabled {
            u64::try_from(self.start.elapsed().as_millis()).unwrap_or(u64::MAX)
        } else {
            0
        }
    }
}

/// One deterministic rollout, one BPTT gradient and one Adam ascent step
/// per iteration.
pub fn train_bptt<T: Real>(sim: &Simulator<T>, cfg: &TrainConfig) -> Result<(PolicyParams<T>, TrainLog), TrainError> {
    let clock = Clock {
        start: Instant::now(),
        enabled: cfg.record_wall_time,
    };
    let mut params = initial_policy(sim, cfg);
    let mut adam = Adam::new(params.num_params(), T::lit(cfg.lr));
    let mut log = TrainLog::default();
    // the training rollout doubles as the evaluation when horizons agree
    let reuse = cfg.horizon == cfg.eval_horizon;
    let mut current = if cfg.iterations > 0 {
        Some(bptt_gradient(sim, &params, cfg.horizon)?)
    } else {
        None
    };
    let eval = |params: &PolicyParams<T>, current: &Option<crate::rollout::BpttOutput<T>>| match current {
        Some(c) if reuse => Ok(c.trajectory.reward),
        _ => evaluate(sim, params, cfg.eval_horizon),
    };
    log.rows.push(LogRow {
        iter: 0,
        reward: eval(&params, &current)?.to_f64_lossy(),
        env_steps: 0,
        wall_ms: clock.ms(),
    });
    for it in 1..=cfg.iterations {
        let Some(out) = current.take() else { break };
        let descent: Vec<T> = out.grad.iter().map(|&g| -g).collect();
        let mut flat = params.to_flat();
        adam.step(&mut flat, &descent);
        params.set_flat(&flat);
        if it < cfg.iterations {
            current = Some(bptt_gradient(sim, &params, cfg.horizon)?);
        }
        log.rows.push(LogRow {
            iter: it,
            reward: eval(&params, &current)?.to_f64_lossy(),
            env_steps: (it * cfg.horizon) as u64,
            wall_ms: clock.ms(),
        });
    }
    Ok((params, log))
}

/// Per-sample data for one PPO update.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch<T> {
    pub num_samples: usize,
    /// `num_samples x d` policy inputs.
    pub features: Vec<T>,
    /// `num_samples x f` unclamped Gaussian draws.
    pub samples: Vec<T>,
    pub advantages: Vec<T>,
    pub old_log_probs: Vec<T>,
}

/// Batch-normalized episode rewards; all zero when the rewards are identical.
pub fn normalize_advantages<T: Real>(rewards: &[T]) -> Vec<T> {
    let n = rewards.len();
    if n == 0 || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![T::zero(); n];
    }
    let nf = T::from_usize_lossy(n);
    let mean = rewards.iter().copied().sum::<T>() / nf;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / nf;
    let std = var.sqrt();
    rewards.iter().map(|&r| (r - mean) / (std + T::lit(1e-8))).collect()
}

/// `min(r A, clamp(r, 1 - clip, 1 + clip) A)`.
pub fn clipped_surrogate<T: Real>(ratio: T, advantage: T, clip: T) -> T {
    let clipped = ratio.max(T::one() - clip).min(T::one() + clip);
    (ratio * advantage).min(clipped * advantage)
}

fn log_probs<T: Real>(
    vars: &PolicyVars<T>,
    p: &PolicyParams<T>,
    features: &Var<T>,
    samples: &Var<T>,
) -> Result<Var<T>, PolicyError> {
    let mean = vars.mean(&p.action_range, features)?;
    let diff = samples.sub(&mean)?;
    let inv_var = vars.log_std.scale(T::lit(-2.0)).exp();
    let quad = diff.square().mul(&inv_var)?.scale(T::lit(-0.5));
    let per_dim = quad.sub(&vars.log_std)?;
    let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    Ok(per_dim
        .sum_axis(1)?
        .add_scalar(-half_log_2pi * T::from_usize_lossy(p.num_actions)))
}

fn batch_vars<T: Real>(g: &Graph<T>, p: &PolicyParams<T>, batch: &PpoBatch<T>) -> Result<(Var<T>, Var<T>), PolicyError> {
    let features = g.constant(batch.features.clone(), &[batch.num_samples, p.input_dim])?;
    let samples = g.constant(batch.samples.clone(), &[batch.num_samples, p.num_actions])?;
    Ok((features, samples))
}

/// Gaussian log densities of the batch's draws under `p`.
pub fn batch_log_probs<T: Real>(p: &PolicyParams<T>, batch: &PpoBatch<T>) -> Result<Vec<T>, PolicyError> {
    let g = Graph::new();
    let vars = PolicyVars::new(&g, p, false)?;
    let (f, s) = batch_vars(&g, p, batch)?;
    Ok(log_probs(&vars, p, &f, &s)?.values())
}

/// Builds the update batch from sampled trajectories, with log densities
/// under the sampling policy `p`.
pub fn build_batch<T: Real>(
    p: &PolicyParams<T>,
    io: &PolicyIoConfig,
    trajectories: &[Trajectory<T>],
) -> Result<PpoBatch<T>, PolicyError> {
    let rewards: Vec<T> = trajectories.iter().map(|t| t.reward).collect();
    let adv = normalize_advantages(&rewards);
    let mut batch = PpoBatch {
        num_samples: 0,
        features: Vec::new(),
        samples: Vec::new(),
        advantages: Vec::new(),
        old_log_probs: Vec::new(),
    };
    for (traj, &a) in trajectories.iter().zip(&adv) {
        for (state, u) in traj.states.iter().zip(&traj.samples) {
            batch.features.extend(policy_features(io, state));
            batch.samples.extend_from_slice(u);
            batch.advantages.push(a);
            batch.num_samples += 1;
        }
    }
    batch.old_log_probs = batch_log_probs(p, &batch)?;
    Ok(batch)
}

/// Clipped surrogate objective (sample mean) and its gradient over the
/// flat parameters.
pub fn ppo_objective<T: Real>(p: &PolicyParams<T>, batch: &PpoBatch<T>, clip: T) -> Result<(T, Vec<T>), PolicyError> {
    let g = Graph::new();
    let vars = PolicyVars::new(&g, p, true)?;
    let (f, s) = batch_vars(&g, p, batch)?;
    let logp = log_probs(&vars, p, &f, &s)?;
    let n = batch.num_samples;
    let old = g.constant(batch.old_log_probs.clone(), &[n])?;
    let adv = g.constant(batch.advantages.clone(), &[n])?;
    let ratio = logp.sub(&old)?.exp();
    let unclipped = ratio.mul(&adv)?;
    let clipped = ratio.clamp(T::one() - clip, T::one() + clip).mul(&adv)?;
    let objective = unclipped
        .minimum(&clipped)?
        .sum()
        .scale(T::one() / T::from_usize_lossy(n.max(1)));
    let grads = gradient(&objective, &vars.all(), false)?;
    Ok((objective.item(), grads.iter().flat_map(|v| v.values()).collect()))
}

/// `epochs` full-batch Adam ascent steps on the clipped surrogate.
pub fn ppo_update<T: Real>(
    p: &mut PolicyParams<T>,
    adam: &mut Adam<T>,
    batch: &PpoBatch<T>,
    cfg: &PpoConfig,
) -> Result<(), PolicyError> {
    let clip = T::lit(cfg.clip);
    for _ in 0..cfg.epochs {
        let (_, grad) = ppo_objective(p, batch, clip)?;
        let descent: Vec<T> = grad.iter().map(|&g| -g).collect();
        let mut flat = p.to_flat();
        adam.step(&mut flat, &descent);
        p.set_flat(&flat);
    }
    Ok(())
}

/// Samples the `iteration`-th batch of stochastic trajectories.
pub fn sample_batch<T: Real>(
    sim: &Simulator<T>,
    p: &PolicyParams<T>,
    cfg: &TrainConfig,
    ppo: &PpoConfig,
    iteration: usize,
) -> Result<Vec<Trajectory<T>>, TrainError> {
    let one = |b: usize| {
        let stream = ((iteration as u64) << 32) | b as u64;
        rollout_stochastic(sim, p, cfg.horizon, &mut stream_rng(cfg.seed, stream))
    };
    let out: Result<Vec<_>, RolloutError> = if ppo.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(ppo.jobs)
            .build()
            .map_err(|e| TrainError::Threads(e.to_string()))?;
        pool.install(|| (0..ppo.batch_size).into_par_iter().map(one).collect())
    } else {
        (0..ppo.batch_size).map(one).collect()
    };
    Ok(out?)
}

/// PPO with a Gaussian policy around the network mean and the batch-normalized
/// terminal reward as advantage.
pub fn train_ppo<T: Real>(
    sim: &Simulator<T>,
    cfg: &TrainConfig,
    ppo: &PpoConfig,
) -> Result<(PolicyParams<T>, TrainLog), TrainError> {
    if ppo.batch_size == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let clock = Clock {
        start: Instant::now(),
        enabled: cfg.record_wall_time,
    };
    let mut params = initial_policy(sim, cfg);
    let mut adam = Adam::new(params.num_params(), T::lit(cfg.lr));
    let mut log = TrainLog::default();
    log.rows.push(LogRow {
        iter: 0,
        reward: evaluate(sim, &params, cfg.eval_horizon)?.to_f64_lossy(),
        env_steps: 0,
        wall_ms: clock.ms(),
    });
    let io = sim.scene().policy_io;
    for it in 1..=cfg.iterations {
        let trajectories = sample_batch(sim, &params, cfg, ppo, it)?;
        let batch = build_batch(&params, &io, &trajectories)?;
        ppo_update(&mut params, &mut adam, &batch, ppo)?;
        log.rows.push(LogRow {
            iter: it,
            reward: evaluate(sim, &params, cfg.eval_horizon)?.to_f64_lossy(),
            env_steps: (it * ppo.batch_size * cfg.horizon) as u64,
            wall_ms: clock.ms(),
        });
    }
    Ok((params, log))
}
