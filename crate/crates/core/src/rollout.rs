//! Episodes of policy-driven simulation and backpropagation through time.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::scalar::Real;
use crate::scene::State;
use crate::sim::{SimError, Simulator, StepContext};
use crate::training::{features_backward, policy_features, policy_forward, policy_vjp, PolicyError, PolicyParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("horizon must be at least one step")]
    EmptyHorizon,
    #[error("step {step}: {source}")]
    Step { step: usize, source: SimError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("constant controller gives {got} actions but the scene has {expected} fibers")]
    ActionCount { expected: usize, got: usize },
}

/// Where actions come from during a rollout.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a, T> {
    Policy(&'a PolicyParams<T>),
    /// The same activation on every fiber at every step.
    Constant(T),
    /// A fixed activation per fiber at every step.
    PerFiber(&'a [T]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    /// `H + 1` states, starting with the initial one.
    pub states: Vec<State<T>>,
    /// The `H` actions applied to the simulator.
    pub actions: Vec<Vec<T>>,
    /// Unclamped Gaussian draws behind `actions`; empty for deterministic rollouts.
    pub samples: Vec<Vec<T>>,
    pub reward: T,
}

impl<T: Real> Trajectory<T> {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Mean horizontal displacement of the vertices between the first and last state.
pub fn reward<T: Real>(states: &[State<T>]) -> T {
    let (Some(first), Some(last)) = (states.first(), states.last()) else {
        return T::zero();
    };
    let n = first.num_vertices();
    if n == 0 {
        return T::zero();
    }
    let total: T = (0..n).map(|i| last.x[2 * i] - first.x[2 * i]).sum();
    total / T::from_usize_lossy(n)
}

fn controller_actions<T: Real>(
    sim: &Simulator<T>,
    controller: &Controller<'_, T>,
    state: &State<T>,
) -> Result<Vec<T>, RolloutError> {
    match controller {
        Controller::Policy(p) => {
            let feat = policy_features(&sim.scene().policy_io, state);
            Ok(policy_forward(p, &feat)?)
        }
        Controller::Constant(a) => Ok(vec![*a; sim.num_fibers()]),
        Controller::PerFiber(a) => Ok(a.to_vec()),
    }
}

fn check_controller<T: Real>(sim: &Simulator<T>, controller: &Controller<'_, T>) -> Result<(), RolloutError> {
    match controller {
        Controller::Policy(p) => p.check_scene(sim)?,
        Controller::PerFiber(a) if a.len() != sim.num_fibers() => {
            return Err(RolloutError::ActionCount {
                expected: sim.num_fibers(),
                got: a.len(),
            })
        }
        _ => {}
    }
    Ok(())
}

fn step<T: Real>(
    sim: &Simulator<T>,
    t: usize,
    state: &State<T>,
    a: &[T],
) -> Result<(State<T>, StepContext<T>), RolloutError> {
    sim.dynamic_forward(state, a)
        .map_err(|source| RolloutError::Step { step: t, source })
}

fn run_deterministic<T: Real>(
    sim: &Simulator<T>,
    controller: &Controller<'_, T>,
    horizon: usize,
    mut keep: Option<&mut Vec<StepContext<T>>>,
) -> Result<Trajectory<T>, RolloutError> {
    if horizon == 0 {
        return Err(RolloutError::EmptyHorizon);
    }
    check_controller(sim, controller)?;
    let mut states = vec![sim.initial_state()];
    let mut actions = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let a = controller_actions(sim, controller, &states[t])?;
        let (next, ctx) = step(sim, t, &states[t], &a)?;
        if let Some(k) = keep.as_deref_mut() {
            k.push(ctx);
        }
        actions.push(a);
        states.push(next);
    }
    let reward = reward(&states);
    Ok(Trajectory {
        states,
        actions,
        samples: Vec::new(),
        reward,
    })
}

/// Runs `horizon` steps from the scene's rest state with deterministic actions.
pub fn rollout<T: Real>(
    sim: &Simulator<T>,
    controller: &Controller<'_, T>,
    horizon: usize,
) -> Result<Trajectory<T>, RolloutError> {
    run_deterministic(sim, controller, horizon, None)
}

/// Runs `horizon` steps with actions drawn from the Gaussian policy
/// `N(mean(s), exp(log_std)²)` and clamped to the action range.
pub fn rollout_stochastic<T: Real, R: Rng + ?Sized>(
    sim: &Simulator<T>,
    params: &PolicyParams<T>,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory<T>, RolloutError> {
    if horizon == 0 {
        return Err(RolloutError::EmptyHorizon);
    }
    params.check_scene(sim)?;
    let std: Vec<T> = params.log_std.iter().map(|s| s.exp()).collect();
    let (lo, hi) = (params.action_range.min, params.action_range.max);
    let mut states = vec![sim.initial_state()];
    let mut actions = Vec::with_capacity(horizon);
    let mut samples = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let feat = policy_features(&sim.scene().policy_io, &states[t]);
        let mean = policy_forward(params, &feat)?;
        let u: Vec<T> = mean
            .iter()
            .zip(&std)
            .map(|(&m, &s)| m + s * T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let a: Vec<T> = u.iter().map(|&v| v.max(lo).min(hi)).collect();
        let (next, _) = step(sim, t, &states[t], &a)?;
        samples.push(u);
        actions.push(a);
        states.push(next);
    }
    let reward = reward(&states);
    Ok(Trajectory {
        states,
        actions,
        samples,
        reward,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpttOutput<T> {
    /// Gradient of `scale · reward` over the flattened policy parameters.
    pub grad: Vec<T>,
    pub trajectory: Trajectory<T>,
}

/// Reward gradient of a deterministic rollout, by a reverse sweep of
/// adjoint solves through every step and every policy evaluation.
pub fn bptt_gradient<T: Real>(
    sim: &Simulator<T>,
    params: &PolicyParams<T>,
    horizon: usize,
) -> Result<BpttOutput<T>, RolloutError> {
    bptt_gradient_scaled(sim, params, horizon, T::one())
}

/// [`bptt_gradient`] for the objective `scale · reward`.
pub fn bptt_gradient_scaled<T: Real>(
    sim: &Simulator<T>,
    params: &PolicyParams<T>,
    horizon: usize,
    scale: T,
) -> Result<BpttOutput<T>, RolloutError> {
    let mut contexts = Vec::with_capacity(horizon);
    let trajectory = run_deterministic(sim, &Controller::Policy(params), horizon, Some(&mut contexts))?;
    let n = sim.num_vertices();
    let io = &sim.scene().policy_io;

    let mut gx = vec![T::zero(); 2 * n];
    let per_vertex = scale / T::from_usize_lossy(n.max(1));
    for i in 0..n {
        gx[2 * i] = per_vertex;
    }
    let mut gv = vec![T::zero(); 2 * n];
    let mut grad = vec![T::zero(); params.num_params()];
    for t in (0..horizon).rev() {
        let g = sim
            .dynamic_backward(&contexts[t], &gx, &gv)
            .map_err(|source| RolloutError::Step { step: t, source })?;
        let feat = policy_features(io, &trajectory.states[t]);
        let (dparams, dfeat) = policy_vjp(params, &feat, &g.da)?;
        for (acc, d) in grad.iter_mut().zip(dparams) {
            *acc += d;
        }
        let (dx, dv) = features_backward(io, n, &dfeat);
        gx = g.dx0.iter().zip(dx).map(|(&a, b)| a + b).collect();
        gv = g.dv0.iter().zip(dv).map(|(&a, b)| a + b).collect();
    }
    Ok(BpttOutput { grad, trajectory })
}

#[derive(Serialize)]
struct Record<'a, T> {
    t: usize,
    x: Vec<[T; 2]>,
    v: Vec<[T; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<&'a [T]>,
}

fn pairs<T: Copy>(flat: &[T]) -> Vec<[T; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Writes one JSON object per state: `{"t", "x", "v", "a"}`, where the last
/// record has no action.
pub fn write_trajectory<T: Real + Serialize, W: Write>(traj: &Trajectory<T>, mut out: W) -> std::io::Result<()> {
    for (t, state) in traj.states.iter().enumerate() {
        let record = Record {
            t,
            x: pairs(&state.x),
            v: pairs(&state.v),
            a: traj.actions.get(t).map(|a| a.as_slice()),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
