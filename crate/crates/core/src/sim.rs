//! Differentiable simulation steps.
//!
//! Forward passes find the minimizer of an energy over the free vertices.
//! Backward passes never unroll the minimizer: they solve the adjoint system
//! `H z = dL/dx1` with conjugate gradients on Hessian-vector products, then
//! contract `z` against mixed second derivatives to reach every upstream
//! input.

use thiserror::Error;

use crate::autodiff::{concat, gradient, AutodiffError, Graph, Var};
use crate::energy::{EnergyError, Model};
use crate::minimize::{
    cg_solve, minimize, CgOptions, CgReport, InitialStep, MinimizeOptions, SolveReport,
};
use crate::scalar::Real;
use crate::scene::{Scene, SceneError, State};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("forward minimization did not converge: {report:?}")]
    NotConverged { report: SolveReport<f64> },
    #[error("adjoint solve failed: {report:?}")]
    AdjointFailed { report: CgReport<f64> },
    #[error("quasistatic steps need at least one pinned vertex")]
    Unpinned,
    #[error("free vertex {index} has no mass; dynamic steps need every free vertex in a triangle")]
    MasslessVertex { index: usize },
    #[error("{what}: expected {expected} values, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

impl From<AutodiffError> for SimError {
    fn from(e: AutodiffError) -> Self {
        SimError::Energy(EnergyError::Autodiff(e))
    }
}

fn to_f64_report<T: Real>(r: &SolveReport<T>) -> SolveReport<f64> {
    SolveReport {
        converged: r.converged,
        iterations: r.iterations,
        final_gradient_inf_norm: r.final_gradient_inf_norm.to_f64_lossy(),
        final_objective: r.final_objective.to_f64_lossy(),
        line_search_failures: r.line_search_failures,
        rounding_limited_steps: r.rounding_limited_steps,
        trace: r.trace.iter().map(|v| v.to_f64_lossy()).collect(),
    }
}

fn to_f64_cg<T: Real>(r: &CgReport<T>) -> CgReport<f64> {
    CgReport {
        iterations: r.iterations,
        final_relative_residual: r.final_relative_residual.to_f64_lossy(),
        breakdown: r.breakdown,
        regularized: r.regularized,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions<T> {
    /// Stationarity tolerance `‖∇g‖∞`; `None` uses `1e-6 · max(1, mean mass)`.
    pub forward_tol: Option<T>,
    pub forward_max_iters: usize,
    /// Barzilai-Borwein by default; doubling stalls on soft quasistatic scenes.
    pub initial_step: InitialStep,
    /// Upper clamp on the trial step length. The objective's curvature scales
    /// with the lumped masses, so light bodies need steps well above one; the
    /// displacement cap bounds the first trial instead.
    pub max_step: T,
    pub cg: CgOptions<T>,
    /// Keep the accepted objective values of every forward solve in its report.
    pub record_trace: bool,
}

impl<T: Real> Default for SimOptions<T> {
    fn default() -> Self {
        Self {
            forward_tol: None,
            forward_max_iters: 2000,
            initial_step: InitialStep::BarzilaiBorwein,
            max_step: T::lit(1e6),
            cg: CgOptions::default(),
            record_trace: false,
        }
    }
}

/// State saved by [`Simulator::quasistatic_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasistaticContext<T> {
    pub a: Vec<T>,
    pub x1: Vec<T>,
    pub report: SolveReport<T>,
}

/// State saved by [`Simulator::dynamic_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext<T> {
    pub x0: Vec<T>,
    pub v0: Vec<T>,
    pub a: Vec<T>,
    pub x1: Vec<T>,
    pub report: SolveReport<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients<T> {
    pub dx0: Vec<T>,
    pub dv0: Vec<T>,
    pub da: Vec<T>,
    pub cg: CgReport<T>,
}

/// Simulation layer over one scene with pinned vertices eliminated.
#[derive(Debug, Clone)]
pub struct Simulator<T> {
    model: Model<T>,
    free: Vec<usize>,
    /// Row of each vertex in `[free rows; pinned rows]`.
    perm: Vec<usize>,
    pinned_rest: Vec<T>,
    /// Half the shortest rest edge or fiber; keeps trial steps from
    /// jumping vertices past their neighbours.
    max_displacement: T,
    /// Magnitude of the potential terms before they cancel, for the
    /// rounding band of the line search.
    energy_scale: T,
    pub options: SimOptions<T>,
}

/// Energy closure over the free-vertex block and its parameter leaves.
struct Linearization<T: Real> {
    xf: Var<T>,
    params: Vec<Var<T>>,
    grad: Var<T>,
}

impl<T: Real> Linearization<T> {
    /// `H v` for the Hessian with respect to the free block.
    fn hvp(&self, v: &[T]) -> Result<Vec<T>, SimError> {
        let dir = self.xf.graph().constant(v.to_vec(), &self.xf.shape())?;
        let s = self.grad.dot(&dir)?;
        Ok(gradient(&s, &[&self.xf], false)?.remove(0).values())
    }

    /// `-d/dp <∇ₓE, z>` for every parameter leaf.
    fn mixed(&self, z: &[T]) -> Result<Vec<Vec<T>>, SimError> {
        let dir = self.xf.graph().constant(z.to_vec(), &self.xf.shape())?;
        let s = self.grad.dot(&dir)?;
        let refs: Vec<&Var<T>> = self.params.iter().collect();
        Ok(gradient(&s, &refs, false)?
            .into_iter()
            .map(|g| g.values().into_iter().map(|c| -c).collect())
            .collect())
    }
}

fn shortest_rest_length<T: Real>(model: &Model<T>) -> Option<T> {
    let scene = &model.scene;
    let dist = |i: usize, j: usize| {
        let (p, q) = (scene.vertices[i], scene.vertices[j]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    };
    let edges = scene
        .triangles
        .iter()
        .flat_map(|t| [dist(t[0], t[1]), dist(t[1], t[2]), dist(t[2], t[0])]);
    edges
        .chain(model.rest.rest_lengths.iter().copied())
        .filter(|&l| l > T::zero())
        .reduce(T::min)
}

/// Elastic moduli times area, fiber stiffnesses, and weight times the
/// extent of the rest shape.
fn energy_scale<T: Real>(model: &Model<T>) -> T {
    let scene = &model.scene;
    let mat = &scene.material;
    let elastic = (mat.mu.abs() + mat.lambda.abs()) * model.rest.areas.iter().copied().sum::<T>();
    let springs = scene.fibers.iter().map(|f| f.stiffness.abs()).sum::<T>();
    let reach = scene
        .vertices
        .iter()
        .fold(T::one(), |m, p| m.max(p[0].abs()).max(p[1].abs()));
    let g = scene.gravity[0].abs() + scene.gravity[1].abs();
    let weight = model.rest.masses.iter().copied().sum::<T>() * g * reach;
    elastic + springs + weight
}

impl<T: Real> Simulator<T> {
    pub fn new(scene: Scene<T>) -> Result<Self, SimError> {
        let n = scene.num_vertices();
        let mut is_pinned = vec![false; n];
        for &p in &scene.pinned {
            is_pinned[p] = true;
        }
        let free: Vec<usize> = (0..n).filter(|&i| !is_pinned[i]).collect();
        let mut perm = vec![0; n];
        for (row, &v) in free.iter().chain(scene.pinned.iter()).enumerate() {
            perm[v] = row;
        }
        let pinned_rest = scene
            .pinned
            .iter()
            .flat_map(|&p| scene.vertices[p])
            .collect();
        let model = Model::new(scene)?;
        let max_displacement = shortest_rest_length(&model).unwrap_or(T::one()) * T::lit(0.5);
        let energy_scale = energy_scale(&model);
        Ok(Self {
            model,
            energy_scale,
            free,
            perm,
            pinned_rest,
            max_displacement,
            options: SimOptions::default(),
        })
    }

    pub fn with_options(mut self, options: SimOptions<T>) -> Self {
        self.options = options;
        self
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn scene(&self) -> &Scene<T> {
        &self.model.scene
    }

    pub fn num_vertices(&self) -> usize {
        self.model.num_vertices()
    }

    pub fn num_fibers(&self) -> usize {
        self.model.num_fibers()
    }

    pub fn free_vertices(&self) -> &[usize] {
        &self.free
    }

    pub fn initial_state(&self) -> State<T> {
        self.model.scene.initial_state()
    }

    /// Default stationarity tolerance scaled by the mean lumped mass.
    pub fn default_forward_tol(&self) -> T {
        let masses = &self.model.rest.masses;
        let mean = if masses.is_empty() {
            T::zero()
        } else {
            masses.iter().copied().sum::<T>() / T::from_usize_lossy(masses.len())
        };
        T::lit(1e-6) * mean.max(T::one())
    }

    /// `potential_weight` multiplies the potential inside the objective.
    fn forward_options(&self, potential_weight: T) -> MinimizeOptions<T> {
        MinimizeOptions {
            value_noise: T::epsilon() * T::lit(64.0) * self.energy_scale * potential_weight,
            tol_grad_inf: self.options.forward_tol.unwrap_or_else(|| self.default_forward_tol()),
            max_iters: self.options.forward_max_iters,
            max_displacement: Some(self.max_displacement),
            initial_step: self.options.initial_step,
            max_step: self.options.max_step,
            record_trace: self.options.record_trace,
            ..MinimizeOptions::default()
        }
    }

    fn check_len(&self, what: &'static str, v: &[T], expected: usize) -> Result<(), SimError> {
        if v.len() == expected {
            Ok(())
        } else {
            Err(SimError::Length {
                what,
                expected,
                got: v.len(),
            })
        }
    }

    fn free_part(&self, full: &[T]) -> Vec<T> {
        self.free
            .iter()
            .flat_map(|&v| [full[2 * v], full[2 * v + 1]])
            .collect()
    }

    fn assemble_values(&self, free: &[T]) -> Vec<T> {
        let mut full = self.model.scene.rest_positions();
        for (k, &v) in self.free.iter().enumerate() {
            full[2 * v] = free[2 * k];
            full[2 * v + 1] = free[2 * k + 1];
        }
        full
    }

    /// Full `n x 2` positions from the free block; pinned rows stay at rest.
    fn assemble(&self, xf: &Var<T>) -> Result<Var<T>, SimError> {
        if self.model.scene.pinned.is_empty() {
            return Ok(xf.clone());
        }
        let np = self.model.scene.pinned.len();
        let pinned = xf.graph().constant(self.pinned_rest.clone(), &[np, 2])?;
        Ok(concat(&[xf.clone(), pinned])?.gather(&self.perm)?)
    }

    fn quasistatic_energy(&self, xf: &Var<T>, a: &Var<T>) -> Result<Var<T>, SimError> {
        let x = self.assemble(xf)?;
        Ok(self.model.total_potential(&x, a, None)?)
    }

    fn incremental_energy(
        &self,
        xf: &Var<T>,
        x0: &Var<T>,
        v0: &Var<T>,
        a: &Var<T>,
    ) -> Result<Var<T>, SimError> {
        let x = self.assemble(xf)?;
        Ok(self.model.incremental_potential(&x, x0, v0, a)?)
    }

    fn free_shape(&self) -> [usize; 2] {
        [self.free.len(), 2]
    }

    /// Quasistatic objective value and gradient over the free block.
    pub fn quasistatic_objective(&self, xf: &[T], a: &[T]) -> Result<(T, Vec<T>), SimError> {
        let g = Graph::new();
        let x = g.leaf(xf.to_vec(), &self.free_shape())?;
        let av = g.constant(a.to_vec(), &[a.len()])?;
        let e = self.quasistatic_energy(&x, &av)?;
        let grad = gradient(&e, &[&x], false)?.remove(0).values();
        Ok((e.item(), grad))
    }

    /// Backward Euler objective value and gradient over the free block.
    pub fn dynamic_objective(
        &self,
        xf: &[T],
        state0: &State<T>,
        a: &[T],
    ) -> Result<(T, Vec<T>), SimError> {
        let n = self.num_vertices();
        let g = Graph::new();
        let x = g.leaf(xf.to_vec(), &self.free_shape())?;
        let x0 = g.constant(state0.x.clone(), &[n, 2])?;
        let v0 = g.constant(state0.v.clone(), &[n, 2])?;
        let av = g.constant(a.to_vec(), &[a.len()])?;
        let e = self.incremental_energy(&x, &x0, &v0, &av)?;
        let grad = gradient(&e, &[&x], false)?.remove(0).values();
        Ok((e.item(), grad))
    }

    fn run_minimizer(
        &self,
        mut objective: impl FnMut(&[T]) -> Result<(T, Vec<T>), SimError>,
        init: &[T],
        potential_weight: T,
    ) -> Result<(Vec<T>, SolveReport<T>), SimError> {
        let (xf, report) = minimize(&mut objective, init, &self.forward_options(potential_weight))?;
        if !report.converged {
            return Err(SimError::NotConverged {
                report: to_f64_report(&report),
            });
        }
        Ok((xf, report))
    }

    /// Minimizes the potential energy for actions `a`, starting at `x_init`.
    pub fn quasistatic_forward(
        &self,
        a: &[T],
        x_init: &[T],
    ) -> Result<(Vec<T>, QuasistaticContext<T>), SimError> {
        if self.model.scene.pinned.is_empty() {
            return Err(SimError::Unpinned);
        }
        self.check_len("actions", a, self.num_fibers())?;
        self.check_len("initial positions", x_init, 2 * self.num_vertices())?;
        let init = self.free_part(x_init);
        let (xf, report) = self.run_minimizer(|x| self.quasistatic_objective(x, a), &init, T::one())?;
        let x1 = self.assemble_values(&xf);
        Ok((
            x1.clone(),
            QuasistaticContext {
                a: a.to_vec(),
                x1,
                report,
            },
        ))
    }

    fn quasistatic_linearization(&self, ctx: &QuasistaticContext<T>) -> Result<Linearization<T>, SimError> {
        let g = Graph::new();
        let xf = g.leaf(self.free_part(&ctx.x1), &self.free_shape())?;
        let a = g.leaf(ctx.a.clone(), &[ctx.a.len()])?;
        let e = self.quasistatic_energy(&xf, &a)?;
        let grad = gradient(&e, &[&xf], true)?.remove(0);
        Ok(Linearization {
            xf,
            params: vec![a],
            grad,
        })
    }

    fn adjoint_solve(&self, lin: &Linearization<T>, rhs: &[T]) -> Result<(Vec<T>, CgReport<T>), SimError> {
        let cg = self.options.cg;
        let (z, report) = cg_solve(|v: &[T]| lin.hvp(v), rhs, &cg)?;
        if !report.success(cg.tol_rel) {
            return Err(SimError::AdjointFailed {
                report: to_f64_cg(&report),
            });
        }
        Ok((z, report))
    }

    /// `dL/da` through the quasistatic minimizer, given `dL/dx1`.
    pub fn quasistatic_backward(
        &self,
        ctx: &QuasistaticContext<T>,
        dl_dx1: &[T],
    ) -> Result<(Vec<T>, CgReport<T>), SimError> {
        self.check_len("dL/dx1", dl_dx1, 2 * self.num_vertices())?;
        let rhs = self.free_part(dl_dx1);
        let lin = self.quasistatic_linearization(ctx)?;
        let (z, report) = self.adjoint_solve(&lin, &rhs)?;
        let da = lin.mixed(&z)?.remove(0);
        Ok((da, report))
    }

    /// Hessian-vector product of the quasistatic energy at a saved minimizer,
    /// over the free block.
    pub fn quasistatic_hvp(&self, ctx: &QuasistaticContext<T>, v: &[T]) -> Result<Vec<T>, SimError> {
        self.quasistatic_linearization(ctx)?.hvp(v)
    }

    fn check_masses(&self) -> Result<(), SimError> {
        let masses = &self.model.rest.masses;
        match self.free.iter().find(|&&v| !(masses[v] > T::zero())) {
            Some(&index) => Err(SimError::MasslessVertex { index }),
            None => Ok(()),
        }
    }

    /// One backward Euler step: `x1` minimizes the incremental potential
    /// (warm started at `x0 + h v0`), then `v1 = (x1 - x0) / h`.
    pub fn dynamic_forward(
        &self,
        state0: &State<T>,
        a: &[T],
    ) -> Result<(State<T>, StepContext<T>), SimError> {
        let n = self.num_vertices();
        self.check_len("positions", &state0.x, 2 * n)?;
        self.check_len("velocities", &state0.v, 2 * n)?;
        self.check_len("actions", a, self.num_fibers())?;
        self.check_masses()?;
        let h = self.model.dt();
        let predicted: Vec<T> = state0
            .x
            .iter()
            .zip(&state0.v)
            .map(|(&x, &v)| x + h * v)
            .collect();
        let init = self.free_part(&predicted);
        let (xf, report) = self.run_minimizer(|x| self.dynamic_objective(x, state0, a), &init, self.model.dt() * self.model.dt())?;
        let x1 = self.assemble_values(&xf);
        let inv_h = T::one() / h;
        let v1 = x1
            .iter()
            .zip(&state0.x)
            .map(|(&p, &q)| (p - q) * inv_h)
            .collect();
        let ctx = StepContext {
            x0: state0.x.clone(),
            v0: state0.v.clone(),
            a: a.to_vec(),
            x1: x1.clone(),
            report,
        };
        Ok((State { x: x1, v: v1 }, ctx))
    }

    fn dynamic_linearization(&self, ctx: &StepContext<T>) -> Result<Linearization<T>, SimError> {
        let n = self.num_vertices();
        let g = Graph::new();
        let xf = g.leaf(self.free_part(&ctx.x1), &self.free_shape())?;
        let x0 = g.leaf(ctx.x0.clone(), &[n, 2])?;
        let v0 = g.leaf(ctx.v0.clone(), &[n, 2])?;
        let a = g.leaf(ctx.a.clone(), &[ctx.a.len()])?;
        let e = self.incremental_energy(&xf, &x0, &v0, &a)?;
        let grad = gradient(&e, &[&xf], true)?.remove(0);
        Ok(Linearization {
            xf,
            params: vec![x0, v0, a],
            grad,
        })
    }

    /// Gradients with respect to `(x0, v0, a)` given `dL/dx1` and `dL/dv1`.
    pub fn dynamic_backward(
        &self,
        ctx: &StepContext<T>,
        dl_dx1: &[T],
        dl_dv1: &[T],
    ) -> Result<StepGradients<T>, SimError> {
        let n = self.num_vertices();
        self.check_len("dL/dx1", dl_dx1, 2 * n)?;
        self.check_len("dL/dv1", dl_dv1, 2 * n)?;
        let inv_h = T::one() / self.model.dt();
        // v1 = (x1 - x0) / h folds into the position adjoint
        let folded: Vec<T> = dl_dx1
            .iter()
            .zip(dl_dv1)
            .map(|(&gx, &gv)| gx + gv * inv_h)
            .collect();
        let mut dx0: Vec<T> = dl_dv1.iter().map(|&gv| -gv * inv_h).collect();
        let rhs = self.free_part(&folded);
        if rhs.iter().all(|&v| v == T::zero()) {
            return Ok(StepGradients {
                dx0,
                dv0: vec![T::zero(); 2 * n],
                da: vec![T::zero(); ctx.a.len()],
                cg: CgReport {
                    iterations: 0,
                    final_relative_residual: T::zero(),
                    breakdown: false,
                    regularized: false,
                },
            });
        }
        let lin = self.dynamic_linearization(ctx)?;
        let (z, cg) = self.adjoint_solve(&lin, &rhs)?;
        let mut mixed = lin.mixed(&z)?.into_iter();
        let (gx0, dv0, da) = (
            mixed.next().unwrap_or_default(),
            mixed.next().unwrap_or_default(),
            mixed.next().unwrap_or_default(),
        );
        for (d, g) in dx0.iter_mut().zip(gx0) {
            *d += g;
        }
        Ok(StepGradients { dx0, dv0, da, cg })
    }

    /// Hessian-vector product of the incremental potential at a saved step,
    /// over the free block.
    pub fn dynamic_hvp(&self, ctx: &StepContext<T>, v: &[T]) -> Result<Vec<T>, SimError> {
        self.dynamic_linearization(ctx)?.hvp(v)
    }

    /// Number of free scalar coordinates.
    pub fn free_dofs(&self) -> usize {
        2 * self.free.len()
    }
}
