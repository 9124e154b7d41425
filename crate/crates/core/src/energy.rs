//! Scalar potentials built from autodiff primitives.
//!
//! Every force and every second-order quantity in the simulator is derived
//! from these functions by differentiation; nothing here is hand-derived.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Var};
use crate::scalar::Real;
use crate::scene::{RestData, Scene, SceneError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("action {index} = {value} is outside the positive domain")]
    NonPositiveAction { index: usize, value: f64 },
}

/// Scene plus the rest-state data and index lists the energies gather with.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub scene: Scene<T>,
    pub rest: RestData<T>,
    fiber_i: Vec<usize>,
    fiber_j: Vec<usize>,
    /// Interleaved `[b0, c0, b1, c1, ...]` per triangle.
    tri_tips: Vec<usize>,
    /// Interleaved `[a0, a0, a1, a1, ...]` per triangle.
    tri_roots: Vec<usize>,
    x_coords: Vec<usize>,
    y_coords: Vec<usize>,
    dm_inv_t: Vec<T>,
    half_stiffness: Vec<T>,
    /// Per-coordinate masses, `n x 2`.
    mass_xy: Vec<T>,
    weight: Vec<T>,
}

impl<T: Real> Model<T> {
    pub fn new(scene: Scene<T>) -> Result<Self, SceneError> {
        let rest = scene.compute_rest_data()?;
        let n = scene.num_vertices();
        let half = T::lit(0.5);
        let mut tri_tips = Vec::with_capacity(2 * scene.triangles.len());
        let mut tri_roots = Vec::with_capacity(2 * scene.triangles.len());
        for &[a, b, c] in &scene.triangles {
            tri_tips.extend([b, c]);
            tri_roots.extend([a, a]);
        }
        let dm_inv_t = rest
            .dm_inv
            .iter()
            .flat_map(|m| [m[0], m[2], m[1], m[3]])
            .collect();
        let mass_xy = rest.masses.iter().flat_map(|&m| [m, m]).collect();
        let weight = rest
            .masses
            .iter()
            .flat_map(|&m| [m * scene.gravity[0], m * scene.gravity[1]])
            .collect();
        Ok(Self {
            fiber_i: scene.fibers.iter().map(|f| f.i).collect(),
            fiber_j: scene.fibers.iter().map(|f| f.j).collect(),
            half_stiffness: scene.fibers.iter().map(|f| f.stiffness * half).collect(),
            tri_tips,
            tri_roots,
            x_coords: (0..n).map(|i| 2 * i).collect(),
            y_coords: (0..n).map(|i| 2 * i + 1).collect(),
            dm_inv_t,
            mass_xy,
            weight,
            scene,
            rest,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.scene.num_vertices()
    }

    pub fn num_fibers(&self) -> usize {
        self.scene.num_fibers()
    }

    pub fn dt(&self) -> T {
        self.scene.dt
    }

    pub fn mass_xy(&self) -> &[T] {
        &self.mass_xy
    }

    fn zero(&self, x: &Var<T>) -> Var<T> {
        x.graph().scalar(T::zero())
    }

    fn column(&self, x: &Var<T>, idx: &[usize]) -> Result<Var<T>, EnergyError> {
        Ok(x.reshape(&[2 * self.num_vertices()])?.gather(idx)?)
    }

    /// Contractile fibers: `Σ k/2 (l(x) / (a l0) - 1)²`.
    pub fn spring_energy(&self, x: &Var<T>, a: &Var<T>) -> Result<Var<T>, EnergyError> {
        if self.num_fibers() == 0 {
            return Ok(self.zero(x));
        }
        if let Some((index, &value)) = a.values().iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
            return Err(EnergyError::NonPositiveAction {
                index,
                value: value.to_f64_lossy(),
            });
        }
        let g = x.graph();
        let f = self.num_fibers();
        let d = x.gather(&self.fiber_j)?.sub(&x.gather(&self.fiber_i)?)?;
        let len = d.square().sum_axis(1)?.sqrt();
        let l0 = g.constant(self.rest.rest_lengths.clone(), &[f])?;
        let ratio = len.mul(&a.mul(&l0)?.recip())?;
        let k = g.constant(self.half_stiffness.clone(), &[f])?;
        Ok(ratio.add_scalar(-T::one()).square().dot(&k)?)
    }

    /// Neo-Hookean triangles with the quadratic logarithm substitute
    /// `L(J) = (J - 1) - (J - 1)² / 2`, which stays finite for inverted elements.
    pub fn neo_hookean_energy(&self, x: &Var<T>) -> Result<Var<T>, EnergyError> {
        let m = self.scene.triangles.len();
        if m == 0 {
            return Ok(self.zero(x));
        }
        let g = x.graph();
        let mu = self.scene.material.mu;
        let lambda = self.scene.material.lambda;
        let half = T::lit(0.5);
        // rows of each block are the deformed edges, i.e. Dsᵀ
        let ds_t = x
            .gather(&self.tri_tips)?
            .sub(&x.gather(&self.tri_roots)?)?
            .reshape(&[m, 2, 2])?;
        let dm_inv_t = g.constant(self.dm_inv_t.clone(), &[m, 2, 2])?;
        let f_t = dm_inv_t.matmul2(&ds_t)?;
        let i1 = f_t.square().reshape(&[m, 4])?.sum_axis(1)?;
        let jm1 = f_t.det2()?.add_scalar(-T::one());
        let log_j = jm1.sub(&jm1.square().scale(half))?;
        let psi = i1
            .add_scalar(-T::lit(2.0))
            .scale(mu * half)
            .sub(&log_j.scale(mu))?
            .add(&log_j.square().scale(lambda * half))?;
        let area = g.constant(self.rest.areas.clone(), &[m])?;
        Ok(psi.dot(&area)?)
    }

    /// One-sided ground penalty `Σ k (relu(-y))²`.
    pub fn collision_energy(&self, x: &Var<T>) -> Result<Var<T>, EnergyError> {
        let k = self.scene.contact.k_collision;
        if k == T::zero() {
            return Ok(self.zero(x));
        }
        let y = self.column(x, &self.y_coords)?;
        Ok(y.neg().relu().square().sum().scale(k))
    }

    /// Horizontal-speed penalty `Σ k_f v_x(x)² relu(eps - y0)`, gated by the
    /// previous positions `x0`.
    pub fn friction_energy(&self, x: &Var<T>, x0: &Var<T>) -> Result<Var<T>, EnergyError> {
        let c = self.scene.contact;
        if c.k_friction == T::zero() {
            return Ok(self.zero(x));
        }
        let inv_h = T::one() / self.scene.dt;
        let vx = self
            .column(x, &self.x_coords)?
            .sub(&self.column(x0, &self.x_coords)?)?
            .scale(inv_h);
        let gate = self.column(x0, &self.y_coords)?.neg().add_scalar(c.eps).relu();
        Ok(vx.square().dot(&gate)?.scale(c.k_friction))
    }

    /// `-Σ m_i g · x_i`.
    pub fn gravity_energy(&self, x: &Var<T>) -> Result<Var<T>, EnergyError> {
        let w = x.graph().constant(self.weight.clone(), &x.shape())?;
        Ok(w.dot(x)?.neg())
    }

    /// Sum of all potentials; friction is included only when previous
    /// positions are given (dynamic mode).
    pub fn total_potential(
        &self,
        x: &Var<T>,
        a: &Var<T>,
        x0: Option<&Var<T>>,
    ) -> Result<Var<T>, EnergyError> {
        let mut e = self
            .spring_energy(x, a)?
            .add(&self.neo_hookean_energy(x)?)?
            .add(&self.collision_energy(x)?)?
            .add(&self.gravity_energy(x)?)?;
        if let Some(x0) = x0 {
            e = e.add(&self.friction_energy(x, x0)?)?;
        }
        Ok(e)
    }

    /// Backward Euler objective `½‖x - (x0 + h v0)‖²_M + h² E(x, a)`.
    pub fn incremental_potential(
        &self,
        x: &Var<T>,
        x0: &Var<T>,
        v0: &Var<T>,
        a: &Var<T>,
    ) -> Result<Var<T>, EnergyError> {
        let h = self.scene.dt;
        let target = x0.add(&v0.scale(h))?;
        let d = x.sub(&target)?;
        let m = x.graph().constant(self.mass_xy.clone(), &x.shape())?;
        let momentum = d.square().dot(&m)?.scale(T::lit(0.5));
        let potential = self.total_potential(x, a, Some(x0))?;
        Ok(momentum.add(&potential.scale(h * h))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient, hvp, Graph};
    use crate::scene::load_scene;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = Model<f64>;

    fn model(doc: &str) -> M {
        Model::new(load_scene(doc).unwrap()).unwrap()
    }

    fn strip() -> M {
        model(
            r#"{
            "vertices": [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]],
            "triangles": [[0, 1, 4], [0, 4, 3], [1, 2, 5], [1, 5, 4]],
            "fibers": [{"i": 0, "j": 5, "stiffness": 30}, {"i": 3, "j": 2, "stiffness": 20},
                       {"i": 3, "j": 5, "stiffness": 10}],
            "material": {"mu": 5, "lambda": 8, "density": 2},
            "dt": 0.05,
            "contact": {"k_collision": 100, "k_friction": 3, "eps": 0.05}
        }"#,
        )
    }

    fn random_positions(m: &M, rng: &mut ChaCha8Rng, jitter: f64) -> Vec<f64> {
        m.scene
            .rest_positions()
            .iter()
            .map(|&p| p + rng.random_range(-jitter..jitter))
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().chain(b).fold(1e-12f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    type Term = fn(&M, &Var<f64>, &Var<f64>, &Var<f64>) -> Result<Var<f64>, EnergyError>;

    fn terms() -> Vec<(&'static str, Term)> {
        vec![
            ("spring", |m, x, a, _| m.spring_energy(x, a)),
            ("neo-hookean", |m, x, _, _| m.neo_hookean_energy(x)),
            ("collision", |m, x, _, _| m.collision_energy(x)),
            ("friction", |m, x, _, x0| m.friction_energy(x, x0)),
            ("gravity", |m, x, _, _| m.gravity_energy(x)),
        ]
    }

    fn eval(m: &M, term: Term, x: &[f64], a: &[f64], x0: &[f64]) -> f64 {
        let g = Graph::new();
        let n = m.num_vertices();
        let xv = g.constant(x.to_vec(), &[n, 2]).unwrap();
        let av = g.constant(a.to_vec(), &[a.len()]).unwrap();
        let x0v = g.constant(x0.to_vec(), &[n, 2]).unwrap();
        term(m, &xv, &av, &x0v).unwrap().item()
    }

    fn grad(m: &M, term: Term, x: &[f64], a: &[f64], x0: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let n = m.num_vertices();
        let xv = g.leaf(x.to_vec(), &[n, 2]).unwrap();
        let av = g.constant(a.to_vec(), &[a.len()]).unwrap();
        let x0v = g.constant(x0.to_vec(), &[n, 2]).unwrap();
        let e = term(m, &xv, &av, &x0v).unwrap();
        gradient(&e, &[&xv], false).unwrap()[0].values()
    }

    /// Positions below ground and previous positions inside the friction gate,
    /// away from the relu kinks.
    fn contact_config(m: &M, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let mut x = random_positions(m, rng, 0.15);
        let mut x0 = random_positions(m, rng, 0.15);
        for i in 0..m.num_vertices() {
            if m.scene.vertices[i][1] == 0.0 {
                x[2 * i + 1] = -rng.random_range(0.02..0.1);
                x0[2 * i + 1] = -rng.random_range(0.0..0.03);
            }
        }
        (x, x0)
    }

    #[test]
    fn every_term_force_matches_finite_differences() {
        let m = strip();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let (x, x0) = contact_config(&m, &mut rng);
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(0.4..1.0)).collect();
            for (name, term) in terms() {
                let ad = grad(&m, term, &x, &a, &x0);
                let eps = 1e-6;
                let fd: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let mut p = x.clone();
                        let mut q = x.clone();
                        p[i] += eps;
                        q[i] -= eps;
                        (eval(&m, term, &p, &a, &x0) - eval(&m, term, &q, &a, &x0)) / (2.0 * eps)
                    })
                    .collect();
                let err = rel_err(&ad, &fd);
                assert!(err < 1e-6, "{name}: rel err {err}");
            }
        }
    }

    #[test]
    fn every_term_hvp_is_symmetric_and_matches_gradient_differences() {
        let m = strip();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, x0) = contact_config(&m, &mut rng);
        let a = vec![0.7, 0.55, 0.9];
        let n = m.num_vertices();
        for (name, term) in terms() {
            let u: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let apply = |v: &[f64]| {
                let g = Graph::new();
                let xv = g.leaf(x.clone(), &[n, 2]).unwrap();
                let av = g.constant(a.clone(), &[3]).unwrap();
                let x0v = g.constant(x0.clone(), &[n, 2]).unwrap();
                hvp(|xx: &Var<f64>| term(&m, xx, &av, &x0v), &xv, v).unwrap()
            };
            let (hu, hw) = (apply(&u), apply(&w));
            let lhs: f64 = w.iter().zip(&hu).map(|(p, q)| p * q).sum();
            let rhs: f64 = u.iter().zip(&hw).map(|(p, q)| p * q).sum();
            let scale = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!((lhs - rhs).abs() / scale < 1e-10, "{name}: asymmetric");

            let eps = 1e-6;
            let plus: Vec<f64> = x.iter().zip(&u).map(|(p, q)| p + eps * q).collect();
            let minus: Vec<f64> = x.iter().zip(&u).map(|(p, q)| p - eps * q).collect();
            let fd: Vec<f64> = grad(&m, term, &plus, &a, &x0)
                .iter()
                .zip(grad(&m, term, &minus, &a, &x0))
                .map(|(p, q)| (p - q) / (2.0 * eps))
                .collect();
            let err = rel_err(&hu, &fd);
            assert!(err < 1e-5, "{name}: hvp vs fd rel err {err}");
        }
    }

    #[test]
    fn spring_examples() {
        let m = model(
            r#"{"vertices": [[0, 0], [1, 0]], "fibers": [{"i": 0, "j": 1, "stiffness": 2}],
                "material": {"mu": 1, "lambda": 1, "density": 1}}"#,
        );
        let x = [0.0, 0.0, 1.0, 0.0];
        let spring: Term = |m, x, a, _| m.spring_energy(x, a);
        assert_eq!(eval(&m, spring, &x, &[0.5], &x), 1.0);
        let contracted = [0.0, 0.0, 0.5, 0.0];
        assert_eq!(eval(&m, spring, &contracted, &[0.5], &x), 0.0);

        let g = Graph::new();
        let xv = g.constant(x.to_vec(), &[2, 2]).unwrap();
        let bad = g.constant(vec![0.0], &[1]).unwrap();
        assert!(matches!(
            m.spring_energy(&xv, &bad),
            Err(EnergyError::NonPositiveAction { index: 0, .. })
        ));
    }

    fn single_triangle(mu: f64, lambda: f64) -> M {
        model(&format!(
            r#"{{"vertices": [[0, 0], [1, 0], [0, 1]], "triangles": [[0, 1, 2]],
                "material": {{"mu": {mu}, "lambda": {lambda}, "density": 1}}}}"#
        ))
    }

    /// Independent evaluation of the energy density from invariants.
    fn psi_reference(mu: f64, lambda: f64, f: [[f64; 2]; 2]) -> f64 {
        let i1 = f[0][0].powi(2) + f[0][1].powi(2) + f[1][0].powi(2) + f[1][1].powi(2);
        let j = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        let l = (j - 1.0) - 0.5 * (j - 1.0).powi(2);
        0.5 * mu * (i1 - 2.0) - mu * l + 0.5 * lambda * l * l
    }

    #[test]
    fn neo_hookean_examples() {
        let m = single_triangle(1.0, 1.0);
        let nh: Term = |m, x, _, _| m.neo_hookean_energy(x);
        let rest = m.scene.rest_positions();
        assert_eq!(eval(&m, nh, &rest, &[], &rest), 0.0);
        assert!(grad(&m, nh, &rest, &[], &rest).iter().all(|&f| f == 0.0));

        // F = 2 I on the unit right triangle (area 1/2)
        let doubled: Vec<f64> = rest.iter().map(|p| 2.0 * p).collect();
        let psi = psi_reference(1.0, 1.0, [[2.0, 0.0], [0.0, 2.0]]);
        assert!((psi - 5.625).abs() < 1e-15);
        assert!((eval(&m, nh, &doubled, &[], &rest) - 0.5 * 5.625).abs() < 1e-12);

        // general affine map against the reference density
        let f = [[1.1, 0.3], [-0.2, 0.8]];
        let mapped: Vec<f64> = m
            .scene
            .vertices
            .iter()
            .flat_map(|v| [f[0][0] * v[0] + f[0][1] * v[1], f[1][0] * v[0] + f[1][1] * v[1]])
            .collect();
        let m2 = single_triangle(3.0, 7.0);
        let expected = 0.5 * psi_reference(3.0, 7.0, f);
        assert!((eval(&m2, nh, &mapped, &[], &rest) - expected).abs() < 1e-12);

        // inverted element stays finite
        let inverted = [0.0, 0.0, 1.0, 0.0, 0.0, -1.0];
        assert!(eval(&m, nh, &inverted, &[], &rest).is_finite());
    }

    #[test]
    fn contact_examples() {
        let m = model(
            r#"{"vertices": [[0, 0]], "material": {"mu": 1, "lambda": 1, "density": 1},
                "dt": 0.1, "contact": {"k_collision": 10, "k_friction": 1, "eps": 0.01}}"#,
        );
        let col: Term = |m, x, _, _| m.collision_energy(x);
        let fr: Term = |m, x, _, x0| m.friction_energy(x, x0);
        let x = [0.3, -0.1];
        assert!((eval(&m, col, &x, &[], &x) - 0.1).abs() < 1e-15);
        assert_eq!(eval(&m, col, &[0.3, 0.2], &[], &x), 0.0);
        assert!((grad(&m, col, &x, &[], &x)[1] + 2.0).abs() < 1e-14);

        let x0 = [0.0, -0.05];
        let moved = [0.2, 0.0];
        assert!((eval(&m, fr, &moved, &[], &x0) - 0.24).abs() < 1e-14);
        assert_eq!(eval(&m, fr, &moved, &[], &[0.0, 0.5]), 0.0);
        assert_eq!(eval(&m, fr, &[0.0, 0.3], &[], &x0), 0.0);
    }

    #[test]
    fn gravity_examples() {
        // one triangle of density 12 and area 1/2 gives vertex masses of 2
        let mk = |g: f64| {
            model(&format!(
                r#"{{"vertices": [[0, 0], [1, 0], [0, 1]], "triangles": [[0, 1, 2]],
                    "material": {{"mu": 1, "lambda": 1, "density": 12}}, "gravity": [0, {g}]}}"#
            ))
        };
        let gr: Term = |m, x, _, _| m.gravity_energy(x);
        let m = mk(-9.8);
        let up = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        assert!((eval(&m, gr, &up, &[], &up) - 19.6).abs() < 1e-12);
        let force: Vec<f64> = grad(&m, gr, &up, &[], &up).iter().map(|g| -g).collect();
        assert!((force[1] + 19.6).abs() < 1e-12 && force[0] == 0.0);
        assert_eq!(eval(&mk(0.0), gr, &up, &[], &up), 0.0);
    }

    #[test]
    fn total_is_the_sum_of_terms() {
        let m = strip();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, x0) = contact_config(&m, &mut rng);
        let a = vec![0.8, 0.6, 0.95];
        let total_dyn: Term = |m, x, a, x0| m.total_potential(x, a, Some(x0));
        let total_qs: Term = |m, x, a, _| m.total_potential(x, a, None);
        let parts: f64 = terms().iter().map(|(_, t)| eval(&m, *t, &x, &a, &x0)).sum();
        assert!((eval(&m, total_dyn, &x, &a, &x0) - parts).abs() < 1e-12 * parts.abs().max(1.0));
        let fric = eval(&m, terms()[3].1, &x, &a, &x0);
        assert!((eval(&m, total_qs, &x, &a, &x0) - (parts - fric)).abs() < 1e-10);

        let mut sum_grad = vec![0.0; x.len()];
        for (_, t) in terms() {
            for (s, g) in sum_grad.iter_mut().zip(grad(&m, t, &x, &a, &x0)) {
                *s += g;
            }
        }
        assert!(rel_err(&grad(&m, total_dyn, &x, &a, &x0), &sum_grad) < 1e-12);
    }

    #[test]
    fn supported_rest_state_has_zero_potential() {
        let m = model(
            r#"{"vertices": [[0, 0], [1, 0], [0, 1]], "triangles": [[0, 1, 2]],
                "fibers": [{"i": 0, "j": 1, "stiffness": 4}], "gravity": [0, 0],
                "material": {"mu": 1, "lambda": 1, "density": 1},
                "contact": {"k_collision": 100, "k_friction": 1, "eps": 0.01}}"#,
        );
        let total: Term = |m, x, a, x0| m.total_potential(x, a, Some(x0));
        let rest = m.scene.rest_positions();
        assert_eq!(eval(&m, total, &rest, &[1.0], &rest), 0.0);
    }

    fn incremental(m: &M, x: &[f64], x0: &[f64], v0: &[f64], a: &[f64], leaf: bool) -> (f64, Vec<f64>) {
        let g = Graph::new();
        let n = m.num_vertices();
        let xv = if leaf {
            g.leaf(x.to_vec(), &[n, 2]).unwrap()
        } else {
            g.constant(x.to_vec(), &[n, 2]).unwrap()
        };
        let x0v = g.constant(x0.to_vec(), &[n, 2]).unwrap();
        let v0v = g.constant(v0.to_vec(), &[n, 2]).unwrap();
        let av = g.constant(a.to_vec(), &[a.len()]).unwrap();
        let e = m.incremental_potential(&xv, &x0v, &v0v, &av).unwrap();
        let gr = if leaf { gradient(&e, &[&xv], false).unwrap()[0].values() } else { Vec::new() };
        (e.item(), gr)
    }

    #[test]
    fn incremental_potential_examples() {
        let m = model(
            r#"{"vertices": [[0, 0], [1, 0], [0, 1]], "triangles": [[0, 1, 2]],
                "gravity": [0, 0], "dt": 0.1,
                "material": {"mu": 1, "lambda": 1, "density": 1}}"#,
        );
        let x0 = m.scene.rest_positions();
        let v0 = vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5];
        let target: Vec<f64> = x0.iter().zip(&v0).map(|(x, v)| x + 0.1 * v).collect();
        let (val, gr) = incremental(&m, &target, &x0, &v0, &[], true);
        assert!(val.abs() < 1e-15);
        assert!(gr.iter().all(|g| g.abs() < 1e-14));

        let strip = strip();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (x, x0) = contact_config(&strip, &mut rng);
        let v0: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = vec![0.9, 0.5, 0.75];
        let (_, ad) = incremental(&strip, &x, &x0, &v0, &a, true);
        let eps = 1e-6;
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                let mut q = x.clone();
                p[i] += eps;
                q[i] -= eps;
                (incremental(&strip, &p, &x0, &v0, &a, false).0
                    - incremental(&strip, &q, &x0, &v0, &a, false).0)
                    / (2.0 * eps)
            })
            .collect();
        assert!(rel_err(&ad, &fd) < 1e-6);
    }

    fn transform(x: &[f64], theta: f64, t: [f64; 2]) -> Vec<f64> {
        let (s, c) = theta.sin_cos();
        x.chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1]])
            .collect()
    }

    proptest! {
        #[test]
        fn elastic_and_spring_energies_are_rigid_motion_invariant(
            seed in 0u64..1000,
            theta in -3.1f64..3.1,
            tx in -5.0f64..5.0,
            ty in -5.0f64..5.0,
        ) {
            let m = strip();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_positions(&m, &mut rng, 0.2);
            let moved = transform(&x, theta, [tx, ty]);
            let a = vec![0.7, 0.8, 0.5];
            let nh: Term = |m, x, _, _| m.neo_hookean_energy(x);
            let sp: Term = |m, x, a, _| m.spring_energy(x, a);
            for term in [nh, sp] {
                let e0 = eval(&m, term, &x, &a, &x);
                let e1 = eval(&m, term, &moved, &a, &x);
                prop_assert!((e0 - e1).abs() <= 1e-10 * e0.abs().max(1e-3));
            }
        }

        #[test]
        fn non_gravity_terms_are_non_negative(seed in 0u64..1000) {
            let m = strip();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_positions(&m, &mut rng, 0.4);
            let x0 = random_positions(&m, &mut rng, 0.4);
            let a = vec![0.5, 0.6, 0.9];
            for (name, term) in terms().into_iter().filter(|(n, _)| *n != "gravity") {
                let e = eval(&m, term, &x, &a, &x0);
                prop_assert!(e >= 0.0, "{} negative: {}", name, e);
            }
            let above: Vec<f64> = x.iter().enumerate().map(|(i, &v)| if i % 2 == 1 { v.abs() + 0.1 } else { v }).collect();
            prop_assert_eq!(eval(&m, terms()[2].1, &above, &a, &x0), 0.0);
            prop_assert_eq!(eval(&m, terms()[3].1, &x, &a, &above), 0.0);
        }
    }
}
