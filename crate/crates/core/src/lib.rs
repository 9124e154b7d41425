//! Differentiable soft-body simulation with implicit differentiation.
//!
//! The numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod autodiff;
pub mod energy;
pub mod minimize;
pub mod rollout;
pub mod scalar;
pub mod scene;
pub mod sim;
#[cfg(test)]
mod testutil;
pub mod training;

pub use scalar::Real;

pub type Graph = autodiff::Graph<f64>;
pub type Var = autodiff::Var<f64>;
pub type Scene = scene::Scene<f64>;
pub type State = scene::State<f64>;
pub type Model = energy::Model<f64>;
pub type Simulator = sim::Simulator<f64>;
pub type SimOptions = sim::SimOptions<f64>;
pub type StepContext = sim::StepContext<f64>;
pub type QuasistaticContext = sim::QuasistaticContext<f64>;
pub type Trajectory = rollout::Trajectory<f64>;
pub type PolicyParams = training::PolicyParams<f64>;
pub type Adam = training::Adam<f64>;

/// Parses a JSON scene with `f64` scalars.
pub fn load_scene(text: &str) -> Result<Scene, scene::SceneError> {
    scene::load_scene(text)
}
