//! Scene description, document parsing, and rest-state precomputation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{what}: index {index} out of range for {len} vertices")]
    IndexOutOfRange {
        what: String,
        index: usize,
        len: usize,
    },
    #[error("{field} must be positive, got {value}")]
    NotPositive { field: String, value: f64 },
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: String, value: f64 },
    #[error("triangle {index} is degenerate (signed area {area:e})")]
    DegenerateTriangle { index: usize, area: f64 },
    #[error("fiber {index}: {reason}")]
    InvalidFiber { index: usize, reason: &'static str },
    #[error("{field} must be finite")]
    NotFinite { field: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fiber<T> {
    pub i: usize,
    pub j: usize,
    pub stiffness: T,
    pub rest_length: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams<T> {
    pub mu: T,
    pub lambda: T,
    pub density: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactParams<T> {
    pub k_collision: T,
    pub k_friction: T,
    /// Ground-overlap tolerance that opens the friction gate.
    pub eps: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyIoConfig {
    /// Express policy x-coordinates relative to the body centroid.
    #[serde(default = "default_true")]
    pub center_x: bool,
}

impl Default for PolicyIoConfig {
    fn default() -> Self {
        Self { center_x: true }
    }
}

fn default_true() -> bool {
    true
}

/// Immutable, validated simulation scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub vertices: Vec<[T; 2]>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub fibers: Vec<Fiber<T>>,
    pub material: MaterialParams<T>,
    /// Sorted, unique.
    pub pinned: Vec<usize>,
    pub gravity: [T; 2],
    pub dt: T,
    pub contact: ContactParams<T>,
    pub policy_io: PolicyIoConfig,
}

/// Rest-state quantities derived once per scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RestData<T> {
    pub areas: Vec<T>,
    /// Row-major inverse rest-shape matrix per triangle.
    pub dm_inv: Vec<[T; 4]>,
    pub rest_lengths: Vec<T>,
    /// Diagonal of the lumped mass matrix.
    pub masses: Vec<T>,
}

/// Per-step simulation state, `n x 2` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct State<T> {
    pub x: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> State<T> {
    pub fn num_vertices(&self) -> usize {
        self.x.len() / 2
    }
}

// ---- document schema ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberDoc {
    pub i: usize,
    pub j: usize,
    pub stiffness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_length: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialDoc {
    pub mu: f64,
    pub lambda: f64,
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactDoc {
    #[serde(default)]
    pub k_collision: f64,
    #[serde(default)]
    pub k_friction: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for ContactDoc {
    fn default() -> Self {
        Self {
            k_collision: 0.0,
            k_friction: 0.0,
            eps: default_eps(),
        }
    }
}

fn default_eps() -> f64 {
    1e-2
}

fn default_gravity() -> [f64; 2] {
    [0.0, -9.8]
}

fn default_dt() -> f64 {
    0.01
}

/// On-disk scene document (JSON, strict field set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub vertices: Vec<[f64; 2]>,
    #[serde(default)]
    pub triangles: Vec<[usize; 3]>,
    #[serde(default)]
    pub fibers: Vec<FiberDoc>,
    pub material: MaterialDoc,
    #[serde(default)]
    pub pinned: Vec<usize>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 2],
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub contact: ContactDoc,
    #[serde(default)]
    pub policy_io: PolicyIoConfig,
}

/// Parses and validates a scene document.
pub fn load_scene<T: Real>(text: &str) -> Result<Scene<T>, SceneError> {
    let doc: SceneDocument = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Scene::from_document(&doc)
}

fn positive(field: &str, value: f64) -> Result<(), SceneError> {
    finite(field, value)?;
    if value > 0.0 {
        Ok(())
    } else {
        Err(SceneError::NotPositive {
            field: field.to_string(),
            value,
        })
    }
}

fn non_negative(field: &str, value: f64) -> Result<(), SceneError> {
    finite(field, value)?;
    if value >= 0.0 {
        Ok(())
    } else {
        Err(SceneError::Negative {
            field: field.to_string(),
            value,
        })
    }
}

fn finite(field: &str, value: f64) -> Result<(), SceneError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(SceneError::NotFinite {
            field: field.to_string(),
        })
    }
}

fn check_index(what: impl FnOnce() -> String, index: usize, len: usize) -> Result<(), SceneError> {
    if index < len {
        Ok(())
    } else {
        Err(SceneError::IndexOutOfRange {
            what: what(),
            index,
            len,
        })
    }
}

fn signed_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

impl<T: Real> Scene<T> {
    pub fn from_document(doc: &SceneDocument) -> Result<Self, SceneError> {
        let n = doc.vertices.len();
        for (k, v) in doc.vertices.iter().enumerate() {
            finite(&format!("vertices[{k}]"), v[0])?;
            finite(&format!("vertices[{k}]"), v[1])?;
        }
        positive("dt", doc.dt)?;
        positive("material.mu", doc.material.mu)?;
        non_negative("material.lambda", doc.material.lambda)?;
        positive("material.density", doc.material.density)?;
        non_negative("contact.k_collision", doc.contact.k_collision)?;
        non_negative("contact.k_friction", doc.contact.k_friction)?;
        non_negative("contact.eps", doc.contact.eps)?;
        finite("gravity", doc.gravity[0])?;
        finite("gravity", doc.gravity[1])?;

        let mut triangles = Vec::with_capacity(doc.triangles.len());
        for (t, tri) in doc.triangles.iter().enumerate() {
            for &idx in tri {
                check_index(|| format!("triangle {t}"), idx, n)?;
            }
            let [a, b, c] = *tri;
            let area = signed_area(doc.vertices[a], doc.vertices[b], doc.vertices[c]);
            if area.abs() < MIN_AREA {
                return Err(SceneError::DegenerateTriangle { index: t, area });
            }
            triangles.push(if area > 0.0 { [a, b, c] } else { [a, c, b] });
        }

        let mut fibers = Vec::with_capacity(doc.fibers.len());
        for (f, fib) in doc.fibers.iter().enumerate() {
            check_index(|| format!("fiber {f}"), fib.i, n)?;
            check_index(|| format!("fiber {f}"), fib.j, n)?;
            if fib.i == fib.j {
                return Err(SceneError::InvalidFiber {
                    index: f,
                    reason: "endpoints must differ",
                });
            }
            non_negative(&format!("fibers[{f}].stiffness"), fib.stiffness)?;
            let rest = match fib.rest_length {
                Some(l) => l,
                None => {
                    let (p, q) = (doc.vertices[fib.i], doc.vertices[fib.j]);
                    (q[0] - p[0]).hypot(q[1] - p[1])
                }
            };
            if !(rest.is_finite() && rest > 0.0) {
                return Err(SceneError::InvalidFiber {
                    index: f,
                    reason: "rest length must be positive",
                });
            }
            fibers.push(Fiber {
                i: fib.i,
                j: fib.j,
                stiffness: T::lit(fib.stiffness),
                rest_length: T::lit(rest),
            });
        }

        let mut pinned = doc.pinned.clone();
        for &p in &pinned {
            check_index(|| "pinned".to_string(), p, n)?;
        }
        pinned.sort_unstable();
        pinned.dedup();

        Ok(Scene {
            vertices: doc.vertices.iter().map(|v| [T::lit(v[0]), T::lit(v[1])]).collect(),
            triangles,
            fibers,
            material: MaterialParams {
                mu: T::lit(doc.material.mu),
                lambda: T::lit(doc.material.lambda),
                density: T::lit(doc.material.density),
            },
            pinned,
            gravity: [T::lit(doc.gravity[0]), T::lit(doc.gravity[1])],
            dt: T::lit(doc.dt),
            contact: ContactParams {
                k_collision: T::lit(doc.contact.k_collision),
                k_friction: T::lit(doc.contact.k_friction),
                eps: T::lit(doc.contact.eps),
            },
            policy_io: doc.policy_io,
        })
    }

    pub fn to_document(&self) -> SceneDocument {
        let f = |x: T| x.to_f64_lossy();
        SceneDocument {
            vertices: self.vertices.iter().map(|v| [f(v[0]), f(v[1])]).collect(),
            triangles: self.triangles.clone(),
            fibers: self
                .fibers
                .iter()
                .map(|fib| FiberDoc {
                    i: fib.i,
                    j: fib.j,
                    stiffness: f(fib.stiffness),
                    rest_length: Some(f(fib.rest_length)),
                })
                .collect(),
            material: MaterialDoc {
                mu: f(self.material.mu),
                lambda: f(self.material.lambda),
                density: f(self.material.density),
            },
            pinned: self.pinned.clone(),
            gravity: [f(self.gravity[0]), f(self.gravity[1])],
            dt: f(self.dt),
            contact: ContactDoc {
                k_collision: f(self.contact.k_collision),
                k_friction: f(self.contact.k_friction),
                eps: f(self.contact.eps),
            },
            policy_io: self.policy_io,
        }
    }

    /// Pretty-printed JSON scene document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("scene document serializes")
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_fibers(&self) -> usize {
        self.fibers.len()
    }

    /// Rest positions as a flat `n x 2` array.
    pub fn rest_positions(&self) -> Vec<T> {
        self.vertices.iter().flat_map(|v| [v[0], v[1]]).collect()
    }

    /// Rest positions, zero velocity.
    pub fn initial_state(&self) -> State<T> {
        let x = self.rest_positions();
        let v = vec![T::zero(); x.len()];
        State { x, v }
    }

    pub fn compute_rest_data(&self) -> Result<RestData<T>, SceneError> {
        let n = self.num_vertices();
        let half = T::lit(0.5);
        let third = T::one() / T::lit(3.0);
        let mut areas = Vec::with_capacity(self.triangles.len());
        let mut dm_inv = Vec::with_capacity(self.triangles.len());
        let mut masses = vec![T::zero(); n];
        for (t, &[a, b, c]) in self.triangles.iter().enumerate() {
            let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
            // columns are the two rest edges leaving vertex a
            let (m00, m01) = (pb[0] - pa[0], pc[0] - pa[0]);
            let (m10, m11) = (pb[1] - pa[1], pc[1] - pa[1]);
            let det = m00 * m11 - m01 * m10;
            let area = det * half;
            if area.abs() < T::lit(MIN_AREA) {
                return Err(SceneError::DegenerateTriangle {
                    index: t,
                    area: area.to_f64_lossy(),
                });
            }
            areas.push(area);
            dm_inv.push([m11 / det, -m01 / det, -m10 / det, m00 / det]);
            let share = self.material.density * area * third;
            for v in [a, b, c] {
                masses[v] += share;
            }
        }
        Ok(RestData {
            areas,
            dm_inv,
            rest_lengths: self.fibers.iter().map(|f| f.rest_length).collect(),
            masses,
        })
    }
}
