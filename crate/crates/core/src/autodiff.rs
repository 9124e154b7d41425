//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] is an append-only tape of array-valued nodes. Operations on
//! [`Var`]s record their parents when any input requires a gradient, and
//! [`gradient`] replays the tape in reverse. When `create_graph` is set the
//! backward rules are themselves recorded as ordinary operations, so the
//! returned gradients can be differentiated again. [`hvp`] and
//! [`mixed_vjp`] use that to produce second-order products without ever
//! forming a Hessian.
//!
//! Broadcasting is deliberately narrow: binary operations accept equal
//! shapes, a single-element operand, or an operand whose shape is a suffix
//! of the other's (repeated over leading axes). Row-wise scaling goes
//! through [`Var::broadcast_rows`].

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("gradient needs a single-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: operands belong to different graphs")]
    GraphMismatch { op: &'static str },
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// How a smaller array is repeated to fill a larger one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expand {
    /// Source shape is a suffix of the target; repeated over leading axes.
    Leading,
    /// Source shape is a prefix of the target; each element fills a block.
    Trailing,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Broadcast { src: usize, mode: Expand },
    SumTo { src: usize, mode: Expand },
    Sum(usize),
    SumAxis { src: usize, axis: usize },
    ExpandAxis { src: usize, axis: usize },
    Dot(usize, usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Tanh(usize),
    Clamp { src: usize, lo: T, hi: T },
    Minimum(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Gather { src: usize, index: Rc<[usize]> },
    ScatterAdd { src: usize, index: Rc<[usize]> },
    Concat(Rc<[usize]>),
    SliceRows { src: usize, start: usize },
    Det2(usize),
    Cof2(usize),
    Matmul2(usize, usize),
    Transpose2(usize),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Dot(a, b) | Minimum(a, b) | Matmul(a, b)
            | Matmul2(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sum(a) | Relu(a) | Square(a) | Sqrt(a) | Recip(a)
            | Exp(a) | Ln(a) | Sigmoid(a) | Tanh(a) | Transpose(a) | Reshape(a) | Det2(a)
            | Cof2(a) | Transpose2(a) => vec![*a],
            Broadcast { src, .. }
            | SumTo { src, .. }
            | SumAxis { src, .. }
            | ExpandAxis { src, .. }
            | Clamp { src, .. }
            | Gather { src, .. }
            | ScatterAdd { src, .. }
            | SliceRows { src, .. } => vec![*src],
            Concat(parts) => parts.to_vec(),
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Append-only computation tape. Cloning yields another handle to the same tape.
pub struct Graph<T: Real> {
    tape: Rc<RefCell<Tape<T>>>,
}

impl<T: Real> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Self {
            tape: Rc::clone(&self.tape),
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    /// Number of nodes recorded so far (constants included).
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    /// A differentiable input.
    pub fn leaf(&self, values: Vec<T>, shape: &[usize]) -> Result<Var<T>> {
        self.check_len("leaf", &values, shape)?;
        Ok(self.push_raw(values, shape.to_vec(), Op::Leaf, true))
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, values: Vec<T>, shape: &[usize]) -> Result<Var<T>> {
        self.check_len("constant", &values, shape)?;
        Ok(self.push_raw(values, shape.to_vec(), Op::Leaf, false))
    }

    pub fn scalar(&self, value: T) -> Var<T> {
        self.push_raw(vec![value], Vec::new(), Op::Leaf, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<T> {
        self.push_raw(vec![T::zero(); numel(shape)], shape.to_vec(), Op::Leaf, false)
    }

    fn check_len(&self, op: &'static str, values: &[T], shape: &[usize]) -> Result<()> {
        if values.len() != numel(shape) {
            return Err(AutodiffError::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: "value count does not match shape",
            });
        }
        Ok(())
    }

    fn push_raw(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var<T> {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Records `op` only if recording is on and some parent requires a gradient.
    fn push(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var<T> {
        let track = {
            let tape = self.tape.borrow();
            tape.recording && op.parents().iter().any(|&p| tape.nodes[p].requires_grad)
        };
        if track {
            self.push_raw(value, shape, op, true)
        } else {
            self.push_raw(value, shape, Op::Leaf, false)
        }
    }

    fn set_recording(&self, on: bool) -> bool {
        std::mem::replace(&mut self.tape.borrow_mut().recording, on)
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<T: Real> {
    graph: Graph<T>,
    id: usize,
}

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tape = self.graph.tape.borrow();
        let node = &tape.nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.tape.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.tape.borrow().nodes[self.id].value.len()
    }

    pub fn values(&self) -> Vec<T> {
        self.graph.tape.borrow().nodes[self.id].value.clone()
    }

    /// First element; the natural accessor for scalar results.
    pub fn item(&self) -> T {
        self.graph.tape.borrow().nodes[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }

    /// Copy of this value as a constant on the same graph.
    pub fn detach(&self) -> Var<T> {
        let (value, shape) = self.with(|n| (n.value.clone(), n.shape.clone()));
        self.graph.push_raw(value, shape, Op::Leaf, false)
    }

    fn with<R>(&self, f: impl FnOnce(&Node<T>) -> R) -> R {
        f(&self.graph.tape.borrow().nodes[self.id])
    }

    fn check_graph(&self, other: &Var<T>, op: &'static str) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(AutodiffError::GraphMismatch { op })
        }
    }

    fn map(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<T> {
        let (value, shape) = self.with(|n| (n.value.iter().map(|&x| f(x)).collect(), n.shape.clone()));
        self.graph.push(value, shape, op)
    }

    fn zip_same(&self, other: &Var<T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Var<T> {
        let (value, shape) = {
            let tape = self.graph.tape.borrow();
            let a = &tape.nodes[self.id];
            let b = &tape.nodes[other.id];
            let value = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (value, a.shape.clone())
        };
        self.graph.push(value, shape, op)
    }

    /// Brings two operands to a common shape under the leading-axis rule.
    fn align(&self, other: &Var<T>, op: &'static str) -> Result<(Var<T>, Var<T>)> {
        self.check_graph(other, op)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self.clone(), other.clone()));
        }
        if numel(&sb) == 1 || sa.ends_with(&sb) {
            return Ok((self.clone(), other.expand(&sa, Expand::Leading)));
        }
        if numel(&sa) == 1 || sb.ends_with(&sa) {
            return Ok((self.expand(&sb, Expand::Leading), other.clone()));
        }
        Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb })
    }

    fn expand(&self, shape: &[usize], mode: Expand) -> Var<T> {
        let src = self.values();
        let total = numel(shape);
        let value: Vec<T> = match mode {
            Expand::Leading => (0..total).map(|i| src[i % src.len()]).collect(),
            Expand::Trailing => {
                let block = total / src.len();
                (0..total).map(|i| src[i / block]).collect()
            }
        };
        self.graph
            .push(value, shape.to_vec(), Op::Broadcast { src: self.id, mode })
    }

    fn sum_to(&self, shape: &[usize], mode: Expand) -> Var<T> {
        let src = self.values();
        let len = numel(shape);
        let mut value = vec![T::zero(); len];
        match mode {
            Expand::Leading => {
                for (i, &x) in src.iter().enumerate() {
                    value[i % len] += x;
                }
            }
            Expand::Trailing => {
                let block = src.len() / len;
                for (i, &x) in src.iter().enumerate() {
                    value[i / block] += x;
                }
            }
        }
        self.graph
            .push(value, shape.to_vec(), Op::SumTo { src: self.id, mode })
    }

    /// Repeats each element over a trailing block so the result has `shape`.
    /// The current shape must be a prefix of `shape`.
    pub fn broadcast_rows(&self, shape: &[usize]) -> Result<Var<T>> {
        let own = self.shape();
        if !shape.starts_with(&own) {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: own,
                rhs: shape.to_vec(),
            });
        }
        Ok(self.expand(shape, Expand::Trailing))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.align(other, "add")?;
        Ok(a.zip_same(&b, Op::Add(a.id, b.id), |x, y| x + y))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.align(other, "sub")?;
        Ok(a.zip_same(&b, Op::Sub(a.id, b.id), |x, y| x - y))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.align(other, "mul")?;
        Ok(a.zip_same(&b, Op::Mul(a.id, b.id), |x, y| x * y))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.mul(&other.recip())
    }

    /// Elementwise minimum.
    pub fn minimum(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.align(other, "minimum")?;
        Ok(a.zip_same(&b, Op::Minimum(a.id, b.id), |x, y| if x <= y { x } else { y }))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        self.map(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        self.map(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn sum(&self) -> Var<T> {
        let total = self.with(|n| n.value.iter().copied().sum());
        self.graph.push(vec![total], Vec::new(), Op::Sum(self.id))
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidShape {
                op: "sum_axis",
                shape,
                reason: "axis out of range",
            });
        }
        let outer = numel(&shape[..axis]);
        let k = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = self.values();
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..k {
                let base = (o * k + j) * inner;
                for i in 0..inner {
                    value[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self
            .graph
            .push(value, out_shape, Op::SumAxis { src: self.id, axis }))
    }

    /// Inserts `axis` of length `k`, repeating values along it.
    fn expand_axis(&self, axis: usize, k: usize) -> Var<T> {
        let shape = self.shape();
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let src = self.values();
        let mut value = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for _ in 0..k {
                value.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, k);
        self.graph
            .push(value, out_shape, Op::ExpandAxis { src: self.id, axis })
    }

    /// Elementwise product followed by a total sum; shapes must match exactly.
    pub fn dot(&self, other: &Var<T>) -> Result<Var<T>> {
        self.check_graph(other, "dot")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let total = {
            let tape = self.graph.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[other.id].value;
            a.iter().zip(b).map(|(&x, &y)| x * y).sum()
        };
        Ok(self
            .graph
            .push(vec![total], Vec::new(), Op::Dot(self.id, other.id)))
    }

    pub fn relu(&self) -> Var<T> {
        self.map(Op::Relu(self.id), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn square(&self) -> Var<T> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.map(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn recip(&self) -> Var<T> {
        self.map(Op::Recip(self.id), |x| x.recip())
    }

    pub fn exp(&self) -> Var<T> {
        self.map(Op::Exp(self.id), |x| x.exp())
    }

    pub fn ln(&self) -> Var<T> {
        self.map(Op::Ln(self.id), |x| x.ln())
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<T> {
        self.map(Op::Tanh(self.id), |x| x.tanh())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        self.map(Op::Clamp { src: self.id, lo, hi }, |x| x.max(lo).min(hi))
    }

    /// Matrix product of `(p, q)` and `(q, r)` arrays.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.check_graph(other, "matmul")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let value = {
            let tape = self.graph.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[other.id].value;
            let mut out = vec![T::zero(); p * r];
            for i in 0..p {
                for k in 0..q {
                    let aik = a[i * q + k];
                    if aik == T::zero() {
                        continue;
                    }
                    let row = &b[k * r..(k + 1) * r];
                    for (o, &bkj) in out[i * r..(i + 1) * r].iter_mut().zip(row) {
                        *o += aik * bkj;
                    }
                }
            }
            out
        };
        Ok(self
            .graph
            .push(value, vec![p, r], Op::Matmul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "transpose",
                shape,
                reason: "expected a 2-d array",
            });
        }
        let (p, q) = (shape[0], shape[1]);
        let src = self.values();
        let mut value = vec![T::zero(); p * q];
        for i in 0..p {
            for j in 0..q {
                value[j * p + i] = src[i * q + j];
            }
        }
        Ok(self.graph.push(value, vec![q, p], Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let own = self.shape();
        if numel(&own) != numel(shape) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: own,
                rhs: shape.to_vec(),
            });
        }
        Ok(self
            .graph
            .push(self.values(), shape.to_vec(), Op::Reshape(self.id)))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather(&self, index: &[usize]) -> Result<Var<T>> {
        self.gather_rc(Rc::from(index))
    }

    fn gather_rc(&self, index: Rc<[usize]>) -> Result<Var<T>> {
        let shape = self.shape();
        let rows = *shape.first().ok_or(AutodiffError::InvalidShape {
            op: "gather",
            shape: shape.clone(),
            reason: "cannot gather from a 0-d array",
        })?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: rows,
            });
        }
        let row = numel(&shape[1..]);
        let value = self.with(|n| {
            let mut out = Vec::with_capacity(index.len() * row);
            for &i in index.iter() {
                out.extend_from_slice(&n.value[i * row..(i + 1) * row]);
            }
            out
        });
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self
            .graph
            .push(value, out_shape, Op::Gather { src: self.id, index }))
    }

    /// Adds row `k` of `self` into row `index[k]` of a zero array with `rows` rows.
    pub fn scatter_add(&self, index: &[usize], rows: usize) -> Result<Var<T>> {
        self.scatter_add_rc(Rc::from(index), rows)
    }

    fn scatter_add_rc(&self, index: Rc<[usize]>, rows: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.first() != Some(&index.len()) {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "scatter_add",
                index: bad,
                len: rows,
            });
        }
        let row = numel(&shape[1..]);
        let mut value = vec![T::zero(); rows * row];
        self.with(|n| {
            for (k, &i) in index.iter().enumerate() {
                for c in 0..row {
                    value[i * row + c] += n.value[k * row + c];
                }
            }
        });
        let mut out_shape = shape;
        out_shape[0] = rows;
        Ok(self
            .graph
            .push(value, out_shape, Op::ScatterAdd { src: self.id, index }))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.is_empty() || start + len > shape[0] {
            return Err(AutodiffError::InvalidShape {
                op: "slice_rows",
                shape,
                reason: "row range out of bounds",
            });
        }
        let row = numel(&shape[1..]);
        let value = self.with(|n| n.value[start * row..(start + len) * row].to_vec());
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self
            .graph
            .push(value, out_shape, Op::SliceRows { src: self.id, start }))
    }

    /// Determinant of each trailing 2x2 block: `(..., 2, 2) -> (...)`.
    pub fn det2(&self) -> Result<Var<T>> {
        let shape = self.block2_shape("det2")?;
        let value = self.with(|n| {
            n.value
                .chunks_exact(4)
                .map(|m| m[0] * m[3] - m[1] * m[2])
                .collect()
        });
        Ok(self
            .graph
            .push(value, shape[..shape.len() - 2].to_vec(), Op::Det2(self.id)))
    }

    /// Cofactor matrix of each 2x2 block, `[[d, -c], [-b, a]]`.
    pub fn cof2(&self) -> Result<Var<T>> {
        let shape = self.block2_shape("cof2")?;
        let value = self.with(|n| {
            n.value
                .chunks_exact(4)
                .flat_map(|m| [m[3], -m[2], -m[1], m[0]])
                .collect()
        });
        Ok(self.graph.push(value, shape, Op::Cof2(self.id)))
    }

    /// Batched product of 2x2 blocks with identical batch shapes.
    pub fn matmul2(&self, other: &Var<T>) -> Result<Var<T>> {
        self.check_graph(other, "matmul2")?;
        let sa = self.block2_shape("matmul2")?;
        let sb = other.block2_shape("matmul2")?;
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul2",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = {
            let tape = self.graph.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[other.id].value;
            a.chunks_exact(4)
                .zip(b.chunks_exact(4))
                .flat_map(|(x, y)| {
                    [
                        x[0] * y[0] + x[1] * y[2],
                        x[0] * y[1] + x[1] * y[3],
                        x[2] * y[0] + x[3] * y[2],
                        x[2] * y[1] + x[3] * y[3],
                    ]
                })
                .collect()
        };
        Ok(self
            .graph
            .push(value, sa, Op::Matmul2(self.id, other.id)))
    }

    pub fn transpose2(&self) -> Result<Var<T>> {
        let shape = self.block2_shape("transpose2")?;
        let value = self.with(|n| {
            n.value
                .chunks_exact(4)
                .flat_map(|m| [m[0], m[2], m[1], m[3]])
                .collect()
        });
        Ok(self.graph.push(value, shape, Op::Transpose2(self.id)))
    }

    fn block2_shape(&self, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if shape.len() < 2 || !shape.ends_with(&[2, 2]) {
            return Err(AutodiffError::InvalidShape {
                op,
                shape,
                reason: "expected trailing 2x2 blocks",
            });
        }
        Ok(shape)
    }

    fn mask(&self, pred: impl Fn(T) -> bool) -> Var<T> {
        let (value, shape) = self.with(|n| {
            (
                n.value
                    .iter()
                    .map(|&x| if pred(x) { T::one() } else { T::zero() })
                    .collect(),
                n.shape.clone(),
            )
        });
        self.graph.push_raw(value, shape, Op::Leaf, false)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Concatenates along axis 0; trailing dimensions must agree.
pub fn concat<T: Real>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts.first().ok_or(AutodiffError::InvalidShape {
        op: "concat",
        shape: Vec::new(),
        reason: "nothing to concatenate",
    })?;
    let base = first.shape();
    if base.is_empty() {
        return Err(AutodiffError::InvalidShape {
            op: "concat",
            shape: base,
            reason: "cannot concatenate 0-d arrays",
        });
    }
    let mut rows = 0;
    let mut value = Vec::new();
    for p in parts {
        first.check_graph(p, "concat")?;
        let s = p.shape();
        if s.len() != base.len() || s[1..] != base[1..] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: s,
            });
        }
        rows += s[0];
        value.extend(p.values());
    }
    let mut shape = base;
    shape[0] = rows;
    let ids: Rc<[usize]> = parts.iter().map(|p| p.id).collect();
    Ok(first.graph.push(value, shape, Op::Concat(ids)))
}

/// `W x + b` for `W: (o, i)`, with `x: (i,)` giving `(o,)` or `x: (n, i)` giving `(n, o)`.
pub fn affine<T: Real>(w: &Var<T>, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let xs = x.shape();
    match xs.len() {
        1 => {
            let col = x.reshape(&[xs[0], 1])?;
            let y = w.matmul(&col)?;
            let o = y.shape()[0];
            y.reshape(&[o])?.add(b)
        }
        2 => x.matmul(&w.transpose()?)?.add(b),
        _ => Err(AutodiffError::InvalidShape {
            op: "affine",
            shape: xs,
            reason: "input must be 1-d or 2-d",
        }),
    }
}

/// Restores the recording flag when a backward pass exits, even on error.
struct RecordingGuard<T: Real> {
    graph: Graph<T>,
    previous: bool,
}

impl<T: Real> Drop for RecordingGuard<T> {
    fn drop(&mut self) {
        self.graph.set_recording(self.previous);
    }
}

/// Gradients of the scalar `y` with respect to each of `xs`.
///
/// Inputs that `y` does not depend on get a zero array. With `create_graph`
/// the returned values are recorded on the tape and can be differentiated
/// again; otherwise they are constants.
pub fn gradient<T: Real>(y: &Var<T>, xs: &[&Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
    for x in xs {
        y.check_graph(x, "gradient")?;
    }
    let y_shape = y.shape();
    if numel(&y_shape) != 1 {
        return Err(AutodiffError::NotScalar { shape: y_shape });
    }
    let graph = y.graph.clone();
    let _guard = RecordingGuard {
        previous: graph.set_recording(create_graph),
        graph: graph.clone(),
    };

    let last = y.id;
    let mut is_target = vec![false; last + 1];
    for x in xs {
        if x.id <= last {
            is_target[x.id] = true;
        }
    }
    // A node is needed when it requires grad and reaches a target.
    let (needed, ops) = {
        let tape = graph.tape.borrow();
        let mut needed = vec![false; last + 1];
        let mut ops = Vec::with_capacity(last + 1);
        for id in 0..=last {
            let node = &tape.nodes[id];
            needed[id] = node.requires_grad
                && (is_target[id] || node.op.parents().iter().any(|&p| needed[p]));
            ops.push(if needed[id] { Some(node.op.clone()) } else { None });
        }
        (needed, ops)
    };

    let mut grads: Vec<Option<Var<T>>> = vec![None; last + 1];
    if needed[last] {
        grads[last] = Some(graph.push_raw(vec![T::one()], y_shape, Op::Leaf, false));
    }
    for id in (0..=last).rev() {
        let Some(op) = &ops[id] else { continue };
        let g = if is_target[id] {
            grads[id].clone()
        } else {
            grads[id].take()
        };
        let Some(g) = g else { continue };
        for (parent, contrib) in backward_rule(&graph, id, op, &g)? {
            if !needed[parent] {
                continue;
            }
            grads[parent] = Some(match grads[parent].take() {
                Some(acc) => acc.add(&contrib)?,
                None => contrib,
            });
        }
    }

    Ok(xs
        .iter()
        .map(|x| {
            let found = if x.id <= last { grads[x.id].clone() } else { None };
            found.unwrap_or_else(|| graph.zeros(&x.shape()))
        })
        .collect())
}

fn var<T: Real>(graph: &Graph<T>, id: usize) -> Var<T> {
    Var {
        graph: graph.clone(),
        id,
    }
}

/// Vector-Jacobian contributions of node `id` to its parents, given upstream `g`.
fn backward_rule<T: Real>(
    graph: &Graph<T>,
    id: usize,
    op: &Op<T>,
    g: &Var<T>,
) -> Result<Vec<(usize, Var<T>)>> {
    let v = |i: usize| var(graph, i);
    let shape_of = |i: usize| graph.tape.borrow().nodes[i].shape.clone();
    let two = T::one() + T::one();
    let half = T::one() / two;
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.neg())],
        Op::Mul(a, b) => vec![(*a, g.mul(&v(*b))?), (*b, g.mul(&v(*a))?)],
        Op::Scale(a, c) => vec![(*a, g.scale(*c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Broadcast { src, mode } => vec![(*src, g.sum_to(&shape_of(*src), *mode))],
        Op::SumTo { src, mode } => vec![(*src, g.expand(&shape_of(*src), *mode))],
        Op::Sum(a) => vec![(*a, g.expand(&shape_of(*a), Expand::Leading))],
        Op::SumAxis { src, axis } => {
            let k = shape_of(*src)[*axis];
            vec![(*src, g.expand_axis(*axis, k))]
        }
        Op::ExpandAxis { src, axis } => vec![(*src, g.sum_axis(*axis)?)],
        Op::Dot(a, b) => {
            let gb = g.expand(&shape_of(*a), Expand::Leading);
            vec![(*a, gb.mul(&v(*b))?), (*b, gb.mul(&v(*a))?)]
        }
        Op::Relu(a) => vec![(*a, g.mul(&v(*a).mask(|x| x > T::zero()))?)],
        Op::Square(a) => vec![(*a, g.mul(&v(*a).scale(two))?)],
        Op::Sqrt(a) => vec![(*a, g.mul(&v(id).recip().scale(half))?)],
        Op::Recip(a) => vec![(*a, g.mul(&v(id).square())?.neg())],
        Op::Exp(a) => vec![(*a, g.mul(&v(id))?)],
        Op::Ln(a) => vec![(*a, g.mul(&v(*a).recip())?)],
        Op::Sigmoid(a) => {
            let y = v(id);
            vec![(*a, g.mul(&y.sub(&y.square())?)?)]
        }
        Op::Tanh(a) => {
            let y = v(id);
            vec![(*a, g.mul(&y.square().neg().add_scalar(T::one()))?)]
        }
        Op::Clamp { src, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            vec![(*src, g.mul(&v(*src).mask(|x| x > lo && x < hi))?)]
        }
        Op::Minimum(a, b) => {
            let (va, vb) = (v(*a).values(), v(*b).values());
            let shape = shape_of(*a);
            let pick_a: Vec<T> = va
                .iter()
                .zip(&vb)
                .map(|(x, y)| if x <= y { T::one() } else { T::zero() })
                .collect();
            let pick_b: Vec<T> = pick_a.iter().map(|&m| T::one() - m).collect();
            vec![
                (*a, g.mul(&graph.constant(pick_a, &shape)?)?),
                (*b, g.mul(&graph.constant(pick_b, &shape)?)?),
            ]
        }
        Op::Matmul(a, b) => vec![
            (*a, g.matmul(&v(*b).transpose()?)?),
            (*b, v(*a).transpose()?.matmul(g)?),
        ],
        Op::Transpose(a) => vec![(*a, g.transpose()?)],
        Op::Reshape(a) => vec![(*a, g.reshape(&shape_of(*a))?)],
        Op::Gather { src, index } => {
            let rows = shape_of(*src)[0];
            vec![(*src, g.scatter_add_rc(Rc::clone(index), rows)?)]
        }
        Op::ScatterAdd { src, index } => vec![(*src, g.gather_rc(Rc::clone(index))?)],
        Op::Concat(parts) => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts.iter() {
                let rows = shape_of(p)[0];
                out.push((p, g.slice_rows(offset, rows)?));
                offset += rows;
            }
            out
        }
        Op::SliceRows { src, start } => {
            let rows = shape_of(*src)[0];
            let len = shape_of(id)[0];
            let index: Rc<[usize]> = (*start..*start + len).collect();
            vec![(*src, g.scatter_add_rc(index, rows)?)]
        }
        Op::Det2(a) => {
            let a_var = v(*a);
            let gb = g.broadcast_rows(&shape_of(*a))?;
            vec![(*a, gb.mul(&a_var.cof2()?)?)]
        }
        Op::Cof2(a) => vec![(*a, g.cof2()?)],
        Op::Matmul2(a, b) => vec![
            (*a, g.matmul2(&v(*b).transpose2()?)?),
            (*b, v(*a).transpose2()?.matmul2(g)?),
        ],
        Op::Transpose2(a) => vec![(*a, g.transpose2()?)],
    })
}

/// `(d²E/dx²) v`, computed as the gradient of `<dE/dx, v>`.
pub fn hvp<T, E, F>(energy: F, x: &Var<T>, v: &[T]) -> std::result::Result<Vec<T>, E>
where
    T: Real,
    E: From<AutodiffError>,
    F: Fn(&Var<T>) -> std::result::Result<Var<T>, E>,
{
    let e = energy(x)?;
    let gx = gradient(&e, &[x], true)?.remove(0);
    let dir = x.graph.constant(v.to_vec(), &x.shape())?;
    let s = gx.dot(&dir)?;
    Ok(gradient(&s, &[x], false)?.remove(0).values())
}

/// `zᵀ (∂f/∂a)` with `f = -dE/dx`, computed as `-d/da <dE/dx, z>`.
pub fn mixed_vjp<T, E, F>(energy: F, x: &Var<T>, a: &Var<T>, z: &[T]) -> std::result::Result<Vec<T>, E>
where
    T: Real,
    E: From<AutodiffError>,
    F: Fn(&Var<T>, &Var<T>) -> std::result::Result<Var<T>, E>,
{
    let e = energy(x, a)?;
    let mut out = mixed_vjp_from(&e, x, &[a], z)?;
    Ok(out.remove(0))
}

/// [`mixed_vjp`] against an already built energy and several parameter inputs.
pub fn mixed_vjp_from<T: Real>(
    energy: &Var<T>,
    x: &Var<T>,
    params: &[&Var<T>],
    z: &[T],
) -> Result<Vec<Vec<T>>> {
    let gx = gradient(energy, &[x], true)?.remove(0);
    let dir = x.graph.constant(z.to_vec(), &x.shape())?;
    let s = gx.dot(&dir)?;
    Ok(gradient(&s, params, false)?
        .into_iter()
        .map(|g| g.values().into_iter().map(|c| -c).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type G = Graph<f64>;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().chain(a).fold(1e-12f64, |m, x| m.max(x.abs()));
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / scale
    }

    /// Central differences of a scalar function of one array.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    /// Checks `d/dx sum(w * op(x))` against central differences.
    fn check_unary(
        shape: &[usize],
        build: &dyn Fn(&Var<f64>) -> Var<f64>,
        sample: &dyn Fn(&mut ChaCha8Rng) -> f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = numel(shape);
        let x0: Vec<f64> = (0..n).map(|_| sample(&mut rng)).collect();
        let probe_len = {
            let g = G::new();
            build(&g.constant(x0.clone(), shape).unwrap()).numel()
        };
        let w: Vec<f64> = (0..probe_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |xv: &[f64]| {
            let g = G::new();
            let x = g.constant(xv.to_vec(), shape).unwrap();
            let y = build(&x);
            y.values().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = G::new();
        let x = g.leaf(x0.clone(), shape).unwrap();
        let y = build(&x);
        let wv = g.constant(w.clone(), &y.shape()).unwrap();
        let s = y.dot(&wv).unwrap();
        let ad = gradient(&s, &[&x], false).unwrap()[0].values();
        let fd = fd_grad(&eval, &x0, 1e-6);
        let err = rel_err(&ad, &fd);
        assert!(err < 1e-6, "rel err {err}: ad {ad:?} fd {fd:?}");
    }

    fn any(rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(-2.0..2.0)
    }

    fn positive(rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(0.5..2.0)
    }

    fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
        let m = rng.random_range(0.2..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    }

    #[test]
    fn primitive_examples() {
        let g = G::new();
        let a = g.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let b = g.constant(vec![4.0, 5.0, 6.0], &[3]).unwrap();
        assert_eq!(a.dot(&b).unwrap().item(), 32.0);
        let r = g.constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap().relu();
        assert_eq!(r.values(), vec![0.0, 0.0, 2.0]);
        let m = g.constant(vec![2.0, 0.0, 0.0, 3.0], &[2, 2]).unwrap();
        assert_eq!(m.det2().unwrap().item(), 6.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = G::new();
        let a = g.constant(vec![0.0; 3], &[3]).unwrap();
        let b = g.constant(vec![0.0; 2], &[2]).unwrap();
        match a.add(&b) {
            Err(AutodiffError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![3]);
                assert_eq!(rhs, vec![2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(a.dot(&b), Err(AutodiffError::ShapeMismatch { op: "dot", .. })));
        assert!(matches!(a.det2(), Err(AutodiffError::InvalidShape { op: "det2", .. })));
        assert!(matches!(
            a.gather(&[3]),
            Err(AutodiffError::IndexOutOfRange { op: "gather", index: 3, len: 3 })
        ));
        let other = G::new().scalar(1.0);
        assert!(matches!(a.mul(&other), Err(AutodiffError::GraphMismatch { .. })));
        assert!(g.leaf(vec![1.0], &[2]).is_err());
    }

    #[test]
    fn broadcasting_rules() {
        let g = G::new();
        let m = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let row = g.constant(vec![10.0, 20.0], &[2]).unwrap();
        assert_eq!(m.add(&row).unwrap().values(), vec![11.0, 22.0, 13.0, 24.0]);
        let col = row.broadcast_rows(&[2, 2]).unwrap();
        assert_eq!(m.mul(&col).unwrap().values(), vec![10.0, 20.0, 60.0, 80.0]);
        let s = g.scalar(2.0);
        assert_eq!(s.mul(&m).unwrap().values(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn gradient_examples() {
        let g = G::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.square().sum();
        assert_eq!(gradient(&y, &[&x], false).unwrap()[0].values(), vec![2.0, 4.0]);

        let a = g.constant(vec![3.0, 5.0], &[2]).unwrap();
        let y = a.dot(&x).unwrap();
        assert_eq!(gradient(&y, &[&x], false).unwrap()[0].values(), vec![3.0, 5.0]);
    }

    #[test]
    fn gradient_of_non_scalar_is_an_error() {
        let g = G::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert_eq!(
            gradient(&x.square(), &[&x], false).unwrap_err(),
            AutodiffError::NotScalar { shape: vec![2] }
        );
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let g = G::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = g.leaf(vec![3.0], &[1]).unwrap();
        let z = x.sum();
        let late = g.leaf(vec![0.0; 3], &[3]).unwrap();
        let grads = gradient(&z, &[&y, &late], false).unwrap();
        assert_eq!(grads[0].values(), vec![0.0]);
        assert_eq!(grads[1].values(), vec![0.0; 3]);
    }

    #[test]
    fn constants_never_accumulate() {
        let g = G::new();
        let c = g.constant(vec![1.0, 2.0], &[2]).unwrap();
        let x = g.leaf(vec![1.0, 1.0], &[2]).unwrap();
        let y = c.mul(&x).unwrap().sum();
        assert!(!c.requires_grad());
        assert_eq!(gradient(&y, &[&c], false).unwrap()[0].values(), vec![0.0, 0.0]);
        assert!(!c.square().requires_grad());
    }

    #[test]
    fn backward_without_create_graph_records_nothing_differentiable() {
        let g = G::new();
        let x = g.leaf(vec![0.3, -0.2], &[2]).unwrap();
        let y = x.sigmoid().sum();
        let gx = gradient(&y, &[&x], false).unwrap().remove(0);
        assert!(!gx.requires_grad());
        let gx2 = gradient(&y, &[&x], true).unwrap().remove(0);
        assert!(gx2.requires_grad());
        assert_eq!(gx.values(), gx2.values());
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(&[5], &|x| x.relu(), &away_from_zero);
        check_unary(&[5], &|x| x.square(), &any);
        check_unary(&[5], &|x| x.sqrt(), &positive);
        check_unary(&[5], &|x| x.recip(), &away_from_zero);
        check_unary(&[5], &|x| x.exp(), &any);
        check_unary(&[5], &|x| x.ln(), &positive);
        check_unary(&[5], &|x| x.sigmoid(), &any);
        check_unary(&[5], &|x| x.tanh(), &any);
        check_unary(&[5], &|x| x.scale(-2.5).add_scalar(1.0), &any);
        check_unary(&[6], &|x| x.clamp(-0.7, 0.9), &|r| {
            // keep away from the clamp corners
            let v: f64 = r.random_range(-2.0..2.0);
            if (v + 0.7).abs() < 0.05 || (v - 0.9).abs() < 0.05 {
                0.0
            } else {
                v
            }
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check_unary(&[2, 3], &|x| x.sum_axis(0).unwrap(), &any);
        check_unary(&[2, 3, 2], &|x| x.sum_axis(1).unwrap(), &any);
        check_unary(&[2, 3], &|x| x.transpose().unwrap(), &any);
        check_unary(&[6], &|x| x.reshape(&[3, 2]).unwrap(), &any);
        check_unary(&[4, 2], &|x| x.gather(&[3, 0, 3, 1]).unwrap(), &any);
        check_unary(&[3, 2], &|x| x.scatter_add(&[2, 0, 2], 4).unwrap(), &any);
        check_unary(&[5, 2], &|x| x.slice_rows(1, 3).unwrap(), &any);
        check_unary(&[3, 2, 2], &|x| x.det2().unwrap(), &any);
        check_unary(&[3, 2, 2], &|x| x.cof2().unwrap(), &any);
        check_unary(&[3, 2, 2], &|x| x.transpose2().unwrap(), &any);
        check_unary(&[3], &|x| x.broadcast_rows(&[3, 2]).unwrap(), &any);
        check_unary(&[4], &|x| x.sum(), &any);
        check_unary(&[2, 2], &|x| concat(&[x.clone(), x.square()]).unwrap(), &any);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        // Differentiate with respect to the packed pair of operands.
        let pairs: Vec<(Vec<usize>, Vec<usize>, Box<dyn Fn(&Var<f64>, &Var<f64>) -> Var<f64>>)> = vec![
            (vec![3, 2], vec![3, 2], Box::new(|a, b| a.add(b).unwrap())),
            (vec![3, 2], vec![2], Box::new(|a, b| a.sub(b).unwrap())),
            (vec![3, 2], vec![], Box::new(|a, b| a.mul(b).unwrap())),
            (vec![2], vec![3, 2], Box::new(|a, b| a.mul(b).unwrap())),
            (vec![4], vec![4], Box::new(|a, b| a.div(b).unwrap())),
            (vec![4], vec![4], Box::new(|a, b| a.minimum(b).unwrap())),
            (vec![3, 2], vec![3, 2], Box::new(|a, b| a.dot(b).unwrap())),
            (vec![2, 3], vec![3, 2], Box::new(|a, b| a.matmul(b).unwrap())),
            (vec![3, 2, 2], vec![3, 2, 2], Box::new(|a, b| a.matmul2(b).unwrap())),
            (vec![4], vec![2, 4], Box::new(|a, b| {
                let w = b.clone();
                let bias = a.slice_rows(0, 2).unwrap();
                affine(&w, a, &bias).unwrap()
            })),
            (vec![3, 4], vec![2, 4], Box::new(|a, b| {
                let bias = b.gather(&[0]).unwrap().reshape(&[4]).unwrap().slice_rows(0, 2).unwrap();
                affine(b, a, &bias).unwrap()
            })),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (sa, sb, f) in pairs {
            let (na, nb) = (numel(&sa), numel(&sb));
            let packed: Vec<f64> = (0..na + nb).map(|_| away_from_zero(&mut rng)).collect();
            let build = |gr: &G, v: &[f64], leaf: bool| {
                let mk = |vals: Vec<f64>, s: &[usize]| {
                    if leaf { gr.leaf(vals, s).unwrap() } else { gr.constant(vals, s).unwrap() }
                };
                (mk(v[..na].to_vec(), &sa), mk(v[na..].to_vec(), &sb))
            };
            let out_len = {
                let gr = G::new();
                let (a, b) = build(&gr, &packed, false);
                f(&a, &b).numel()
            };
            let w: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eval = |v: &[f64]| {
                let gr = G::new();
                let (a, b) = build(&gr, v, false);
                f(&a, &b).values().iter().zip(&w).map(|(x, y)| x * y).sum::<f64>()
            };
            let gr = G::new();
            let (a, b) = build(&gr, &packed, true);
            let y = f(&a, &b);
            let s = y.dot(&gr.constant(w.clone(), &y.shape()).unwrap()).unwrap();
            let grads = gradient(&s, &[&a, &b], false).unwrap();
            let mut ad = grads[0].values();
            ad.extend(grads[1].values());
            let fd = fd_grad(&eval, &packed, 1e-6);
            let err = rel_err(&ad, &fd);
            assert!(err < 1e-6, "{sa:?} x {sb:?}: rel err {err}");
        }
    }

    #[test]
    fn hvp_examples() {
        // E = x1^2 + 3 x1 x2, Hessian [[2,3],[3,0]]
        let energy = |x: &Var<f64>| -> Result<Var<f64>> {
            let x1 = x.slice_rows(0, 1)?;
            let x2 = x.slice_rows(1, 1)?;
            Ok(x1.square().add(&x1.mul(&x2)?.scale(3.0))?.sum())
        };
        let g = G::new();
        let x = g.leaf(vec![0.7, -1.3], &[2]).unwrap();
        assert_eq!(hvp(energy, &x, &[1.0, 0.0]).unwrap(), vec![2.0, 3.0]);

        let half_norm = |x: &Var<f64>| -> Result<Var<f64>> { Ok(x.square().sum().scale(0.5)) };
        let v = vec![0.3, -2.0, 5.0];
        let x = g.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(hvp(half_norm, &x, &v).unwrap(), v);
    }

    #[test]
    fn mixed_vjp_examples() {
        // E = a x^2 at x = 3, z = 1: f = -2ax, df/da = -2x = -6
        let g = G::new();
        let x = g.leaf(vec![3.0], &[1]).unwrap();
        let a = g.leaf(vec![1.7], &[1]).unwrap();
        let e = |x: &Var<f64>, a: &Var<f64>| -> Result<Var<f64>> { Ok(a.mul(&x.square())?.sum()) };
        assert_eq!(mixed_vjp(e, &x, &a, &[1.0]).unwrap(), vec![-6.0]);

        let indep = |x: &Var<f64>, _a: &Var<f64>| -> Result<Var<f64>> { Ok(x.square().sum()) };
        assert_eq!(mixed_vjp(indep, &x, &a, &[1.0]).unwrap(), vec![0.0]);
    }

    /// A nonlinear test energy touching most second-order rules.
    fn rich_energy(x: &Var<f64>) -> Result<Var<f64>> {
        let m = x.reshape(&[2, 2, 2])?;
        let det = m.det2()?;
        let prod = m.matmul2(&m.transpose2()?)?;
        let t = x.tanh().mul(&x.sigmoid())?.sum();
        let s = x.square().add_scalar(1.0).sqrt().sum();
        let e = det.square().sum().add(&prod.sum())?.add(&t)?.add(&s)?;
        Ok(e.add(&x.exp().scale(0.1).sum())?)
    }

    #[test]
    fn create_graph_second_gradient_equals_hvp() {
        let x0 = vec![0.3, -0.4, 0.9, 0.2, -0.5, 0.8, 0.1, -0.6];
        let v = vec![1.0, 0.5, -0.2, 0.3, 0.0, -1.0, 0.4, 0.7];
        let g = G::new();
        let x = g.leaf(x0.clone(), &[8]).unwrap();
        let e = rich_energy(&x).unwrap();
        let gx = gradient(&e, &[&x], true).unwrap().remove(0);
        let dir = g.constant(v.clone(), &[8]).unwrap();
        let second = gradient(&gx.dot(&dir).unwrap(), &[&x], false).unwrap()[0].values();
        let x2 = G::new().leaf(x0.clone(), &[8]).unwrap();
        let h = hvp(rich_energy, &x2, &v).unwrap();
        assert!(rel_err(&second, &h) < 1e-14);

        // and both agree with differences of the gradient
        let grad_at = |p: &[f64]| {
            let g = G::new();
            let x = g.leaf(p.to_vec(), &[8]).unwrap();
            gradient(&rich_energy(&x).unwrap(), &[&x], false).unwrap()[0].values()
        };
        let eps = 1e-6;
        let plus: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a - eps * b).collect();
        let fd: Vec<f64> = grad_at(&plus)
            .iter()
            .zip(grad_at(&minus))
            .map(|(p, m)| (p - m) / (2.0 * eps))
            .collect();
        assert!(rel_err(&h, &fd) < 1e-6);
    }

    #[test]
    fn generic_over_f32() {
        let g = Graph::<f32>::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.square().sum();
        assert_eq!(gradient(&y, &[&x], false).unwrap()[0].values(), vec![2.0f32, 4.0]);
    }

    proptest! {
        #[test]
        fn hessian_is_symmetric(
            x0 in proptest::collection::vec(-1.0f64..1.0, 8),
            u in proptest::collection::vec(-1.0f64..1.0, 8),
            w in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let g = G::new();
            let x = g.leaf(x0, &[8]).unwrap();
            let hu = hvp(rich_energy, &x, &u).unwrap();
            let hw = hvp(rich_energy, &x, &w).unwrap();
            let lhs: f64 = w.iter().zip(&hu).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(&hw).map(|(a, b)| a * b).sum();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            prop_assert!((lhs - rhs).abs() / scale < 1e-10);
        }

        #[test]
        fn hvp_is_linear(
            x0 in proptest::collection::vec(-1.0f64..1.0, 8),
            u in proptest::collection::vec(-1.0f64..1.0, 8),
            w in proptest::collection::vec(-1.0f64..1.0, 8),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let g = G::new();
            let x = g.leaf(x0, &[8]).unwrap();
            let combo: Vec<f64> = u.iter().zip(&w).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = hvp(rich_energy, &x, &combo).unwrap();
            let hu = hvp(rich_energy, &x, &u).unwrap();
            let hw = hvp(rich_energy, &x, &w).unwrap();
            let rhs: Vec<f64> = hu.iter().zip(&hw).map(|(a, b)| alpha * a + beta * b).collect();
            let scale = rhs.iter().chain(&lhs).fold(1.0f64, |m, v| m.max(v.abs()));
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() / scale < 1e-10);
            }
        }
    }
}
