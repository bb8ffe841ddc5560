//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A [`Tape`] records every operation in creation order. Nodes are either
//! leaves (parameters or constants) or the result of an [`Op`] on earlier
//! nodes, so the tape is a DAG in topological order by construction and the
//! backward sweep is a single reverse pass.
//!
//! ```
//! use dual_unroll::tape::Tape;
//! use dual_unroll::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::column(&[1.0, 2.0]));
//! let sq = tape.dot(x, x).unwrap();
//! let grads = tape.backward(sq, &[x]).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    /// Adds a 1×1 tensor to every entry.
    AddScalar(Var, Var),
    L2Norm(Var),
    Sum(Var),
    Dot(Var, Var),
    VStack(Var, Var),
    HStack(Var, Var),
    SliceRows(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to requested leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, op: Op, a: Var, value: Tensor) -> Var {
        let rg = self.tracked(a);
        self.push(op, value, rg)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, value: Tensor) -> Var {
        let rg = self.tracked(a) || self.tracked(b);
        self.push(op, value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(Op::MatMul(a, b), a, b, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(Op::Add(a, b), a, b, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(Op::Sub(a, b), a, b, value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.binary(Op::Hadamard(a, b), a, b, value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.unary(Op::Scale(a, s), a, value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.unary(Op::Tanh(a), a, value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.unary(Op::Relu(a), a, value)
    }

    /// `a + s·1` for a 1×1 tensor `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Dimension {
                op: "add_scalar",
                left: self.shape(a),
                right: self.shape(s),
            });
        }
        let c = self.value(s).item();
        let value = self.value(a).map(|v| v + c);
        Ok(self.binary(Op::AddScalar(a, s), a, s, value))
    }

    /// Euclidean (Frobenius) norm as a 1×1 tensor.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).norm());
        self.unary(Op::L2Norm(a), a, value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(Op::Sum(a), a, value)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.binary(Op::Dot(a, b), a, b, value))
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).vstack(self.value(b))?;
        Ok(self.binary(Op::VStack(a, b), a, b, value))
    }

    pub fn hstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hstack(self.value(b))?;
        Ok(self.binary(Op::HStack(a, b), a, b, value))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        Ok(self.unary(Op::SliceRows(a, start), a, value))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every entry of `params` receives a gradient; leaves the loss does not
    /// depend on (or untracked constants) get zeros of the right shape.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.tracked(loss) {
            adj[loss.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
        }

        let mut grads = BTreeMap::new();
        for &p in params {
            let g = adj
                .get_mut(p.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let (r, c) = self.shape(p);
                    Tensor::zeros(r, c)
                });
            grads.insert(p, g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.tracked(v) {
            return Ok(());
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(a) {
                    let ga = g.matmul_nt(self.value(b))?;
                    self.accumulate(adj, a, ga)?;
                }
                if self.tracked(b) {
                    let gb = self.value(a).matmul_tn(g)?;
                    self.accumulate(adj, b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, a, g.clone())?;
                self.accumulate(adj, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g.clone())?;
                self.accumulate(adj, b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                if self.tracked(a) {
                    self.accumulate(adj, a, g.hadamard(self.value(b))?)?;
                }
                if self.tracked(b) {
                    self.accumulate(adj, b, g.hadamard(self.value(a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, a, g.scale(s))?,
            Op::Tanh(a) => {
                let ga = g.zip_with(&node.value, "tanh_backward", |g, y| g * (1.0 - y * y))?;
                self.accumulate(adj, a, ga)?;
            }
            Op::Relu(a) => {
                let ga = g.zip_with(self.value(a), "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(adj, a, ga)?;
            }
            Op::AddScalar(a, s) => {
                self.accumulate(adj, a, g.clone())?;
                self.accumulate(adj, s, Tensor::scalar(g.sum()))?;
            }
            Op::L2Norm(a) => {
                let norm = node.value.item();
                let ga = if norm == 0.0 {
                    let (r, c) = self.shape(a);
                    Tensor::zeros(r, c)
                } else {
                    self.value(a).scale(g.item() / norm)
                };
                self.accumulate(adj, a, ga)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(adj, a, Tensor::filled(r, c, g.item()))?;
            }
            Op::Dot(a, b) => {
                let s = g.item();
                if self.tracked(a) {
                    self.accumulate(adj, a, self.value(b).scale(s))?;
                }
                if self.tracked(b) {
                    self.accumulate(adj, b, self.value(a).scale(s))?;
                }
            }
            Op::VStack(a, b) => {
                let ra = self.shape(a).0;
                let rb = self.shape(b).0;
                if self.tracked(a) {
                    self.accumulate(adj, a, g.slice_rows(0, ra)?)?;
                }
                if self.tracked(b) {
                    self.accumulate(adj, b, g.slice_rows(ra, rb)?)?;
                }
            }
            Op::HStack(a, b) => {
                let (ga, gb) = g.hsplit(self.shape(a).1);
                self.accumulate(adj, a, ga)?;
                self.accumulate(adj, b, gb)?;
            }
            Op::SliceRows(a, start) => {
                if self.tracked(a) {
                    let (r, c) = self.shape(a);
                    let mut ga = Tensor::zeros(r, c);
                    let len = g.len();
                    ga.data_mut()[start * c..start * c + len].copy_from_slice(g.data());
                    self.accumulate(adj, a, ga)?;
                }
            }
        }
        Ok(())
    }
}

/// Relative error with an absolute floor in the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function of several tensors against
/// central finite differences.
///
/// Uses the five-point central stencil
/// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h` and returns, per input
/// tensor, the largest entrywise [`relative_error`].
pub fn finite_difference_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out, &vars)?;

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut errors = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor> = points.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("requested gradient");
        let mut worst: f64 = 0.0;
        for e in 0..points[ti].len() {
            let x = points[ti].data()[e];
            let mut at = |delta: f64| -> Result<f64> {
                work[ti].data_mut()[e] = x + delta;
                let v = eval(&work);
                work[ti].data_mut()[e] = x;
                v
            };
            let fp1 = at(eps)?;
            let fm1 = at(-eps)?;
            let fp2 = at(2.0 * eps)?;
            let fm2 = at(-2.0 * eps)?;
            let numeric = (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * eps);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Single-input form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = finite_difference_check_many(|t, v| f(t, v[0]), std::slice::from_ref(point), eps)?;
    Ok(errs[0])
}
