//! Mixed-integer QP instances, their box relaxation, the Lagrangian, and the
//! variable–constraint graph shift operator.
//!
//! An instance is
//!
//! ```text
//!     minimize   ½ xᵀPx + qᵀx
//!     subject to Ā x ≤ b̄,   x_i ∈ {−1, 1} for i ∈ I
//! ```
//!
//! and its relaxation replaces the integrality with `−1 ≤ x_i ≤ 1`, stacked as
//! `A = [Ā; M; −M]`, `b = [b̄; 1; 1]` with `M` the row selection of `I`.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest eigenvalue magnitude of a symmetric matrix.
///
/// Power iteration with a fixed budget can stop short of ‖S‖₂ when the two
/// leading magnitudes are close, which would leave the normalized shift
/// slightly above unit norm; a full symmetric eigensolve does not.
pub fn symmetric_spectral_norm(s: &Tensor) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    nalgebra::DMatrix::from_row_slice(s.rows(), s.cols(), s.data())
        .symmetric_eigenvalues()
        .amax()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceDistributionConfig {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    /// Fraction of nonzero entries in Ā.
    pub density: f64,
    /// Added to the diagonal of P; lower bound on its spectrum.
    pub pd_eps: f64,
    /// Slack of the planted point in every Ā row lies in `[margin, 2·margin]`.
    pub margin: f64,
    pub seed: u64,
}

impl Default for InstanceDistributionConfig {
    fn default() -> Self {
        Self {
            n: 80,
            m: 45,
            r: 10,
            density: 1.0,
            pd_eps: 1e-2,
            margin: 0.1,
            seed: 0,
        }
    }
}

impl InstanceDistributionConfig {
    pub fn with_dims(n: usize, m: usize, r: usize) -> Self {
        Self {
            n,
            m,
            r,
            ..Self::default()
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}{f}");
        if self.n < 1 {
            return Err(Error::config(field("n"), "must be at least 1"));
        }
        if self.r > self.n {
            return Err(Error::config(field("r"), format!("must not exceed n = {}", self.n)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(field("density"), "must lie in (0, 1]"));
        }
        if !(self.pd_eps > 0.0 && self.pd_eps.is_finite()) {
            return Err(Error::config(field("pd_eps"), "must be positive"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config(field("margin"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MIQPInstance {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    /// Sorted indices of the integer variables.
    pub int_idx: Vec<usize>,
    pub p: Tensor,
    pub q: Vec<f64>,
    pub abar: Tensor,
    pub bbar: Vec<f64>,
    pub seed: u64,
    /// Integer-feasible point used to build b̄; not persisted.
    pub planted: Option<Vec<f64>>,
}

impl MIQPInstance {
    pub fn validate(&self) -> Result<()> {
        let (n, m, r) = (self.n, self.m, self.r);
        let bad = |msg: String| Err(Error::InstanceInvalid(msg));
        if self.p.shape() != (n, n) {
            return bad(format!("P has shape {:?}, expected ({n}, {n})", self.p.shape()));
        }
        if self.q.len() != n {
            return bad(format!("q has length {}, expected {n}", self.q.len()));
        }
        if self.abar.shape() != (m, n) {
            return bad(format!("Abar has shape {:?}, expected ({m}, {n})", self.abar.shape()));
        }
        if self.bbar.len() != m {
            return bad(format!("bbar has length {}, expected {m}", self.bbar.len()));
        }
        if self.int_idx.len() != r || r > n {
            return bad(format!("intIdx has {} entries, expected r = {r} <= n", self.int_idx.len()));
        }
        if self.int_idx.windows(2).any(|w| w[0] >= w[1]) || self.int_idx.iter().any(|&i| i >= n) {
            return bad("intIdx must be strictly increasing and inside [0, n)".into());
        }
        Ok(())
    }

    /// A point strictly inside the relaxed feasible set.
    ///
    /// The planted point sits on the box boundary for integer coordinates, so
    /// those are pulled inward by a step small enough to keep every Ā row
    /// strictly satisfied.
    pub fn strictly_feasible_point(&self) -> Option<Vec<f64>> {
        let x0 = self.planted.as_ref()?;
        let slack = (0..self.m)
            .map(|i| {
                let ax: f64 = (0..self.n).map(|j| self.abar.get(i, j) * x0[j]).sum();
                self.bbar[i] - ax
            })
            .fold(f64::INFINITY, f64::min);
        let row_l1 = (0..self.m)
            .map(|i| (0..self.n).map(|j| self.abar.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let shrink = if row_l1 > 0.0 { (0.5 * slack / row_l1).min(0.5) } else { 0.5 };
        let mut x = x0.clone();
        for &i in &self.int_idx {
            x[i] *= 1.0 - shrink;
        }
        Some(x)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        quad_objective(&self.p, &self.q, x)
    }
}

fn quad_objective(p: &Tensor, q: &[f64], x: &[f64]) -> f64 {
    let n = q.len();
    let mut val = 0.0;
    for i in 0..n {
        let mut px = 0.0;
        for j in 0..n {
            px += p.get(i, j) * x[j];
        }
        val += 0.5 * x[i] * px + q[i] * x[i];
    }
    val
}

/// Draws one instance from the planted-feasible-point distribution.
///
/// `P = BᵀB/n + pd_eps·I` with standard normal `B`; `q` standard normal; `Ā`
/// standard normal entries kept with probability `density`;
/// `b̄ = Ā x₀ + s` with `x₀ ~ U[−1, 1]ⁿ` (integer coordinates snapped to ±1)
/// and `s ~ U[margin, 2·margin]^m`.
pub fn generate_instance(cfg: &InstanceDistributionConfig, seed: u64) -> Result<MIQPInstance> {
    cfg.validate("problem.")?;
    let mut rng = rng_from_seed(seed);
    let (n, m, r) = (cfg.n, cfg.m, cfg.r);

    let b = Tensor::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut p = b.matmul_tn(&b)?.scale(1.0 / n as f64);
    for i in 0..n {
        p.set(i, i, p.get(i, i) + cfg.pd_eps);
    }
    // Exact symmetry regardless of summation order.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (p.get(i, j) + p.get(j, i));
            p.set(i, j, v);
            p.set(j, i, v);
        }
    }
    let q: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let abar = Tensor::from_fn(m, n, |_, _| {
        let keep = cfg.density >= 1.0 || rng.random::<f64>() < cfg.density;
        let v: f64 = rng.sample(StandardNormal);
        if keep {
            v
        } else {
            0.0
        }
    });

    let mut int_idx = sample(&mut rng, n, r).into_vec();
    int_idx.sort_unstable();

    let mut x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    for &i in &int_idx {
        x0[i] = if x0[i] < 0.0 { -1.0 } else { 1.0 };
    }
    let bbar: Vec<f64> = (0..m)
        .map(|i| {
            let ax: f64 = (0..n).map(|j| abar.get(i, j) * x0[j]).sum();
            ax + rng.random_range(cfg.margin..=2.0 * cfg.margin)
        })
        .collect();

    let inst = MIQPInstance {
        n,
        m,
        r,
        int_idx,
        p,
        q,
        abar,
        bbar,
        seed,
        planted: Some(x0),
    };
    inst.validate()?;
    Ok(inst)
}

/// Convex relaxation of an instance together with its graph shift operator.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedQP {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub p: Tensor,
    /// n×1
    pub q: Tensor,
    /// (m+2r)×n
    pub a: Tensor,
    pub at: Tensor,
    /// (m+2r)×1
    pub b: Tensor,
    /// Normalized shift `[[P, Aᵀ], [A, 0]] / norm_scale`.
    pub s: Tensor,
    pub norm_scale: f64,
}

impl RelaxedQP {
    /// Builds a relaxed QP directly from `(P, q, A, b)`; `m` and `r` only
    /// describe how the rows of `A` split into linear and box rows.
    pub fn from_parts(p: Tensor, q: Vec<f64>, a: Tensor, b: Vec<f64>, m: usize, r: usize) -> Result<Self> {
        let n = q.len();
        let rows = m + 2 * r;
        if p.shape() != (n, n) {
            return Err(Error::Dimension {
                op: "relax(P)",
                left: p.shape(),
                right: (n, n),
            });
        }
        if a.shape() != (rows, n) || b.len() != rows {
            return Err(Error::Dimension {
                op: "relax(A, b)",
                left: a.shape(),
                right: (b.len(), n),
            });
        }
        let total = n + rows;
        let mut s = Tensor::zeros(total, total);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, p.get(i, j));
            }
        }
        for c in 0..rows {
            for j in 0..n {
                let v = a.get(c, j);
                s.set(n + c, j, v);
                s.set(j, n + c, v);
            }
        }
        let norm = symmetric_spectral_norm(&s);
        let norm_scale = if norm > 0.0 { norm } else { 1.0 };
        let s = s.scale(1.0 / norm_scale);
        Ok(Self {
            n,
            m,
            r,
            at: a.transpose(),
            p,
            q: Tensor::column(&q),
            a,
            b: Tensor::column(&b),
            s,
            norm_scale,
        })
    }

    /// Number of relaxed constraint rows, `m + 2r`.
    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    /// Number of graph nodes, `n + m + 2r`.
    pub fn nodes(&self) -> usize {
        self.n + self.rows()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                op: "x",
                left: (x.len(), 1),
                right: (self.n, 1),
            });
        }
        Ok(())
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.rows() {
            return Err(Error::Dimension {
                op: "lambda",
                left: (lambda.len(), 1),
                right: (self.rows(), 1),
            });
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        Ok(quad_objective(&self.p, self.q.data(), x))
    }

    /// `Ax − b`
    pub fn constraint_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let ax = self.a.matmul(&Tensor::column(x))?;
        Ok(ax.data().iter().zip(self.b.data()).map(|(a, b)| a - b).collect())
    }

    /// `½xᵀPx + qᵀx + λᵀ(Ax − b)`
    pub fn lagrangian(&self, x: &[f64], lambda: &[f64]) -> Result<f64> {
        self.check_lambda(lambda)?;
        let f = self.constraint_values(x)?;
        let pen: f64 = lambda.iter().zip(&f).map(|(l, v)| l * v).sum();
        Ok(self.objective(x)? + pen)
    }

    /// `Px + q + Aᵀλ`
    pub fn grad_x_lagrangian(&self, x: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        self.check_lambda(lambda)?;
        let px = self.p.matmul(&Tensor::column(x))?;
        let atl = self.at.matmul(&Tensor::column(lambda))?;
        Ok((0..self.n)
            .map(|i| px.data()[i] + self.q.data()[i] + atl.data()[i])
            .collect())
    }

    /// Places the problem data on a tape as constants.
    pub fn bind(&self, tape: &mut Tape) -> QpVars {
        QpVars {
            n: self.n,
            rows: self.rows(),
            p: tape.constant(self.p.clone()),
            q: tape.constant(self.q.clone()),
            a: tape.constant(self.a.clone()),
            at: tape.constant(self.at.clone()),
            b: tape.constant(self.b.clone()),
            s: tape.constant(self.s.clone()),
        }
    }
}

/// Relaxes an instance: `A = [Ā; M; −M]`, `b = [b̄; 1_r; 1_r]`.
pub fn relax(inst: &MIQPInstance) -> Result<RelaxedQP> {
    inst.validate()?;
    let (n, m, r) = (inst.n, inst.m, inst.r);
    let rows = m + 2 * r;
    let mut a = Tensor::zeros(rows, n);
    for i in 0..m {
        for j in 0..n {
            a.set(i, j, inst.abar.get(i, j));
        }
    }
    for (k, &i) in inst.int_idx.iter().enumerate() {
        a.set(m + k, i, 1.0);
        a.set(m + r + k, i, -1.0);
    }
    let mut b = inst.bbar.clone();
    b.extend(std::iter::repeat_n(1.0, 2 * r));
    RelaxedQP::from_parts(inst.p.clone(), inst.q.clone(), a, b, m, r)
}

/// Problem data living on a tape.
#[derive(Copy, Clone, Debug)]
pub struct QpVars {
    pub n: usize,
    pub rows: usize,
    pub p: Var,
    pub q: Var,
    pub a: Var,
    pub at: Var,
    pub b: Var,
    pub s: Var,
}

/// Differentiable `Ax − b`.
pub fn constraint_values(tape: &mut Tape, qp: &QpVars, x: Var) -> Result<Var> {
    let ax = tape.matmul(qp.a, x)?;
    tape.sub(ax, qp.b)
}

/// Differentiable `½xᵀPx + qᵀx + λᵀ(Ax − b)`.
pub fn lagrangian(tape: &mut Tape, qp: &QpVars, x: Var, lambda: Var) -> Result<Var> {
    let px = tape.matmul(qp.p, x)?;
    let quad = tape.dot(x, px)?;
    let quad = tape.scale(quad, 0.5);
    let lin = tape.dot(qp.q, x)?;
    let f = constraint_values(tape, qp, x)?;
    let pen = tape.dot(lambda, f)?;
    let obj = tape.add(quad, lin)?;
    tape.add(obj, pen)
}

/// Differentiable closed-form `∇ₓL = Px + q + Aᵀλ`.
pub fn grad_x_lagrangian(tape: &mut Tape, qp: &QpVars, x: Var, lambda: Var) -> Result<Var> {
    let px = tape.matmul(qp.p, x)?;
    let atl = tape.matmul(qp.at, lambda)?;
    let g = tape.add(px, qp.q)?;
    tape.add(g, atl)
}

/// Instances drawn from `cfg` with per-index seeds `derive_seed(cfg.seed, [index])`.
pub fn generate_many(cfg: &InstanceDistributionConfig, indices: std::ops::Range<u64>) -> Result<Vec<MIQPInstance>> {
    indices
        .map(|i| generate_instance(cfg, crate::seed::derive_seed(cfg.seed, &[i])))
        .collect()
}

pub(crate) fn uniform_vec(rng: &mut Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..=hi)).collect()
}
