//! Classical reference solvers for the relaxed QP.
//!
//! [`QpOracle::dual_ascent`] runs the textbook iteration
//!
//! ```text
//!     x_l     = argmin_x L(x, λ_l) = −P⁻¹(q + Aᵀλ_l)
//!     λ_{l+1} = [λ_l + η (A x_l − b)]₊
//! ```
//!
//! and [`active_set_enumerate`] is an independent brute-force solver for tiny
//! instances used to cross-check it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::RelaxedQP;
use crate::tensor::Tensor;

const NEAR_ACTIVE_MAX: usize = 16;

/// Residual tolerance below which a solution counts as converged.
pub const KKT_TOL: f64 = 1e-6;

/// Largest instance [`active_set_enumerate`] accepts.
pub const ENUM_MAX_ROWS: usize = 12;
pub const ENUM_MAX_VARS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KKTResiduals {
    /// ‖Px + q + Aᵀλ‖∞
    pub stationarity: f64,
    /// ‖max(Ax − b, 0)‖∞
    pub primal_feas: f64,
    /// ‖max(−λ, 0)‖∞
    pub dual_feas: f64,
    /// |λᵀ(Ax − b)|
    pub comp_slack: f64,
}

impl KKTResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feas)
            .max(self.dual_feas)
            .max(self.comp_slack)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleSolution {
    pub x_star: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt: KKTResiduals,
    /// `(x_l, λ_l)` per iteration when requested.
    #[serde(skip)]
    pub trace: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DAConfig {
    /// Ascent step; `None` picks `1/‖A P⁻¹ Aᵀ‖₂`.
    pub step_size: Option<f64>,
    pub max_iter: usize,
    /// Stop once `‖λ_{l+1} − λ_l‖∞ ≤ tol`.
    pub tol: f64,
    pub record_trace: bool,
    /// Finish with a primal-dual active-set iteration started from the final
    /// ascent iterate, kept when its KKT residuals are no larger.
    pub polish: bool,
}

impl Default for DAConfig {
    fn default() -> Self {
        Self {
            step_size: None,
            max_iter: 50_000,
            tol: 1e-8,
            record_trace: false,
            polish: true,
        }
    }
}

impl DAConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if let Some(eta) = self.step_size {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::config(format!("{prefix}step_size"), "must be positive"));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::config(format!("{prefix}tol"), "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config(format!("{prefix}max_iter"), "must be at least 1"));
        }
        Ok(())
    }
}

/// KKT residuals of `(x, λ)` for the relaxed QP.
pub fn kkt_residuals(x: &[f64], lambda: &[f64], qp: &RelaxedQP) -> Result<KKTResiduals> {
    let grad = qp.grad_x_lagrangian(x, lambda)?;
    let f = qp.constraint_values(x)?;
    Ok(KKTResiduals {
        stationarity: grad.iter().fold(0.0, |m, v| m.max(v.abs())),
        primal_feas: f.iter().fold(0.0, |m, &v| m.max(v.max(0.0))),
        dual_feas: lambda.iter().fold(0.0, |m, &v| m.max((-v).max(0.0))),
        comp_slack: lambda.iter().zip(&f).map(|(l, v)| l * v).sum::<f64>().abs(),
    })
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Per-instance solver state with the Cholesky factor of P cached.
pub struct QpOracle<'a> {
    qp: &'a RelaxedQP,
    a: DMatrix<f64>,
    q: DVector<f64>,
    b: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> QpOracle<'a> {
    pub fn new(qp: &'a RelaxedQP) -> Result<Self> {
        let chol = Cholesky::new(to_dmatrix(&qp.p))
            .ok_or_else(|| Error::InstanceInvalid("P is not positive definite".into()))?;
        Ok(Self {
            qp,
            a: to_dmatrix(&qp.a),
            q: DVector::from_column_slice(qp.q.data()),
            b: DVector::from_column_slice(qp.b.data()),
            chol,
        })
    }

    /// Unique minimizer of `L(·, λ)`: `−P⁻¹(q + Aᵀλ)`.
    pub fn inner_min(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        if lambda.len() != self.qp.rows() {
            return Err(Error::Dimension {
                op: "inner_min",
                left: (lambda.len(), 1),
                right: (self.qp.rows(), 1),
            });
        }
        let rhs = &self.q + self.a.tr_mul(&DVector::from_column_slice(lambda));
        Ok(self.chol.solve(&rhs).iter().map(|v| -v).collect())
    }

    /// Dual function `g(λ) = L(x*(λ), λ)`.
    pub fn dual_value(&self, lambda: &[f64]) -> Result<f64> {
        let x = self.inner_min(lambda)?;
        self.qp.lagrangian(&x, lambda)
    }

    /// `A P⁻¹ Aᵀ`, the negated Hessian of the dual function.
    fn dual_hessian(&self) -> DMatrix<f64> {
        let pinv_at = self.chol.solve(&self.a.transpose());
        &self.a * pinv_at
    }

    /// Classical Lipschitz-safe ascent step `1/‖A P⁻¹ Aᵀ‖₂` (power iteration).
    pub fn default_step(&self) -> f64 {
        let h = self.dual_hessian();
        let rows = h.nrows();
        if rows == 0 {
            return 1.0;
        }
        let t = Tensor::new(rows, rows, h.transpose().as_slice().to_vec()).expect("square");
        let norm = t.spectral_norm_sym(1000, 1e-12);
        if norm > 0.0 {
            1.0 / norm
        } else {
            1.0
        }
    }

    pub fn dual_ascent(&self, cfg: &DAConfig) -> Result<OracleSolution> {
        cfg.validate("oracle.")?;
        let rows = self.qp.rows();
        let eta = cfg.step_size.unwrap_or_else(|| self.default_step());

        // In λ-space the residual is affine: A x(λ) − b = −Hλ − (A P⁻¹ q + b).
        let h = self.dual_hessian();
        let offset = &self.a * self.chol.solve(&self.q) + &self.b;

        let mut lambda = DVector::<f64>::zeros(rows);
        let mut trace = cfg.record_trace.then(Vec::new);
        let mut iterations = 0;
        while iterations < cfg.max_iter {
            if let Some(tr) = trace.as_mut() {
                tr.push((self.inner_min(lambda.as_slice())?, lambda.as_slice().to_vec()));
            }
            let residual = -(&h * &lambda) - &offset;
            let mut step = 0.0f64;
            for i in 0..rows {
                let next = (lambda[i] + eta * residual[i]).max(0.0);
                step = step.max((next - lambda[i]).abs());
                lambda[i] = next;
            }
            iterations += 1;
            if step <= cfg.tol {
                break;
            }
        }

        let lambda = lambda.as_slice().to_vec();
        let x = self.inner_min(&lambda)?;
        if let Some(tr) = trace.as_mut() {
            tr.push((x.clone(), lambda.clone()));
        }
        let kkt = kkt_residuals(&x, &lambda, self.qp)?;
        let mut sol = OracleSolution {
            converged: kkt.within(KKT_TOL),
            x_star: x,
            lambda_star: lambda,
            iterations,
            kkt,
            trace,
        };
        if cfg.polish {
            if let Some(polished) = self.polish(&sol)?.filter(|p| p.kkt.max() <= sol.kkt.max()) {
                sol.x_star = polished.x_star;
                sol.lambda_star = polished.lambda_star;
                sol.kkt = polished.kkt;
                sol.converged = true;
            }
        }
        Ok(sol)
    }

    /// Refines an approximate solution by primal-dual active-set iteration.
    ///
    /// Starting from active sets guessed from `(x, λ)`, each step solves the
    /// equality-constrained KKT system on `W` and moves to
    /// `W' = {i : λ_i + c·(Ax − b)_i > 0}` until `W` repeats. Returns the first
    /// iterate meeting [`KKT_TOL`].
    fn polish(&self, approx: &OracleSolution) -> Result<Option<OracleSolution>> {
        let f = self.qp.constraint_values(&approx.x_star)?;
        let scale = approx.lambda_star.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut guesses: Vec<Vec<usize>> = Vec::new();
        for thresh in [1e-12, 1e-9, 1e-6, 1e-4, 1e-2] {
            let by_lambda: Vec<usize> = (0..f.len())
                .filter(|&i| approx.lambda_star[i] > thresh * scale)
                .collect();
            let by_residual: Vec<usize> = (0..f.len())
                .filter(|&i| approx.lambda_star[i] > thresh * scale || f[i] > -thresh)
                .collect();
            for g in [by_lambda, by_residual] {
                if !guesses.contains(&g) {
                    guesses.push(g);
                }
            }
        }
        for start in guesses {
            let mut active = start;
            let mut seen: Vec<Vec<usize>> = Vec::new();
            for _ in 0..100 {
                let Some((x, lambda)) = solve_equality_kkt(self.qp, &active) else {
                    break;
                };
                let kkt = kkt_residuals(&x, &lambda, self.qp)?;
                if kkt.within(KKT_TOL) {
                    return Ok(Some(OracleSolution {
                        x_star: x,
                        lambda_star: lambda,
                        iterations: approx.iterations,
                        converged: true,
                        kkt,
                        trace: None,
                    }));
                }
                let f = self.qp.constraint_values(&x)?;
                let next: Vec<usize> = (0..f.len()).filter(|&i| lambda[i] + f[i] > 0.0).collect();
                seen.push(active);
                if seen.contains(&next) {
                    break;
                }
                active = next;
            }
        }
        self.enumerate_near_active(approx, &f)
    }

    /// Last resort for degenerate vertices: tries every subset of at most `n`
    /// rows among those nearly active at the approximate solution.
    fn enumerate_near_active(&self, approx: &OracleSolution, f: &[f64]) -> Result<Option<OracleSolution>> {
        let near: Vec<usize> = (0..f.len())
            .filter(|&i| approx.lambda_star[i] > 0.0 || f[i] > -1e-2)
            .collect();
        if near.len() > NEAR_ACTIVE_MAX {
            return Ok(None);
        }
        let mut masks: Vec<usize> = (0..1usize << near.len())
            .filter(|m| m.count_ones() as usize <= self.qp.n)
            .collect();
        masks.sort_by_key(|m| m.count_ones());
        for mask in masks {
            let active: Vec<usize> = (0..near.len()).filter(|k| mask & (1 << k) != 0).map(|k| near[k]).collect();
            let Some((x, lambda)) = solve_equality_kkt(self.qp, &active) else {
                continue;
            };
            let kkt = kkt_residuals(&x, &lambda, self.qp)?;
            if kkt.within(KKT_TOL) {
                return Ok(Some(OracleSolution {
                    x_star: x,
                    lambda_star: lambda,
                    iterations: approx.iterations,
                    converged: true,
                    kkt,
                    trace: None,
                }));
            }
        }
        Ok(None)
    }
}

/// Solves `[[P, A_Wᵀ], [A_W, 0]] [x; λ_W] = [−q; b_W]`, returning `x` and the
/// full-length multiplier (zero off `W`). `None` if the system is singular.
fn solve_equality_kkt(qp: &RelaxedQP, active: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = qp.n;
    let w = active.len();
    let dim = n + w;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = qp.p.get(i, j);
        }
        rhs[i] = -qp.q.data()[i];
    }
    for (k, &c) in active.iter().enumerate() {
        for j in 0..n {
            let v = qp.a.get(c, j);
            kkt[(n + k, j)] = v;
            kkt[(j, n + k)] = v;
        }
        rhs[n + k] = qp.b.data()[c];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).iter().copied().collect();
    let mut lambda = vec![0.0; qp.rows()];
    for (k, &c) in active.iter().enumerate() {
        lambda[c] = sol[n + k];
    }
    Some((x, lambda))
}

/// Exhaustive search over active sets for tiny problems.
///
/// Every subset `W` of constraint rows is tried; a candidate is accepted when
/// its multipliers are nonnegative and it satisfies `Ax ≤ b + 1e−9`. The
/// accepted candidate with the smallest objective wins.
pub fn active_set_enumerate(qp: &RelaxedQP) -> Result<OracleSolution> {
    let rows = qp.rows();
    if rows > ENUM_MAX_ROWS || qp.n > ENUM_MAX_VARS {
        return Err(Error::Size {
            what: "active-set enumeration",
            detail: format!(
                "n = {} (max {ENUM_MAX_VARS}), m + 2r = {rows} (max {ENUM_MAX_ROWS})",
                qp.n
            ),
        });
    }
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let subsets = 1usize << rows;
    for mask in 0..subsets {
        let active: Vec<usize> = (0..rows).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > qp.n {
            continue;
        }
        let Some((x, lambda)) = solve_equality_kkt(qp, &active) else {
            continue;
        };
        if active.iter().any(|&c| lambda[c] < -1e-10) {
            continue;
        }
        let f = qp.constraint_values(&x)?;
        if f.iter().any(|&v| v > 1e-9) {
            continue;
        }
        let obj = qp.objective(&x)?;
        if best.as_ref().is_none_or(|(b, _, _)| obj < *b) {
            best = Some((obj, x, lambda));
        }
    }
    match best {
        Some((_, x, lambda)) => {
            let lambda: Vec<f64> = lambda.into_iter().map(|v| v.max(0.0)).collect();
            let kkt = kkt_residuals(&x, &lambda, qp)?;
            Ok(OracleSolution {
                converged: kkt.within(KKT_TOL),
                x_star: x,
                lambda_star: lambda,
                iterations: subsets,
                kkt,
                trace: None,
            })
        }
        None => Ok(OracleSolution {
            x_star: vec![0.0; qp.n],
            lambda_star: vec![0.0; rows],
            iterations: subsets,
            converged: false,
            kkt: KKTResiduals::default(),
            trace: None,
        }),
    }
}

/// Convenience: dual ascent with the default configuration.
pub fn solve(qp: &RelaxedQP) -> Result<OracleSolution> {
    QpOracle::new(qp)?.dual_ascent(&DAConfig::default())
}
