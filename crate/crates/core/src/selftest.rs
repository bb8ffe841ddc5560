//! Invariant self-test suite shared by the `check` command and the test
//! targets: differentiation, oracle correctness and architecture contracts.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::gnn::{coupled_forward, graph_conv_sublayer, ArchDims, Model, NetParams};
use crate::oracle::{active_set_enumerate, QpOracle, DAConfig, KKTResiduals, KKT_TOL, ENUM_MAX_ROWS, ENUM_MAX_VARS};
use crate::problem::{self, generate_instance, relax, InstanceDistributionConfig, RelaxedQP};
use crate::seed::{derive_seed, rng_from_seed, Rng};
use crate::tape::{finite_difference_check_many, relative_error, Tape, Var};
use crate::tensor::Tensor;

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * normal(rng))
}

/// A random instance with `n ≤ max_n`, `m ≤ max_m`, `r ≤ max_r` (all ≥ their
/// lower bounds) and `m + 2r ≤ max_rows`.
fn random_qp(rng: &mut Rng, max_n: usize, max_m: usize, max_r: usize, max_rows: usize) -> Result<RelaxedQP> {
    let n = rng.random_range(2..=max_n);
    let r = rng.random_range(0..=max_r.min(n).min((max_rows - 1) / 2));
    let m = rng.random_range(1..=max_m.min(max_rows - 2 * r));
    let seed = rng.random();
    relax(&generate_instance(&InstanceDistributionConfig::with_dims(n, m, r), seed)?)
}

/// Worst relative error between the closed-form `∇ₓL` and a five-point
/// finite difference of `L`, over `count` random `(x, λ, z)`.
pub fn lagrangian_gradient_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0x1a9]));
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let qp = random_qp(&mut rng, 12, 8, 3, 14)?;
        let x: Vec<f64> = (0..qp.n).map(|_| normal(&mut rng)).collect();
        let lam: Vec<f64> = (0..qp.rows()).map(|_| normal(&mut rng).abs()).collect();
        let g = qp.grad_x_lagrangian(&x, &lam)?;
        let h = 1e-3;
        let mut xe = x.clone();
        for i in 0..qp.n {
            let mut at = |d: f64| {
                xe[i] = x[i] + d;
                let v = qp.lagrangian(&xe, &lam);
                xe[i] = x[i];
                v
            };
            let fd = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
            worst = worst.max(relative_error(g[i], fd));
        }
    }
    Ok(worst)
}

/// Parameters with nonzero readouts so every path of the network is active.
pub fn randomized_model(rng: &mut Rng, dims: &ArchDims, sizes: (usize, usize)) -> Model {
    let mut model = Model::init(rng, dims, sizes);
    for l in &mut model.primal.layers {
        l.w = random_tensor(rng, dims.hidden, 1, 0.3);
        l.c = Tensor::from_fn(l.c.rows(), 1, |_, _| rng.random_range(-0.3..0.3));
    }
    for l in &mut model.dual.layers {
        l.w = random_tensor(rng, dims.hidden, 1, 0.3);
        l.c = Tensor::from_fn(l.c.rows(), 1, |_, _| rng.random_range(0.2..0.5));
    }
    model
}

/// Dimensions used by the coupled finite-difference check.
pub fn fd_dims() -> ArchDims {
    ArchDims {
        k_layers: 3,
        l_layers: 3,
        t_sub: 2,
        k_hops: 1,
        hidden: 4,
        per_node_bias: false,
    }
}

/// Per-tensor worst relative error of `∂L(x_L, λ_L)/∂θ` over the full coupled
/// forward pass at `n = 6, m = 4, r = 2`, named by tensor.
pub fn coupled_gradient_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0xfd]));
    let qp = relax(&generate_instance(&InstanceDistributionConfig::with_dims(6, 4, 2), rng.random())?)?;
    let dims = fd_dims();
    let model = randomized_model(&mut rng, &dims, (qp.n, qp.rows()));
    let x0s: Vec<Tensor> = (0..=dims.l_layers)
        .map(|_| Tensor::from_fn(qp.n, 1, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let lam0 = Tensor::from_fn(qp.rows(), 1, |_, _| rng.random_range(0.0..0.1));

    let np = model.primal.tensors().count();
    let points: Vec<Tensor> = model.primal.tensors().chain(model.dual.tensors()).cloned().collect();
    let errors = finite_difference_check_many(
        |tape: &mut Tape, vars: &[Var]| {
            let z = qp.bind(tape);
            let primal = model.primal.bind_vars(&vars[..np])?;
            let dual = model.dual.bind_vars(&vars[np..])?;
            let starts: Vec<Var> = x0s.iter().map(|x| tape.constant(x.clone())).collect();
            let l0 = tape.constant(lam0.clone());
            let traj = coupled_forward(tape, &z, &primal, &dual, &starts, l0)?;
            problem::lagrangian(tape, &z, traj.x_final(), traj.lambda_final())
        },
        &points,
        1e-5,
    )?;
    let names = model
        .primal
        .tensor_names("primal")
        .into_iter()
        .chain(model.dual.tensor_names("dual"));
    Ok(names.zip(errors).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleStats {
    pub total: usize,
    pub converged: usize,
    /// Worst value of each residual field over all instances.
    pub worst: KKTResiduals,
}

impl OracleStats {
    pub fn passed(&self) -> bool {
        self.converged == self.total && self.worst.within(KKT_TOL)
    }
}

/// Dual ascent on `count` random instances with `n ≤ 20`.
pub fn oracle_kkt_stats(count: usize, seed: u64) -> Result<OracleStats> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0x0c1]));
    let mut stats = OracleStats {
        total: count,
        ..OracleStats::default()
    };
    for _ in 0..count {
        let qp = random_qp(&mut rng, 20, 12, 4, 20)?;
        let sol = QpOracle::new(&qp)?.dual_ascent(&DAConfig::default())?;
        if sol.converged && sol.kkt.within(KKT_TOL) {
            stats.converged += 1;
        }
        let w = &mut stats.worst;
        w.stationarity = w.stationarity.max(sol.kkt.stationarity);
        w.primal_feas = w.primal_feas.max(sol.kkt.primal_feas);
        w.dual_feas = w.dual_feas.max(sol.kkt.dual_feas);
        w.comp_slack = w.comp_slack.max(sol.kkt.comp_slack);
    }
    Ok(stats)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnumerationStats {
    pub total: usize,
    pub max_dx: f64,
    pub max_objective_gap: f64,
}

impl EnumerationStats {
    pub fn passed(&self) -> bool {
        self.max_dx <= 1e-5 && self.max_objective_gap <= 1e-7
    }
}

/// Dual ascent against exhaustive active-set enumeration on `count` tiny
/// instances.
pub fn enumeration_stats(count: usize, seed: u64) -> Result<EnumerationStats> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0xe4]));
    let mut stats = EnumerationStats {
        total: count,
        ..EnumerationStats::default()
    };
    for _ in 0..count {
        let qp = random_qp(&mut rng, ENUM_MAX_VARS, 8, 3, ENUM_MAX_ROWS)?;
        let da = QpOracle::new(&qp)?.dual_ascent(&DAConfig::default())?;
        let en = active_set_enumerate(&qp)?;
        let dx = da
            .x_star
            .iter()
            .zip(&en.x_star)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let gap = (qp.objective(&da.x_star)? - qp.objective(&en.x_star)?).abs();
        stats.max_dx = stats.max_dx.max(dx);
        stats.max_objective_gap = stats.max_objective_gap.max(gap);
    }
    Ok(stats)
}

fn small_dims(rng: &mut Rng) -> ArchDims {
    ArchDims {
        k_layers: rng.random_range(1..=3),
        l_layers: rng.random_range(1..=3),
        t_sub: rng.random_range(1..=2),
        k_hops: rng.random_range(0..=2),
        hidden: rng.random_range(1..=6),
        per_node_bias: false,
    }
}

/// Smallest multiplier emitted by any dual layer over `draws` random
/// parameter draws with heavy-tailed readouts.
pub fn min_dual_output(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0x2e1]));
    let mut lowest = f64::INFINITY;
    for _ in 0..draws {
        let qp = random_qp(&mut rng, 8, 6, 2, 10)?;
        let dims = small_dims(&mut rng);
        let mut model = Model::init(&mut rng, &dims, (qp.n, qp.rows()));
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        for t in model.primal.tensors_mut().chain(model.dual.tensors_mut()) {
            *t = random_tensor(&mut rng, t.rows(), t.cols(), scale);
        }
        let x0: Vec<f64> = (0..qp.n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l0: Vec<f64> = (0..qp.rows()).map(|_| rng.random_range(0.0..0.1)).collect();
        let traj = model.forward(&qp, &x0, &l0)?;
        for lam in &traj.duals[1..] {
            lowest = lowest.min(lam.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
    Ok(lowest)
}

/// Largest deviation of `(x̃_K, λ_L)` from `(x̃_0, λ_0)` for freshly
/// initialized networks.
pub fn identity_init_deviation(count: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0x1d]));
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let qp = random_qp(&mut rng, 10, 6, 2, 10)?;
        let dims = small_dims(&mut rng);
        let model = Model::init(&mut rng, &dims, (qp.n, qp.rows()));
        let x0: Vec<f64> = (0..qp.n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l0: Vec<f64> = (0..qp.rows()).map(|_| rng.random_range(0.0..1.0)).collect();
        let traj = model.forward(&qp, &x0, &l0)?;
        for inner in &traj.primal_inner {
            for x in inner {
                worst = x.iter().zip(&x0).fold(worst, |m, (a, b)| m.max((a - b).abs()));
            }
        }
        for lam in &traj.duals {
            worst = lam.iter().zip(&l0).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    Ok(worst)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |i, j| t.get(perm[i], j))
}

fn random_perm(rng: &mut Rng, len: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(rng);
    p
}

/// Worst `|f(ΠSΠᵀ, ΠX) − Π f(S, X)|` for the graph filter over `perms` random
/// node relabelings.
pub fn sublayer_equivariance_error(perms: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0xe9]));
    let mut worst: f64 = 0.0;
    for _ in 0..perms {
        let qp = random_qp(&mut rng, 10, 6, 2, 10)?;
        let nodes = qp.nodes();
        let (fin, fout) = (3, 4);
        let x = random_tensor(&mut rng, nodes, fin, 1.0);
        let thetas: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, fin, fout, 0.5)).collect();
        let perm = random_perm(&mut rng, nodes);
        let sp = Tensor::from_fn(nodes, nodes, |i, j| qp.s.get(perm[i], perm[j]));
        let xp = permute_rows(&x, &perm);

        let run = |s: &Tensor, x: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let s = tape.constant(s.clone());
            let x = tape.constant(x.clone());
            let th: Vec<Var> = thetas.iter().map(|t| tape.constant(t.clone())).collect();
            let out = graph_conv_sublayer(&mut tape, x, s, &th)?;
            Ok(tape.value(out).clone())
        };
        let base = permute_rows(&run(&qp.s, &x)?, &perm);
        let moved = run(&sp, &xp)?;
        worst = worst.max(base.sub(&moved)?.max_abs());
    }
    Ok(worst)
}

/// Worst deviation of the full coupled forward under separate relabelings of
/// variables and constraints.
pub fn model_equivariance_error(perms: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0xe10]));
    let mut worst: f64 = 0.0;
    for _ in 0..perms {
        let qp = random_qp(&mut rng, 10, 6, 2, 10)?;
        let dims = small_dims(&mut rng);
        let model = randomized_model(&mut rng, &dims, (qp.n, qp.rows()));
        let (n, rows) = (qp.n, qp.rows());
        let pv = random_perm(&mut rng, n);
        let pc = random_perm(&mut rng, rows);
        let p = Tensor::from_fn(n, n, |i, j| qp.p.get(pv[i], pv[j]));
        let q: Vec<f64> = pv.iter().map(|&i| qp.q.data()[i]).collect();
        let a = Tensor::from_fn(rows, n, |i, j| qp.a.get(pc[i], pv[j]));
        let b: Vec<f64> = pc.iter().map(|&i| qp.b.data()[i]).collect();
        let moved_qp = RelaxedQP::from_parts(p, q, a, b, qp.m, qp.r)?;

        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l0: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..0.1)).collect();
        let x0p: Vec<f64> = pv.iter().map(|&i| x0[i]).collect();
        let l0p: Vec<f64> = pc.iter().map(|&i| l0[i]).collect();
        let base = model.forward(&qp, &x0, &l0)?;
        let moved = model.forward(&moved_qp, &x0p, &l0p)?;
        for (i, &src) in pv.iter().enumerate() {
            worst = worst.max((moved.x_final()[i] - base.x_final()[src]).abs());
        }
        for (i, &src) in pc.iter().enumerate() {
            worst = worst.max((moved.lambda_final()[i] - base.lambda_final()[src]).abs());
        }
    }
    Ok(worst)
}

/// How much of the suite to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSize {
    pub lagrangian_draws: usize,
    pub fd_seeds: usize,
    pub oracle_instances: usize,
    pub enumeration_instances: usize,
    pub relu_draws: usize,
    pub identity_draws: usize,
    pub permutations: usize,
}

impl SuiteSize {
    pub fn full() -> Self {
        Self {
            lagrangian_draws: 50,
            fd_seeds: 20,
            oracle_instances: 200,
            enumeration_instances: 100,
            relu_draws: 1000,
            identity_draws: 50,
            permutations: 20,
        }
    }

    pub fn quick() -> Self {
        Self {
            lagrangian_draws: 10,
            fd_seeds: 3,
            oracle_instances: 20,
            enumeration_instances: 20,
            relu_draws: 100,
            identity_draws: 10,
            permutations: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

pub fn run_suite(size: SuiteSize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let e = lagrangian_gradient_error(size.lagrangian_draws, seed)?;
    out.push(outcome("lagrangian-gradient-fd", e <= 1e-6, format!("max rel err {e:.3e} (limit 1e-6)")));

    let mut worst = (String::new(), 0.0f64);
    for s in 0..size.fd_seeds as u64 {
        for (name, e) in coupled_gradient_errors(derive_seed(seed, &[s]))? {
            if e >= worst.1 {
                worst = (format!("{name} @ seed {s}"), e);
            }
        }
    }
    out.push(outcome(
        "coupled-forward-fd",
        worst.1 <= 1e-4,
        format!("max rel err {:.3e} at {} (limit 1e-4)", worst.1, worst.0),
    ));

    let st = oracle_kkt_stats(size.oracle_instances, seed)?;
    out.push(outcome(
        "oracle-kkt",
        st.passed(),
        format!("{}/{} converged, worst residual {:.3e}", st.converged, st.total, st.worst.max()),
    ));

    let en = enumeration_stats(size.enumeration_instances, seed)?;
    out.push(outcome(
        "active-set-cross-check",
        en.passed(),
        format!("max |dx| {:.3e}, max objective gap {:.3e}", en.max_dx, en.max_objective_gap),
    ));

    let low = min_dual_output(size.relu_draws, seed)?;
    out.push(outcome("relu-nonnegativity", low >= 0.0, format!("smallest multiplier {low:e}")));

    let dev = identity_init_deviation(size.identity_draws, seed)?;
    out.push(outcome("identity-at-init", dev == 0.0, format!("max deviation {dev:e}")));

    let e1 = sublayer_equivariance_error(size.permutations, seed)?;
    let e2 = model_equivariance_error(size.permutations, seed)?;
    out.push(outcome(
        "permutation-equivariance",
        e1 <= 1e-10 && e2 <= 1e-10,
        format!("sub-layer {e1:.3e}, coupled model {e2:.3e} (limit 1e-10)"),
    ));
    Ok(out)
}

/// Parameter count, used in diagnostics.
pub fn parameter_count(net: &NetParams) -> usize {
    net.tensors().map(Tensor::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let results = run_suite(SuiteSize::quick(), 1).unwrap();
        assert_eq!(results.len(), 7);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
