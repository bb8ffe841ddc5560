//! Unrolled primal and dual graph networks.
//!
//! Every unrolled layer stacks the node signal
//!
//! ```text
//!     X₀ = [[x, q],      (n variable nodes)
//!           [λ, b]]      (m + 2r constraint nodes)
//! ```
//!
//! runs `T` polynomial graph filters `X_t = tanh(Σ_h Sʰ X_{t−1} Θ_{t,h})`, and
//! reads out a residual update on the variable rows (primal) or the
//! constraint rows followed by a relu (dual).
//!
//! A coupled forward pass runs the dual network; each dual layer first
//! queries the full primal network at the current multiplier.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{QpVars, RelaxedQP};
use crate::seed::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Node features entering the first sub-layer: `[x|λ, q|b]`.
pub const INPUT_FEATURES: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchDims {
    /// Primal unrolled layers, K.
    pub k_layers: usize,
    /// Dual unrolled layers, L.
    pub l_layers: usize,
    /// Graph sub-layers per unrolled layer, T.
    pub t_sub: usize,
    /// Filter taps, K_h.
    pub k_hops: usize,
    /// Hidden features F.
    pub hidden: usize,
    /// Per-node readout biases instead of one broadcast scalar. Ties the
    /// model to a single problem size.
    pub per_node_bias: bool,
}

impl Default for ArchDims {
    fn default() -> Self {
        Self {
            k_layers: 14,
            l_layers: 14,
            t_sub: 3,
            k_hops: 1,
            hidden: 32,
            per_node_bias: false,
        }
    }
}

impl ArchDims {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}{f}");
        if self.k_layers < 1 {
            return Err(Error::config(field("k_layers"), "must be at least 1"));
        }
        if self.t_sub < 1 {
            return Err(Error::config(field("t_sub"), "must be at least 1"));
        }
        if self.hidden < 1 {
            return Err(Error::config(field("hidden"), "must be at least 1"));
        }
        Ok(())
    }

    /// `(F_{t−1}, F_t)` for sub-layer `t` (0-based).
    pub fn features(&self, t: usize) -> (usize, usize) {
        let fin = if t == 0 { INPUT_FEATURES } else { self.hidden };
        (fin, self.hidden)
    }

    /// Fan-based initialization bound for sub-layer `t`.
    pub fn init_bound(&self, t: usize) -> f64 {
        let (fin, fout) = self.features(t);
        (6.0 / (fin * (self.k_hops + 1) + fout) as f64).sqrt()
    }
}

/// Parameters of one unrolled layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `theta[t][h]`: F_{t−1}×F_t filter coefficients.
    pub theta: Vec<Vec<Tensor>>,
    /// F_T×1 readout weights.
    pub w: Tensor,
    /// Readout bias: 1×1 (broadcast) or one entry per read-out node.
    pub c: Tensor,
}

/// All learnable tensors of one unrolled network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
}

pub type PrimalParams = NetParams;
pub type DualParams = NetParams;

impl NetParams {
    /// Θ uniform on the fan bound; readout W and c zero, so every layer starts
    /// as the identity map.
    pub fn init(rng: &mut Rng, dims: &ArchDims, depth: usize, bias_len: usize) -> Self {
        let layers = (0..depth)
            .map(|_| {
                let theta = (0..dims.t_sub)
                    .map(|t| {
                        let (fin, fout) = dims.features(t);
                        let bound = dims.init_bound(t);
                        (0..=dims.k_hops)
                            .map(|_| Tensor::from_fn(fin, fout, |_, _| rng.random_range(-bound..=bound)))
                            .collect()
                    })
                    .collect();
                let c_len = if dims.per_node_bias { bias_len } else { 1 };
                LayerParams {
                    theta,
                    w: Tensor::zeros(dims.hidden, 1),
                    c: Tensor::zeros(c_len, 1),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| {
            l.theta
                .iter()
                .flatten()
                .chain(std::iter::once(&l.w))
                .chain(std::iter::once(&l.c))
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| {
            l.theta
                .iter_mut()
                .flatten()
                .chain(std::iter::once(&mut l.w))
                .chain(std::iter::once(&mut l.c))
        })
    }

    /// Human-readable names in [`NetParams::tensors`] order.
    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            for (t, taps) in l.theta.iter().enumerate() {
                for h in 0..taps.len() {
                    names.push(format!("{prefix}[{k}].theta[{t}][{h}]"));
                }
            }
            names.push(format!("{prefix}[{k}].w"));
            names.push(format!("{prefix}[{k}].c"));
        }
        names
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Puts every tensor on the tape, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                theta: l.theta.iter().map(|taps| taps.iter().map(&mut leaf).collect()).collect(),
                w: leaf(&l.w),
                c: leaf(&l.c),
            })
            .collect();
        BoundNet { layers }
    }

    /// Shapes already-placed vars, given in [`NetParams::tensors`] order, like
    /// this network.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundNet> {
        let expected = self.tensors().count();
        if vars.len() != expected {
            return Err(Error::Contract(format!("expected {expected} parameter vars, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                theta: l.theta.iter().map(|taps| taps.iter().map(|_| next()).collect()).collect(),
                w: next(),
                c: next(),
            })
            .collect();
        Ok(BoundNet { layers })
    }

    /// Collects gradients for `bound` back into parameter shape.
    pub fn gradients_from(&self, grads: &mut Gradients, bound: &BoundNet) -> NetParams {
        let mut out = self.zeros_like();
        for (t, v) in out.tensors_mut().zip(bound.vars()) {
            if let Some(g) = grads.take(v) {
                *t = g;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub theta: Vec<Vec<Var>>,
    pub w: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct BoundNet {
    pub layers: Vec<BoundLayer>,
}

impl BoundNet {
    /// Vars in [`NetParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| l.theta.iter().flatten().copied().chain([l.w, l.c]))
            .collect()
    }
}

/// One graph filter plus activation: `tanh(Σ_h Sʰ X Θ_h)`.
///
/// `Sʰ X` is built by repeated multiplication; `Sʰ` is never formed.
pub fn graph_conv_sublayer(tape: &mut Tape, x: Var, s: Var, theta: &[Var]) -> Result<Var> {
    let mut shifted = x;
    let mut acc = tape.matmul(x, theta[0])?;
    for &th in &theta[1..] {
        shifted = tape.matmul(s, shifted)?;
        let term = tape.matmul(shifted, th)?;
        acc = tape.add(acc, term)?;
    }
    Ok(tape.tanh(acc))
}

fn node_signal(tape: &mut Tape, qp: &QpVars, x: Var, lambda: Var) -> Result<Var> {
    if tape.shape(x) != (qp.n, 1) {
        return Err(Error::Dimension {
            op: "node_signal(x)",
            left: tape.shape(x),
            right: (qp.n, 1),
        });
    }
    if tape.shape(lambda) != (qp.rows, 1) {
        return Err(Error::Dimension {
            op: "node_signal(lambda)",
            left: tape.shape(lambda),
            right: (qp.rows, 1),
        });
    }
    let left = tape.vstack(x, lambda)?;
    let right = tape.vstack(qp.q, qp.b)?;
    tape.hstack(left, right)
}

/// `X_T` of an unrolled layer, then `X_T[rows] W + c` over the given node rows.
fn filtered_readout(
    tape: &mut Tape,
    qp: &QpVars,
    x: Var,
    lambda: Var,
    layer: &BoundLayer,
    start: usize,
    len: usize,
) -> Result<Var> {
    let mut h = node_signal(tape, qp, x, lambda)?;
    for taps in &layer.theta {
        h = graph_conv_sublayer(tape, h, qp.s, taps)?;
    }
    let selected = tape.slice_rows(h, start, len)?;
    let out = tape.matmul(selected, layer.w)?;
    if tape.shape(layer.c) == (1, 1) {
        tape.add_scalar(out, layer.c)
    } else {
        tape.add(out, layer.c)
    }
}

/// `x̃_k = x̃_{k−1} + M_P X_T W_k + c_k`
pub fn primal_layer(tape: &mut Tape, qp: &QpVars, x_prev: Var, lambda: Var, layer: &BoundLayer) -> Result<Var> {
    let update = filtered_readout(tape, qp, x_prev, lambda, layer, 0, qp.n)?;
    tape.add(x_prev, update)
}

/// `x̃_0, …, x̃_K` for a fixed multiplier.
pub fn primal_forward(tape: &mut Tape, qp: &QpVars, x0: Var, lambda: Var, net: &BoundNet) -> Result<Vec<Var>> {
    let mut traj = Vec::with_capacity(net.layers.len() + 1);
    traj.push(x0);
    let mut x = x0;
    for layer in &net.layers {
        x = primal_layer(tape, qp, x, lambda, layer)?;
        traj.push(x);
    }
    Ok(traj)
}

/// `λ_l = relu(λ_{l−1} + M_D X_T W_l + c_l)`
pub fn dual_layer(tape: &mut Tape, qp: &QpVars, lambda_prev: Var, x_prev: Var, layer: &BoundLayer) -> Result<Var> {
    let update = filtered_readout(tape, qp, x_prev, lambda_prev, layer, qp.n, qp.rows)?;
    let pre = tape.add(lambda_prev, update)?;
    Ok(tape.relu(pre))
}

/// Tape handles of one coupled forward pass.
#[derive(Clone, Debug)]
pub struct TapeTrajectory {
    /// For each dual step `l = 0..=L`, the primal iterates `x̃_0..x̃_K`.
    pub primal_inner: Vec<Vec<Var>>,
    /// `λ_0..λ_L`
    pub duals: Vec<Var>,
    /// `x_0..x_L`, the last inner iterate of each query.
    pub primal_outer: Vec<Var>,
}

impl TapeTrajectory {
    pub fn x_final(&self) -> Var {
        *self.primal_outer.last().expect("at least one primal query")
    }

    pub fn lambda_final(&self) -> Var {
        *self.duals.last().expect("at least λ_0")
    }

    pub fn values(&self, tape: &Tape) -> Trajectory {
        let v = |x: Var| tape.value(x).data().to_vec();
        Trajectory {
            primal_inner: self.primal_inner.iter().map(|seq| seq.iter().map(|&x| v(x)).collect()).collect(),
            duals: self.duals.iter().map(|&x| v(x)).collect(),
            primal_outer: self.primal_outer.iter().map(|&x| v(x)).collect(),
        }
    }
}

/// Runs the dual network, querying the primal network before every dual
/// layer and once more at `λ_L`.
///
/// `x0s` supplies the primal starting point of each of the `L + 1` queries;
/// pass the same var repeatedly for a fixed start.
pub fn coupled_forward(
    tape: &mut Tape,
    qp: &QpVars,
    primal: &BoundNet,
    dual: &BoundNet,
    x0s: &[Var],
    lambda0: Var,
) -> Result<TapeTrajectory> {
    let l_layers = dual.layers.len();
    if x0s.len() != l_layers + 1 {
        return Err(Error::Contract(format!(
            "coupled forward needs {} primal starting points, got {}",
            l_layers + 1,
            x0s.len()
        )));
    }
    let mut primal_inner = Vec::with_capacity(l_layers + 1);
    let mut duals = Vec::with_capacity(l_layers + 1);
    let mut primal_outer = Vec::with_capacity(l_layers + 1);
    let mut lambda = lambda0;
    duals.push(lambda);
    for (l, layer) in dual.layers.iter().enumerate() {
        let inner = primal_forward(tape, qp, x0s[l], lambda, primal)?;
        let x_prev = *inner.last().expect("nonempty");
        primal_outer.push(x_prev);
        primal_inner.push(inner);
        lambda = dual_layer(tape, qp, lambda, x_prev, layer)?;
        duals.push(lambda);
    }
    let inner = primal_forward(tape, qp, x0s[l_layers], lambda, primal)?;
    primal_outer.push(*inner.last().expect("nonempty"));
    primal_inner.push(inner);
    Ok(TapeTrajectory {
        primal_inner,
        duals,
        primal_outer,
    })
}

/// Values of one coupled forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub primal_inner: Vec<Vec<Vec<f64>>>,
    pub duals: Vec<Vec<f64>>,
    pub primal_outer: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn x_final(&self) -> &[f64] {
        self.primal_outer.last().expect("at least one primal query")
    }

    pub fn lambda_final(&self) -> &[f64] {
        self.duals.last().expect("at least λ_0")
    }

    /// Inner iterates of the final query, made at `λ_L`.
    pub fn final_inner(&self) -> &[Vec<f64>] {
        self.primal_inner.last().expect("at least one primal query")
    }
}

/// Primal start `x̃_0 ~ U[−1, 1]ⁿ`.
pub fn draw_primal_start(rng: &mut Rng, n: usize) -> Vec<f64> {
    crate::problem::uniform_vec(rng, n, -1.0, 1.0)
}

/// Dual start `λ_0 ~ U[0, 0.1]^{m+2r}`.
pub fn draw_dual_start(rng: &mut Rng, rows: usize) -> Vec<f64> {
    crate::problem::uniform_vec(rng, rows, 0.0, 0.1)
}

/// A primal/dual network pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: ArchDims,
    pub primal: PrimalParams,
    pub dual: DualParams,
}

impl Model {
    /// `bias_sizes = (n, m + 2r)` is only consulted for per-node biases.
    pub fn init(rng: &mut Rng, dims: &ArchDims, bias_sizes: (usize, usize)) -> Self {
        Self {
            dims: dims.clone(),
            primal: NetParams::init(rng, dims, dims.k_layers, bias_sizes.0),
            dual: NetParams::init(rng, dims, dims.l_layers, bias_sizes.1),
        }
    }

    /// Value-only coupled forward pass with explicit per-query starts.
    pub fn forward_with_starts(&self, qp: &RelaxedQP, x0s: &[Vec<f64>], lambda0: &[f64]) -> Result<Trajectory> {
        let mut tape = Tape::new();
        let vars = qp.bind(&mut tape);
        let primal = self.primal.bind(&mut tape, false);
        let dual = self.dual.bind(&mut tape, false);
        let starts: Vec<Var> = x0s.iter().map(|x| tape.constant(Tensor::column(x))).collect();
        let lam = tape.constant(Tensor::column(lambda0));
        let traj = coupled_forward(&mut tape, &vars, &primal, &dual, &starts, lam)?;
        Ok(traj.values(&tape))
    }

    /// Value-only coupled forward pass reusing one primal start for every query.
    pub fn forward(&self, qp: &RelaxedQP, x0: &[f64], lambda0: &[f64]) -> Result<Trajectory> {
        let starts = vec![x0.to_vec(); self.dual.depth() + 1];
        self.forward_with_starts(qp, &starts, lambda0)
    }

    /// Value-only primal pass `x̃_0..x̃_K` at a fixed multiplier.
    pub fn primal_trajectory(&self, qp: &RelaxedQP, x0: &[f64], lambda: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = qp.bind(&mut tape);
        let primal = self.primal.bind(&mut tape, false);
        let x = tape.constant(Tensor::column(x0));
        let lam = tape.constant(Tensor::column(lambda));
        let traj = primal_forward(&mut tape, &vars, x, lam, &primal)?;
        Ok(traj.iter().map(|&v| tape.value(v).data().to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{generate_instance, relax, InstanceDistributionConfig};
    use crate::seed::rng_from_seed;

    fn small_dims() -> ArchDims {
        ArchDims {
            k_layers: 3,
            l_layers: 2,
            t_sub: 2,
            k_hops: 1,
            hidden: 5,
            per_node_bias: false,
        }
    }

    fn small_qp(seed: u64) -> RelaxedQP {
        relax(&generate_instance(&InstanceDistributionConfig::with_dims(6, 4, 2), seed).unwrap()).unwrap()
    }

    #[test]
    fn zero_hop_is_a_dense_layer() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(4, 2, |i, j| 0.3 * i as f64 - 0.2 * j as f64));
        let s = tape.constant(Tensor::identity(4).scale(0.7));
        let th = tape.constant(Tensor::from_fn(2, 3, |i, j| (i + j) as f64 * 0.1 - 0.15));
        let out = graph_conv_sublayer(&mut tape, x, s, &[th]).unwrap();
        let expect = tape.value(x).matmul(tape.value(th)).unwrap().map(f64::tanh);
        assert_eq!(tape.value(out), &expect);
    }

    #[test]
    fn zero_filters_give_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(4, 2, |i, j| (i * 2 + j) as f64));
        let s = tape.constant(Tensor::from_fn(4, 4, |i, j| ((i + j) % 3) as f64));
        let th0 = tape.constant(Tensor::zeros(2, 3));
        let th1 = tape.constant(Tensor::zeros(2, 3));
        let out = graph_conv_sublayer(&mut tape, x, s, &[th0, th1]).unwrap();
        assert_eq!(tape.value(out), &Tensor::zeros(4, 3));
    }

    #[test]
    fn init_is_identity_and_deterministic() {
        let dims = small_dims();
        let a = Model::init(&mut rng_from_seed(4), &dims, (6, 8));
        let b = Model::init(&mut rng_from_seed(4), &dims, (6, 8));
        assert_eq!(a, b);
        for layer in &a.primal.layers {
            for (t, taps) in layer.theta.iter().enumerate() {
                let bound = dims.init_bound(t);
                assert!(taps.iter().all(|th| th.max_abs() <= bound));
            }
        }
        let qp = small_qp(1);
        let mut rng = rng_from_seed(9);
        let x0 = draw_primal_start(&mut rng, qp.n);
        let l0 = draw_dual_start(&mut rng, qp.rows());
        let traj = a.forward(&qp, &x0, &l0).unwrap();
        assert_eq!(traj.x_final(), x0.as_slice());
        assert_eq!(traj.lambda_final(), l0.as_slice());
        assert!(traj.primal_inner.iter().flatten().all(|x| x == &x0));
    }

    #[test]
    fn trajectory_shapes() {
        let dims = small_dims();
        let model = Model::init(&mut rng_from_seed(1), &dims, (6, 8));
        let qp = small_qp(2);
        let traj = model.forward(&qp, &[0.1; 6], &[0.05; 8]).unwrap();
        assert_eq!(traj.duals.len(), dims.l_layers + 1);
        assert_eq!(traj.primal_outer.len(), dims.l_layers + 1);
        assert_eq!(traj.primal_inner.len(), dims.l_layers + 1);
        for (inner, outer) in traj.primal_inner.iter().zip(&traj.primal_outer) {
            assert_eq!(inner.len(), dims.k_layers + 1);
            assert_eq!(inner.last().unwrap(), outer);
        }
    }

    #[test]
    fn depth_zero_dual_network() {
        let dims = ArchDims {
            l_layers: 0,
            ..small_dims()
        };
        let model = Model::init(&mut rng_from_seed(1), &dims, (6, 8));
        let qp = small_qp(2);
        let traj = model.forward(&qp, &[0.1; 6], &[0.05; 8]).unwrap();
        assert_eq!(traj.duals, vec![vec![0.05; 8]]);
        assert_eq!(traj.primal_outer.len(), 1);
    }

    #[test]
    fn dual_layer_saturates_and_is_identity_at_zero_readout() {
        let dims = small_dims();
        let mut model = Model::init(&mut rng_from_seed(3), &dims, (6, 8));
        let qp = small_qp(3);
        let lam0: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let traj = model.forward(&qp, &[0.2; 6], &lam0).unwrap();
        assert_eq!(traj.duals[1], lam0);

        for l in &mut model.dual.layers {
            l.c = Tensor::scalar(-1e6);
        }
        let traj = model.forward(&qp, &[0.2; 6], &lam0).unwrap();
        assert!(traj.duals[1..].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn per_node_bias_shapes() {
        let dims = ArchDims {
            per_node_bias: true,
            ..small_dims()
        };
        let model = Model::init(&mut rng_from_seed(1), &dims, (6, 8));
        assert_eq!(model.primal.layers[0].c.shape(), (6, 1));
        assert_eq!(model.dual.layers[0].c.shape(), (8, 1));
        let qp = small_qp(1);
        assert!(model.forward(&qp, &[0.0; 6], &[0.0; 8]).is_ok());
        let other = relax(&generate_instance(&InstanceDistributionConfig::with_dims(7, 4, 2), 1).unwrap()).unwrap();
        assert!(model.forward(&other, &[0.0; 7], &[0.0; 8]).is_err());
    }

    #[test]
    fn wrong_number_of_starts_is_rejected() {
        let model = Model::init(&mut rng_from_seed(1), &small_dims(), (6, 8));
        let qp = small_qp(1);
        assert!(model.forward_with_starts(&qp, &[vec![0.0; 6]], &[0.0; 8]).is_err());
    }
}
