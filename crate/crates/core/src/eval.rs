//! Layerwise descent curves, test-set metrics against oracle solutions, OOD
//! sweeps, and CSV/JSON report emission.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{draw_dual_start, draw_primal_start, Model};
use crate::oracle::{DAConfig, OracleSolution, QpOracle};
use crate::problem::{generate_instance, relax, InstanceDistributionConfig, RelaxedQP};
use crate::seed::{derive_seed, rng_from_seed};
use crate::training::map_ordered;

/// An evaluation instance paired with its converged oracle solution.
#[derive(Clone, Debug)]
pub struct TestInstance {
    pub name: String,
    pub qp: RelaxedQP,
    pub solution: OracleSolution,
}

/// Fixed `(x̃_0, λ_0)` for instance `index` under an evaluation seed.
pub fn eval_starts(seed: u64, index: usize, n: usize, rows: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_from_seed(derive_seed(seed, &[0xe7a1, index as u64]));
    let x0 = draw_primal_start(&mut rng, n);
    let l0 = draw_dual_start(&mut rng, rows);
    (x0, l0)
}

/// Mean over constraints of `max(aᵢᵀx − bᵢ, 0)`.
pub fn mean_positive_violation(f: &[f64]) -> f64 {
    if f.is_empty() {
        return 0.0;
    }
    f.iter().map(|v| v.max(0.0)).sum::<f64>() / f.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Curve {
    /// Column-wise mean and standard error of equal-length rows.
    pub fn from_samples(samples: &[Vec<f64>]) -> Self {
        let Some(first) = samples.first() else {
            return Self::default();
        };
        let count = samples.len() as f64;
        let mut mean = vec![0.0; first.len()];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / count;
            }
        }
        let stderr = if samples.len() < 2 {
            vec![0.0; mean.len()]
        } else {
            mean.iter()
                .enumerate()
                .map(|(j, m)| {
                    let var = samples.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / (count - 1.0);
                    (var / count).sqrt()
                })
                .collect()
        };
        Self { mean, stderr }
    }

    /// Fraction of transitions `j → j+1` with `mean[j+1] ≤ (1 + slack)·mean[j]`.
    pub fn nonincreasing_fraction(&self, slack: f64) -> f64 {
        let transitions = self.mean.len().saturating_sub(1);
        if transitions == 0 {
            return 1.0;
        }
        let ok = self
            .mean
            .windows(2)
            .filter(|w| w[1] <= (1.0 + slack) * w[0])
            .count();
        ok as f64 / transitions as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayerwiseReport {
    /// `‖∇ₓL(x̃_k, λ_L)‖` along the final primal query, K+1 entries.
    pub grad_norm: Curve,
    /// Mean positive constraint violation of `x_l`, L+1 entries.
    pub violation: Curve,
    /// `λ_Lᵀ f(x_l)`, L+1 entries.
    pub slackness: Curve,
}

/// Runs the coupled forward pass on every instance with its fixed evaluation
/// starts and averages the three layerwise quantities.
pub fn layerwise_metrics(model: &Model, data: &[TestInstance], seed: u64, jobs: usize) -> Result<LayerwiseReport> {
    if data.is_empty() {
        return Err(Error::config("eval", "test set is empty"));
    }
    let indexed: Vec<(usize, &TestInstance)> = data.iter().enumerate().collect();
    let per: Vec<[Vec<f64>; 3]> = map_ordered(jobs, &indexed, |(i, inst)| {
        let qp = &inst.qp;
        let (x0, l0) = eval_starts(seed, *i, qp.n, qp.rows());
        let traj = model.forward(qp, &x0, &l0)?;
        let lam = traj.lambda_final();
        let grad = traj
            .final_inner()
            .iter()
            .map(|x| Ok(norm(&qp.grad_x_lagrangian(x, lam)?)))
            .collect::<Result<Vec<f64>>>()?;
        let mut viol = Vec::with_capacity(traj.primal_outer.len());
        let mut slack = Vec::with_capacity(traj.primal_outer.len());
        for x in &traj.primal_outer {
            let f = qp.constraint_values(x)?;
            viol.push(mean_positive_violation(&f));
            slack.push(dot(lam, &f));
        }
        Ok([grad, viol, slack])
    })?;
    let column = |j: usize| Curve::from_samples(&per.iter().map(|p| p[j].clone()).collect::<Vec<_>>());
    Ok(LayerwiseReport {
        grad_norm: column(0),
        violation: column(1),
        slackness: column(2),
    })
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TestMetrics {
    /// Mean of `‖x_L − x*‖²/n`.
    pub mse_x: f64,
    /// Mean of `‖x_L − x*‖²`.
    pub mse_x_total: f64,
    pub mean_violation: f64,
    /// Mean of `‖λ_L − λ*‖²/(m+2r)`.
    pub mse_lambda: f64,
    /// Mean of `|L(x_L, λ_L) − objective(x*)|`.
    pub duality_gap_proxy: f64,
}

/// Metrics of arbitrary predictions `(x_L, λ_L)`, one per instance.
pub fn metrics_from_predictions(data: &[TestInstance], preds: &[(Vec<f64>, Vec<f64>)]) -> Result<TestMetrics> {
    if data.is_empty() {
        return Err(Error::config("eval", "test set is empty"));
    }
    if data.len() != preds.len() {
        return Err(Error::Dimension {
            op: "metrics_from_predictions",
            left: (data.len(), 1),
            right: (preds.len(), 1),
        });
    }
    let count = data.len() as f64;
    let mut out = TestMetrics::default();
    for (inst, (x, lam)) in data.iter().zip(preds) {
        let qp = &inst.qp;
        let sol = &inst.solution;
        let dx = sq_dist(x, &sol.x_star);
        out.mse_x += dx / qp.n as f64 / count;
        out.mse_x_total += dx / count;
        out.mean_violation += mean_positive_violation(&qp.constraint_values(x)?) / count;
        if qp.rows() > 0 {
            out.mse_lambda += sq_dist(lam, &sol.lambda_star) / qp.rows() as f64 / count;
        }
        let gap = qp.lagrangian(x, lam)? - qp.objective(&sol.x_star)?;
        out.duality_gap_proxy += gap.abs() / count;
    }
    Ok(out)
}

fn require_converged(data: &[TestInstance]) -> Result<()> {
    match data.iter().find(|d| !d.solution.converged) {
        Some(d) => Err(Error::Data(format!("oracle solution for {} did not converge", d.name))),
        None => Ok(()),
    }
}

/// Final-layer predictions with fixed evaluation starts.
pub fn predict(model: &Model, data: &[TestInstance], seed: u64, jobs: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let indexed: Vec<(usize, &TestInstance)> = data.iter().enumerate().collect();
    map_ordered(jobs, &indexed, |(i, inst)| {
        let (x0, l0) = eval_starts(seed, *i, inst.qp.n, inst.qp.rows());
        let traj = model.forward(&inst.qp, &x0, &l0)?;
        Ok((traj.x_final().to_vec(), traj.lambda_final().to_vec()))
    })
}

pub fn test_metrics(model: &Model, data: &[TestInstance], seed: u64, jobs: usize) -> Result<TestMetrics> {
    require_converged(data)?;
    let preds = predict(model, data, seed, jobs)?;
    metrics_from_predictions(data, &preds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    N,
    M,
    R,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::N => "n",
            Axis::M => "m",
            Axis::R => "r",
        }
    }

    fn code(self) -> u64 {
        match self {
            Axis::N => 1,
            Axis::M => 2,
            Axis::R => 3,
        }
    }

    fn apply(self, cfg: &InstanceDistributionConfig, value: usize) -> InstanceDistributionConfig {
        let mut c = cfg.clone();
        match self {
            Axis::N => c.n = value,
            Axis::M => c.m = value,
            Axis::R => c.r = value,
        }
        c
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Axis::N),
            "m" => Ok(Axis::M),
            "r" => Ok(Axis::R),
            other => Err(Error::config("sweep.axis", format!("expected n, m or r, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub grid: Vec<usize>,
    /// Instances per grid point.
    pub count: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: Axis::R,
            grid: vec![0, 5, 10, 15, 20],
            count: 100,
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config(format!("{prefix}grid"), "must not be empty"));
        }
        if self.count == 0 {
            return Err(Error::config(format!("{prefix}count"), "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: usize,
    pub model: String,
    pub instances: usize,
    pub metrics: TestMetrics,
}

/// Attempts per sweep instance before it is skipped.
const SWEEP_RESAMPLES: u64 = 10;

/// Fresh solved instances at one grid point.
pub fn sweep_point_instances(
    spec: &SweepSpec,
    base: &InstanceDistributionConfig,
    value: usize,
    da: &DAConfig,
    jobs: usize,
) -> Result<Vec<TestInstance>> {
    let cfg = spec.axis.apply(base, value);
    cfg.validate("sweep.")?;
    let indices: Vec<usize> = (0..spec.count).collect();
    let found = map_ordered(jobs, &indices, |&i| {
        for attempt in 0..SWEEP_RESAMPLES {
            let seed = derive_seed(spec.seed, &[spec.axis.code(), value as u64, i as u64, attempt]);
            let inst = generate_instance(&cfg, seed)?;
            let qp = relax(&inst)?;
            let solution = QpOracle::new(&qp)?.dual_ascent(da)?;
            if solution.converged {
                return Ok(Some(TestInstance {
                    name: format!("{}={value}#{i}", spec.axis.as_str()),
                    qp,
                    solution,
                }));
            }
        }
        log::warn!(
            "sweep {}={value}: instance {i} did not converge after {SWEEP_RESAMPLES} draws, skipped",
            spec.axis.as_str()
        );
        Ok(None)
    })?;
    Ok(found.into_iter().flatten().collect())
}

/// Evaluates every model at every grid point; one row per (value, model).
pub fn ood_sweep(
    spec: &SweepSpec,
    base: &InstanceDistributionConfig,
    models: &[(String, &Model)],
    da: &DAConfig,
    eval_seed: u64,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    spec.validate("sweep.")?;
    let mut rows = Vec::with_capacity(spec.grid.len() * models.len());
    for &value in &spec.grid {
        let data = sweep_point_instances(spec, base, value, da, jobs)?;
        for (name, model) in models {
            let metrics = if data.is_empty() {
                TestMetrics {
                    mse_x: f64::NAN,
                    mse_x_total: f64::NAN,
                    mean_violation: f64::NAN,
                    mse_lambda: f64::NAN,
                    duality_gap_proxy: f64::NAN,
                }
            } else {
                test_metrics(model, &data, eval_seed, jobs)?
            };
            rows.push(SweepRow {
                axis: spec.axis,
                value,
                model: name.clone(),
                instances: data.len(),
                metrics,
            });
        }
    }
    Ok(rows)
}

/// Everything `emit_report` writes.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub layerwise: Vec<(String, LayerwiseReport)>,
    pub sweeps: Vec<SweepRow>,
    pub summary: serde_json::Value,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    model: &'a str,
    layer: usize,
    mean: f64,
    stderr: f64,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SweepCsvRow<'a> {
    value: usize,
    model: &'a str,
    instances: usize,
    mse_x: f64,
    mse_x_total: f64,
    mean_violation: f64,
    mse_lambda: f64,
    duality_gap_proxy: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes `fig2_{gradnorm,violation,slackness}.csv` when layerwise reports
/// exist, `fig3_<axis>.csv` per swept axis, and always `summary.json`.
/// Returns the written paths.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    if !report.layerwise.is_empty() {
        let curves: [(&str, fn(&LayerwiseReport) -> &Curve); 3] = [
            ("fig2_gradnorm.csv", |r| &r.grad_norm),
            ("fig2_violation.csv", |r| &r.violation),
            ("fig2_slackness.csv", |r| &r.slackness),
        ];
        for (file, pick) in curves {
            let path = out_dir.join(file);
            let rows = report.layerwise.iter().flat_map(|(name, r)| {
                let c = pick(r);
                c.mean.iter().zip(&c.stderr).enumerate().map(move |(layer, (&mean, &stderr))| CurveRow {
                    model: name,
                    layer,
                    mean,
                    stderr,
                })
            });
            write_csv(&path, rows)?;
            written.push(path);
        }
    }
    let mut axes: Vec<Axis> = Vec::new();
    for row in &report.sweeps {
        if !axes.contains(&row.axis) {
            axes.push(row.axis);
        }
    }
    for axis in axes {
        let path = out_dir.join(format!("fig3_{}.csv", axis.as_str()));
        let rows = report.sweeps.iter().filter(|r| r.axis == axis).map(|r| SweepCsvRow {
            value: r.value,
            model: &r.model,
            instances: r.instances,
            mse_x: r.metrics.mse_x,
            mse_x_total: r.metrics.mse_x_total,
            mean_violation: r.metrics.mean_violation,
            mse_lambda: r.metrics.mse_lambda,
            duality_gap_proxy: r.metrics.duality_gap_proxy,
        });
        write_csv(&path, rows)?;
        written.push(path);
    }
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&report.summary).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::ArchDims;
    use crate::oracle::solve;
    use crate::seed::rng_from_seed;

    fn instances(count: u64) -> Vec<TestInstance> {
        (0..count)
            .map(|s| {
                let qp = relax(&generate_instance(&InstanceDistributionConfig::with_dims(6, 4, 2), s).unwrap()).unwrap();
                let solution = solve(&qp).unwrap();
                TestInstance {
                    name: format!("i{s}"),
                    qp,
                    solution,
                }
            })
            .collect()
    }

    fn dims() -> ArchDims {
        ArchDims {
            k_layers: 3,
            l_layers: 2,
            t_sub: 2,
            k_hops: 1,
            hidden: 4,
            per_node_bias: false,
        }
    }

    #[test]
    fn identity_model_curves_are_flat() {
        let data = instances(4);
        let model = Model::init(&mut rng_from_seed(1), &dims(), (6, 8));
        let r = layerwise_metrics(&model, &data, 9, 1).unwrap();
        assert_eq!(r.grad_norm.mean.len(), 4);
        assert_eq!(r.violation.mean.len(), 3);
        assert_eq!(r.slackness.mean.len(), 3);
        for c in [&r.grad_norm, &r.violation, &r.slackness] {
            for v in &c.mean {
                assert!((v - c.mean[0]).abs() <= 1e-12);
            }
        }
        assert!(r.grad_norm.mean.iter().chain(&r.violation.mean).all(|&v| v >= 0.0));
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let model = Model::init(&mut rng_from_seed(1), &dims(), (6, 8));
        assert!(matches!(layerwise_metrics(&model, &[], 0, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let data = instances(3);
        let preds: Vec<_> = data
            .iter()
            .map(|d| (d.solution.x_star.clone(), d.solution.lambda_star.clone()))
            .collect();
        let m = metrics_from_predictions(&data, &preds).unwrap();
        assert_eq!(m.mse_x, 0.0);
        assert_eq!(m.mse_lambda, 0.0);
        assert!(m.mean_violation <= 1e-6);
    }

    #[test]
    fn zero_prediction_matches_hand_mse() {
        let data = instances(1);
        let n = data[0].qp.n;
        let preds = vec![(vec![0.0; n], vec![0.0; data[0].qp.rows()])];
        let m = metrics_from_predictions(&data, &preds).unwrap();
        let hand: f64 = data[0].solution.x_star.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((m.mse_x - hand).abs() <= 1e-15 * hand.max(1.0));
    }

    #[test]
    fn unconverged_solution_is_a_data_error() {
        let mut data = instances(2);
        data[1].solution.converged = false;
        let model = Model::init(&mut rng_from_seed(1), &dims(), (6, 8));
        match test_metrics(&model, &data, 0, 1) {
            Err(Error::Data(msg)) => assert!(msg.contains("i1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oracle_solution_anchors() {
        for d in instances(5) {
            let f = d.qp.constraint_values(&d.solution.x_star).unwrap();
            assert!(mean_positive_violation(&f) <= 1e-6);
            assert!(dot(&d.solution.lambda_star, &f).abs() <= 1e-6);
        }
    }

    #[test]
    fn sweep_row_count_and_determinism() {
        let spec = SweepSpec {
            axis: Axis::R,
            grid: vec![0, 2],
            count: 2,
            seed: 5,
        };
        let base = InstanceDistributionConfig::with_dims(5, 3, 1);
        let a = Model::init(&mut rng_from_seed(1), &dims(), (5, 5));
        let b = Model::init(&mut rng_from_seed(2), &dims(), (5, 5));
        let models = [("a".to_string(), &a), ("b".to_string(), &b)];
        let rows = ood_sweep(&spec, &base, &models, &DAConfig::default(), 3, 1).unwrap();
        assert_eq!(rows.len(), 4);
        let again = ood_sweep(&spec, &base, &models, &DAConfig::default(), 3, 2).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn empty_report_writes_only_summary() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_report(&Report::default(), dir.path()).unwrap();
        assert_eq!(written, vec![dir.path().join("summary.json")]);
    }

    #[test]
    fn report_csvs_have_fixed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let data = instances(2);
        let model = Model::init(&mut rng_from_seed(1), &dims(), (6, 8));
        let report = Report {
            layerwise: vec![("m".into(), layerwise_metrics(&model, &data, 0, 1).unwrap())],
            sweeps: vec![],
            summary: serde_json::json!({}),
        };
        emit_report(&report, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("fig2_gradnorm.csv")).unwrap();
        assert!(text.starts_with("model,layer,mean,stderr\n"));
        assert_eq!(text.lines().count(), 1 + 4);
    }

    #[test]
    fn nonincreasing_fraction_counts_transitions() {
        let c = Curve {
            mean: vec![1.0, 1.04, 1.2, 0.5],
            stderr: vec![0.0; 4],
        };
        assert!((c.nonincreasing_fraction(0.05) - 2.0 / 3.0).abs() < 1e-15);
    }
}
