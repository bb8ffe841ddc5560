//! Command-line surface: `generate`, `solve`, `train`, `eval`, `sweep`,
//! `check`.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_config, parse_split, test_count, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{emit_report, layerwise_metrics, ood_sweep, test_metrics, Report, TestInstance};
use crate::gnn::Model;
use crate::io::{
    read_checkpoint, read_instance, read_solution, split_paths, write_checkpoint, write_instance, write_manifest,
    write_solution, Checkpoint, ManifestEntry, Split, MANIFEST_FILE,
};
use crate::oracle::{QpOracle, KKT_TOL};
use crate::problem::{generate_many, relax, RelaxedQP};
use crate::selftest::{run_suite, SuiteSize};
use crate::training::{alternate_train, map_ordered, LogRow, TrainObserver, TrainState};

/// Environment variable naming the default run root.
pub const RUNS_ENV: &str = "DUAL_UNROLL_RUNS";

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_SELFTEST: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "dual-unroll", version, about = "Unrolled primal/dual GNNs for relaxed MIQPs")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (`run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for instance-parallel work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of variables (`problem.n`).
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Number of linear constraints (`problem.m`).
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Number of integer variables (`problem.r`).
    #[arg(long, global = true)]
    pub r: Option<usize>,
    /// Any config key, e.g. `--set train.eps_p=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a train/test dataset of instance files and a manifest.
    Generate {
        /// Training instances; the test split is sized from `--split`.
        #[arg(long)]
        count: Option<usize>,
        /// Train:test ratio, e.g. 2:1.
        #[arg(long)]
        split: Option<String>,
    },
    /// Solve every instance of a dataset and write `.sol` files.
    Solve(DataArgs),
    /// Alternating constrained training.
    Train {
        #[command(flatten)]
        data: OptionalDataArgs,
        /// `off` trains the unconstrained ablation.
        #[arg(long, value_enum)]
        constraints: Option<OnOff>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Layerwise curves and test metrics of trained models.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// `NAME=PATH` or `PATH`; repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Also report the identity-initialized model.
        #[arg(long)]
        identity: bool,
    },
    /// Out-of-distribution sweep over one of n, m, r.
    Sweep {
        /// `NAME=PATH` or `PATH`; repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
    },
    /// Run the invariant self-test suite.
    Check {
        /// Smaller sample counts.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct OptionalDataArgs {
    /// Dataset directory or manifest file; generated from the config when
    /// omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn resolve_config(cli: &Cli, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for (key, v) in [("problem.n", cli.n), ("problem.m", cli.m), ("problem.r", cli.r), ("run.jobs", cli.jobs)] {
        if let Some(v) = v {
            overrides.push(format!("{key}={v}"));
        }
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("run.seed={s}"));
    }
    overrides.extend(extra.iter().cloned());
    overrides.extend(cli.overrides.iter().cloned());
    parse_config(cli.config.as_deref(), &overrides)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn run_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    root.join(format!("{stamp}-{}", cfg.run.tag))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// FNV-1a of the resolved configuration text.
fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Creates the run layout and writes the resolved config snapshot.
fn prepare_run(dir: &Path, cfg: &RunConfig) -> Result<()> {
    for sub in ["checkpoints", "logs", "reports"] {
        create_dir(&dir.join(sub))?;
    }
    write_file(&dir.join("config.toml"), &cfg.to_toml())
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| json_error(path, e))?;
    write_file(path, &(text + "\n"))
}

fn cmd_generate(cli: &Cli, count: Option<usize>, split: Option<&str>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(c) = count {
        extra.push(format!("run.count={c}"));
    }
    if let Some(s) = split {
        extra.push(format!("run.split=\"{s}\""));
    }
    let cfg = resolve_config(cli, &extra)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let train = cfg.run.count;
    let test = test_count(train, parse_split(&cfg.run.split)?);
    let instances = generate_many(&cfg.problem, 0..(train + test) as u64)?;
    create_dir(&out.join("instances"))?;
    let mut entries = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let rel = PathBuf::from("instances").join(format!("inst_{i:05}.json"));
        write_instance(&out.join(&rel), inst)?;
        let split = if i < train { Split::Train } else { Split::Test };
        entries.push(ManifestEntry { path: rel, split });
    }
    write_manifest(&out.join(MANIFEST_FILE), &entries)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    println!("wrote {train} train and {test} test instances to {}", out.display());
    Ok(())
}

fn load_split(manifest: &Path, split: Split) -> Result<(Vec<PathBuf>, Vec<RelaxedQP>)> {
    let paths = split_paths(manifest, split)?;
    let qps = paths
        .iter()
        .map(|p| relax(&read_instance(p)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((paths, qps))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SolveReport {
    total: usize,
    converged: usize,
    max_iterations: usize,
    worst_kkt: f64,
    not_converged: Vec<String>,
}

fn cmd_solve(cli: &Cli, data: &Path) -> Result<()> {
    let cfg = resolve_config(cli, &[])?;
    let manifest = manifest_path(data);
    let mut paths = split_paths(&manifest, Split::Train)?;
    paths.extend(split_paths(&manifest, Split::Test)?);
    let sols = map_ordered(cfg.run.jobs, &paths, |p| {
        let qp = relax(&read_instance(p)?)?;
        let sol = QpOracle::new(&qp)?.dual_ascent(&cfg.oracle)?;
        write_solution(p, &sol)?;
        Ok(sol)
    })?;
    let report = SolveReport {
        total: sols.len(),
        converged: sols.iter().filter(|s| s.converged).count(),
        max_iterations: sols.iter().map(|s| s.iterations).max().unwrap_or(0),
        worst_kkt: sols.iter().map(|s| s.kkt.max()).fold(0.0, f64::max),
        not_converged: paths
            .iter()
            .zip(&sols)
            .filter(|(_, s)| !s.converged)
            .map(|(p, _)| p.display().to_string())
            .collect(),
    };
    let dir = manifest.parent().unwrap_or(Path::new("."));
    write_json(&dir.join("solve_report.json"), &report)?;
    println!(
        "solved {} instances: {} converged (KKT <= {KKT_TOL:e}), worst residual {:.3e}",
        report.total, report.converged, report.worst_kkt
    );
    Ok(())
}

/// Appends log rows to a CSV file and writes a checkpoint per round.
struct RunObserver {
    log: csv::Writer<File>,
    log_path: PathBuf,
    checkpoints: PathBuf,
    constraints: bool,
}

impl TrainObserver for RunObserver {
    fn on_epoch(&mut self, row: &LogRow) -> Result<()> {
        let err = |e: csv::Error| Error::Format {
            path: self.log_path.clone(),
            message: e.to_string(),
        };
        self.log.serialize(row).map_err(err)?;
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))?;
        log::info!(
            "round {} {} epoch {}: loss {:.5} slack {:.5} |mu| {:.4} |nu| {:.4}",
            row.round,
            row.phase,
            row.epoch,
            row.loss,
            row.mean_slack,
            row.mu_norm,
            row.nu_norm
        );
        Ok(())
    }

    fn on_round_end(&mut self, state: &TrainState) -> Result<()> {
        let path = self.checkpoints.join(format!("round_{:03}.json", state.round));
        write_checkpoint(&path, &Checkpoint::new(state.clone(), self.constraints))
    }
}

fn cmd_train(cli: &Cli, data: Option<&Path>, constraints: Option<OnOff>, resume: Option<&Path>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(c) = constraints {
        extra.push(format!("train.constraints={}", c == OnOff::On));
    }
    let cfg = resolve_config(cli, &extra)?;
    let dir = run_dir(cli, &cfg);
    prepare_run(&dir, &cfg)?;

    let train: Vec<RelaxedQP> = match data {
        Some(d) => load_split(&manifest_path(d), Split::Train)?.1,
        None => generate_many(&cfg.problem, 0..cfg.run.count as u64)?
            .iter()
            .map(relax)
            .collect::<Result<_>>()?,
    };
    if train.is_empty() {
        return Err(Error::config("run.count", "training set is empty"));
    }
    let mut state = match resume {
        Some(p) => read_checkpoint(p)?.state,
        None => TrainState::new(&cfg.arch, (train[0].n, train[0].rows()), cfg.run.seed),
    };
    let log_path = dir.join("logs").join("train_log.csv");
    let file = File::options()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let has_header = file.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let log = csv::WriterBuilder::new().has_headers(!has_header).from_writer(file);
    let mut observer = RunObserver {
        log,
        log_path,
        checkpoints: dir.join("checkpoints"),
        constraints: cfg.train.constraints,
    };
    alternate_train(&train, &cfg.train, &mut state, cfg.run.jobs, &mut observer)?;
    let final_path = dir.join("checkpoints").join("final.json");
    write_checkpoint(&final_path, &Checkpoint::new(state, cfg.train.constraints))?;
    println!("training finished; final checkpoint {}", final_path.display());
    Ok(())
}

/// `NAME=PATH` or a bare path named after its file stem.
fn parse_named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(spec);
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
            (name, p)
        }
    }
}

fn load_models(specs: &[String]) -> Result<Vec<(String, PathBuf, Model)>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = parse_named(s);
            let model = read_checkpoint(&path)?.state.model;
            Ok((name, path, model))
        })
        .collect()
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    crate::seed::derive_seed(cfg.run.seed, &[0xe7a1])
}

fn summary_config(cfg: &RunConfig) -> serde_json::Value {
    let text = cfg.to_toml();
    json!({
        "fingerprint": fingerprint(&text),
        "resolved": serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    })
}

fn cmd_eval(cli: &Cli, data: &Path, specs: &[String], identity: bool) -> Result<()> {
    let cfg = resolve_config(cli, &[])?;
    let dir = run_dir(cli, &cfg);
    prepare_run(&dir, &cfg)?;
    let (paths, qps) = load_split(&manifest_path(data), Split::Test)?;
    let test: Vec<TestInstance> = paths
        .iter()
        .zip(qps)
        .map(|(p, qp)| {
            Ok(TestInstance {
                name: p.display().to_string(),
                qp,
                solution: read_solution(p)?,
            })
        })
        .collect::<Result<_>>()?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }

    let mut models = load_models(specs)?;
    if identity {
        let dims = models[0].2.dims.clone();
        let state = TrainState::new(&dims, (test[0].qp.n, test[0].qp.rows()), cfg.run.seed);
        models.push(("identity".into(), PathBuf::new(), state.model));
    }
    let seed = eval_seed(&cfg);
    let mut report = Report::default();
    let mut metrics = serde_json::Map::new();
    for (name, _, model) in &models {
        report.layerwise.push((name.clone(), layerwise_metrics(model, &test, seed, cfg.run.jobs)?));
        let m = test_metrics(model, &test, seed, cfg.run.jobs)?;
        metrics.insert(name.clone(), serde_json::to_value(&m).map_err(|e| json_error(&dir, e))?);
    }
    report.summary = json!({
        "config": summary_config(&cfg),
        "seeds": {"run": cfg.run.seed, "eval": seed, "problem": cfg.problem.seed},
        "checkpoints": models.iter().map(|(n, p, _)| json!({"name": n, "path": p.display().to_string()})).collect::<Vec<_>>(),
        "metrics": metrics,
    });
    let written = emit_report(&report, &dir.join("reports"))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, specs: &[String]) -> Result<()> {
    let cfg = resolve_config(cli, &[])?;
    let dir = run_dir(cli, &cfg);
    prepare_run(&dir, &cfg)?;
    let models = load_models(specs)?;
    let refs: Vec<(String, &Model)> = models.iter().map(|(n, _, m)| (n.clone(), m)).collect();
    let seed = eval_seed(&cfg);
    let rows = ood_sweep(&cfg.sweep, &cfg.problem, &refs, &cfg.oracle, seed, cfg.run.jobs)?;
    let report = Report {
        layerwise: Vec::new(),
        summary: json!({
            "config": summary_config(&cfg),
            "seeds": {"run": cfg.run.seed, "eval": seed, "sweep": cfg.sweep.seed},
            "checkpoints": models.iter().map(|(n, p, _)| json!({"name": n, "path": p.display().to_string()})).collect::<Vec<_>>(),
            "metrics": rows,
        }),
        sweeps: rows,
    };
    for p in emit_report(&report, &dir.join("reports"))? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_check(cli: &Cli, quick: bool) -> Result<bool> {
    let cfg = resolve_config(cli, &[])?;
    let size = if quick { SuiteSize::quick() } else { SuiteSize::full() };
    let results = run_suite(size, cfg.run.seed)?;
    let mut out = std::io::stdout().lock();
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        let _ = writeln!(out, "{:4} {:28} {}", if r.passed { "ok" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(ok)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(jobs) = cli.jobs.filter(|&j| j > 1) {
        // A second initialization within one process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let result = match &cli.command {
        Command::Generate { count, split } => cmd_generate(&cli, *count, split.as_deref()),
        Command::Solve(d) => cmd_solve(&cli, &d.data),
        Command::Train {
            data,
            constraints,
            resume,
        } => cmd_train(&cli, data.data.as_deref(), *constraints, resume.as_deref()),
        Command::Eval {
            data,
            checkpoints,
            identity,
        } => cmd_eval(&cli, &data.data, checkpoints, *identity),
        Command::Sweep { checkpoints } => cmd_sweep(&cli, checkpoints),
        Command::Check { quick } => match cmd_check(&cli, *quick) {
            Ok(true) => Ok(()),
            Ok(false) => return EXIT_SELFTEST,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args`; usage errors exit with [`EXIT_USAGE`].
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn named_checkpoint_specs() {
        assert_eq!(parse_named("c=/a/b.json"), ("c".into(), PathBuf::from("/a/b.json")));
        assert_eq!(parse_named("/a/final.json"), ("final".into(), PathBuf::from("/a/final.json")));
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(main_with_args(["dual-unroll", "check", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::config("a", "b")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
        let d = Error::Divergence {
            phase: "dual".into(),
            round: 0,
            epoch: 0,
            step: 0,
            detail: String::new(),
        };
        assert_eq!(exit_code(&d), EXIT_DIVERGENCE);
    }
}
