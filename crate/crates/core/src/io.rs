//! On-disk formats: instance files, oracle solution files, dataset manifests
//! and training checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::OracleSolution;
use crate::problem::MIQPInstance;
use crate::tensor::Tensor;
use crate::training::TrainState;

fn fmt_f64(out: &mut String, v: f64) {
    // 17 significant digits round-trip every finite double.
    write!(out, "{v:.16e}").expect("write to String");
}

fn fmt_vec(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        fmt_f64(out, *x);
    }
    out.push(']');
}

fn fmt_matrix(out: &mut String, t: &Tensor) {
    out.push('[');
    for i in 0..t.rows() {
        out.push_str(if i > 0 { ",\n    " } else { "\n    " });
        fmt_vec(out, &t.data()[i * t.cols()..(i + 1) * t.cols()]);
    }
    out.push_str(if t.rows() > 0 { "\n  ]" } else { "]" });
}

/// Instance JSON with matrices as nested row-major arrays.
pub fn instance_to_json(inst: &MIQPInstance) -> String {
    let mut s = String::from("{\n");
    let idx: Vec<String> = inst.int_idx.iter().map(usize::to_string).collect();
    writeln!(s, "  \"n\": {},\n  \"m\": {},\n  \"r\": {},", inst.n, inst.m, inst.r).unwrap();
    writeln!(s, "  \"intIdx\": [{}],", idx.join(", ")).unwrap();
    s.push_str("  \"P\": ");
    fmt_matrix(&mut s, &inst.p);
    s.push_str(",\n  \"q\": ");
    fmt_vec(&mut s, &inst.q);
    s.push_str(",\n  \"Abar\": ");
    fmt_matrix(&mut s, &inst.abar);
    s.push_str(",\n  \"bbar\": ");
    fmt_vec(&mut s, &inst.bbar);
    writeln!(s, ",\n  \"seed\": {}\n}}", inst.seed).unwrap();
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    n: usize,
    m: usize,
    r: usize,
    #[serde(rename = "intIdx")]
    int_idx: Vec<usize>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    q: Vec<f64>,
    #[serde(rename = "Abar")]
    abar: Vec<Vec<f64>>,
    bbar: Vec<f64>,
    seed: u64,
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> Result<Tensor> {
    if rows.is_empty() {
        Ok(Tensor::zeros(0, cols))
    } else {
        Tensor::from_rows(&rows)
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

pub fn instance_from_json(path: &Path, text: &str) -> Result<MIQPInstance> {
    let f: InstanceFile = parse_json(path, text)?;
    let bad = |e: Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let inst = MIQPInstance {
        n: f.n,
        m: f.m,
        r: f.r,
        int_idx: f.int_idx,
        p: matrix(f.p, f.n).map_err(bad)?,
        q: f.q,
        abar: matrix(f.abar, f.n).map_err(bad)?,
        bbar: f.bbar,
        seed: f.seed,
        planted: None,
    };
    inst.validate().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(inst)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_instance(path: &Path, inst: &MIQPInstance) -> Result<()> {
    write_text(path, &instance_to_json(inst))
}

pub fn read_instance(path: &Path) -> Result<MIQPInstance> {
    instance_from_json(path, &read_text(path)?)
}

/// `<instance path>.sol`
pub fn solution_path(instance: &Path) -> PathBuf {
    let mut p = instance.as_os_str().to_owned();
    p.push(".sol");
    PathBuf::from(p)
}

pub fn write_solution(instance: &Path, sol: &OracleSolution) -> Result<()> {
    let path = solution_path(instance);
    let text = serde_json::to_string_pretty(sol).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    write_text(&path, &(text + "\n"))
}

/// Reads the solution stored next to `instance`; a missing file is a data
/// error naming the instance.
pub fn read_solution(instance: &Path) -> Result<OracleSolution> {
    let path = solution_path(instance);
    if !path.exists() {
        return Err(Error::Data(format!(
            "no oracle solution for {} (expected {})",
            instance.display(),
            path.display()
        )));
    }
    parse_json(&path, &read_text(&path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Absolute instance paths of one split, in manifest order.
pub fn split_paths(manifest: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(read_manifest(manifest)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| base.join(e.path))
        .collect())
}

pub const CHECKPOINT_FORMAT: &str = "dual-unroll-checkpoint/1";

/// Training state plus the conventions needed to interpret it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    /// How the shift operator is scaled before the networks see it.
    pub norm_scale: String,
    pub constraints: bool,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState, constraints: bool) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            norm_scale: "exact spectral norm".into(),
            constraints,
            state,
        }
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = parse_json(path, &read_text(path)?)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported checkpoint format {:?}", ckpt.format),
        });
    }
    ckpt.state.model.dims.validate("checkpoint.state.model.dims.")?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::ArchDims;
    use crate::oracle::solve;
    use crate::problem::{generate_instance, relax, InstanceDistributionConfig};

    #[test]
    fn instance_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let mut inst = generate_instance(&InstanceDistributionConfig::with_dims(5, 3, 2), 11).unwrap();
        write_instance(&path, &inst).unwrap();
        let back = read_instance(&path).unwrap();
        inst.planted = None;
        assert_eq!(back, inst);
    }

    #[test]
    fn empty_constraint_block_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let mut inst = generate_instance(&InstanceDistributionConfig::with_dims(1, 0, 0), 2).unwrap();
        inst.planted = None;
        write_instance(&path, &inst).unwrap();
        assert_eq!(read_instance(&path).unwrap(), inst);
    }

    #[test]
    fn unknown_instance_field_names_the_path() {
        let err = instance_from_json(Path::new("x.json"), r#"{"n": 1, "bogus": 2}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn missing_solution_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_solution(&dir.path().join("i.json")).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("i.json")));
    }

    #[test]
    fn solution_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.json");
        let inst = generate_instance(&InstanceDistributionConfig::with_dims(4, 2, 1), 3).unwrap();
        let sol = solve(&relax(&inst).unwrap()).unwrap();
        write_solution(&path, &sol).unwrap();
        assert_eq!(read_solution(&path).unwrap(), sol);
        assert_eq!(solution_path(&path), dir.path().join("i.json.sol"));
    }

    #[test]
    fn manifest_filters_splits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let entries = vec![
            ManifestEntry { path: "a.json".into(), split: Split::Train },
            ManifestEntry { path: "b.json".into(), split: Split::Test },
            ManifestEntry { path: "c.json".into(), split: Split::Train },
        ];
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
        assert_eq!(
            split_paths(&path, Split::Train).unwrap(),
            vec![dir.path().join("a.json"), dir.path().join("c.json")]
        );
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let dims = ArchDims {
            k_layers: 2,
            l_layers: 2,
            t_sub: 2,
            k_hops: 1,
            hidden: 3,
            per_node_bias: false,
        };
        let mut state = TrainState::new(&dims, (4, 4), 9);
        state.meta.mu = vec![0.1 + 0.2, 1.0 / 3.0];
        state.model.primal.layers[0].w = Tensor::filled(3, 1, std::f64::consts::PI);
        let _: u64 = rand::Rng::random(&mut state.rng);
        let ckpt = Checkpoint::new(state, true);
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let text = fs::read_to_string(&path).unwrap();
        write_checkpoint(&path, &back).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), text);
    }
}
