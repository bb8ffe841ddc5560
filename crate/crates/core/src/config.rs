//! Run configuration: one TOML file with a section per module, merged over
//! defaults and overridden by command-line `section.key=value` pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SweepSpec;
use crate::gnn::ArchDims;
use crate::oracle::DAConfig;
use crate::problem::InstanceDistributionConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed for training and evaluation starts.
    pub seed: u64,
    /// Worker threads for instance-parallel work.
    pub jobs: usize,
    /// Suffix of the run directory name.
    pub tag: String,
    /// Training instances written by `generate`; the test split is sized
    /// from `split`.
    pub count: usize,
    /// Train:test ratio used by `generate`, e.g. `"2:1"`.
    pub split: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            tag: "run".into(),
            count: 800,
            split: "2:1".into(),
        }
    }
}

/// Parses `"a:b"` into positive integers.
pub fn parse_split(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config("run.split", format!("expected two positive integers like \"2:1\", got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 {
        return Err(bad());
    }
    Ok((a, b))
}

/// Test-set size accompanying `count` training instances at ratio `a:b`.
pub fn test_count(count: usize, (a, b): (usize, usize)) -> usize {
    count * b / a
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: InstanceDistributionConfig,
    pub oracle: DAConfig,
    pub arch: ArchDims,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
    pub run: RunSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate("problem.")?;
        self.oracle.validate("oracle.")?;
        self.arch.validate("arch.")?;
        self.train.validate("train.")?;
        self.sweep.validate("sweep.")?;
        if self.run.jobs == 0 {
            return Err(Error::config("run.jobs", "must be at least 1"));
        }
        if self.run.tag.is_empty() || self.run.tag.contains(['/', '\\']) {
            return Err(Error::config("run.tag", "must be a nonempty name without path separators"));
        }
        parse_split(&self.run.split)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in `table` to `value`, creating sections on the way.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::config(path, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.as_str(), "override must look like section.key=value"))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

/// Deserializes and validates a merged table, naming the offending field path
/// on failure.
pub fn from_table(table: toml::Table) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { String::new() } else { path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("", e.to_string()))?;
    apply_overrides(&mut table, overrides)?;
    from_table(table)
}

/// Defaults, then the file at `path` when given, then `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides).map_err(|e| match (e, path) {
        (Error::Config { path: field, message }, Some(p)) => {
            Error::config(field, format!("{message} (in {})", p.display()))
        }
        (e, _) => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.problem.n, cfg.problem.m, cfg.problem.r), (80, 45, 10));
        assert_eq!((cfg.arch.k_layers, cfg.arch.l_layers, cfg.arch.t_sub), (14, 14, 3));
        assert_eq!((cfg.arch.k_hops, cfg.arch.hidden), (1, 32));
        assert_eq!((cfg.train.alpha, cfg.train.beta), (0.98, 0.95));
    }

    #[test]
    fn override_beats_file() {
        let cfg = parse_config_str("[problem]\nn = 30\nm = 7\n", &["problem.n=20".into()]).unwrap();
        assert_eq!(cfg.problem.n, 20);
        assert_eq!(cfg.problem.m, 7);
        assert_eq!(cfg.problem.r, 10);
    }

    #[test]
    fn unknown_key_names_the_field() {
        let err = parse_config_str("[train]\nalpah = 0.5\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") && msg.contains("alpah"), "{msg}");
    }

    #[test]
    fn type_mismatch_names_the_field() {
        let err = parse_config_str("[arch]\nhidden = \"wide\"\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "arch.hidden"), "{err}");
    }

    #[test]
    fn negative_learning_rate_is_rejected() {
        let err = parse_config_str("", &["train.eps_p=-1e-3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train.eps_p"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let cfg = parse_config_str("", &["train.clip=100.0".into(), "run.tag=\"abc\"".into()]).unwrap();
        assert_eq!(parse_config_str(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn bare_string_override() {
        let cfg = parse_config_str("", &["train.optimizer=adam".into()]).unwrap();
        assert_eq!(cfg.train.optimizer, crate::training::OptimizerKind::Adam);
    }

    #[test]
    fn split_parsing() {
        assert_eq!(parse_split("2:1").unwrap(), (2, 1));
        assert!(parse_split("2-1").is_err());
        assert!(parse_split("0:1").is_err());
        assert_eq!(test_count(800, (2, 1)), 400);
        assert_eq!(test_count(200, (2, 1)), 100);
    }
}
