//! Config files are TOML. Each subcommand reads one table: the whole file
//! for single commands, or a named section for `reproduce-all`. Flags are
//! layered on top, and the merged value is what gets echoed into outputs.

use std::path::{Path, PathBuf};

use patchlab_forge::{OperandPair, TaskSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub fn read_toml(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    Ok(serde_json::to_value(table)?)
}

/// Recursively overwrite `base` with `overlay`; tables merge, anything else
/// replaces.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Drop nulls so unset flags never clobber file values.
pub fn prune(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, prune(v)))
                .filter(|(_, v)| !matches!(v, Value::Object(m) if m.is_empty()))
                .collect(),
        ),
        other => other,
    }
}

/// File table, then flags, then typed defaults. Returns the typed config and
/// its fully resolved JSON form.
pub fn resolve<T: DeserializeOwned + Serialize>(
    file: Option<Value>,
    flags: Value,
) -> Result<(T, Value)> {
    let mut merged = file.unwrap_or_else(|| Value::Object(Default::default()));
    merge(&mut merged, prune(flags));
    let typed: T =
        serde_json::from_value(merged).map_err(|e| CliError::Config(format!("config: {e}")))?;
    let echoed = serde_json::to_value(&typed)?;
    Ok((typed, echoed))
}

pub fn load_file(path: Option<&PathBuf>) -> Result<Option<Value>> {
    path.map(|p| read_toml(p)).transpose()
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

/// Task settings; the pair list defaults to the built-in corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub split_seed: u64,
    pub held_out_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<OperandPair>>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let spec = TaskSpec::default();
        Self {
            split_seed: spec.split_seed,
            held_out_fraction: spec.held_out_fraction,
            pairs: None,
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> Result<TaskSpec> {
        let mut spec = TaskSpec {
            split_seed: self.split_seed,
            held_out_fraction: self.held_out_fraction,
            ..TaskSpec::default()
        };
        if let Some(p) = &self.pairs {
            spec.pairs = p.clone();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn held_out(&self) -> Result<Vec<OperandPair>> {
        Ok(self.spec()?.split().1)
    }
}

/// `"9.8,9.11"` or `"9.8 vs 9.11"`.
pub fn parse_pair(s: &str) -> Result<OperandPair> {
    let (a, b) = s
        .split_once(',')
        .or_else(|| s.split_once(" vs "))
        .ok_or_else(|| CliError::Config(format!("pair {s:?} should look like 9.8,9.11")))?;
    Ok(OperandPair::parse(a.trim(), b.trim())?)
}

/// `"0,2,4,6"`.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad list element {t:?} in {s:?}")))
        })
        .collect()
}

/// `"-1,-0.5"` or a `start:stop:step` range whose points are computed by
/// index.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Config(format!("bad grid {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (start, stop, step) = (v[0], v[1], v[2]);
        if step == 0.0 || (stop - start) / step < 0.0 {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let span = step * (n - 1) as f64;
        if n > 1 && (span - (stop - start)).abs() <= 1e-9 * step.abs() {
            // lands on `stop`: interpolate so 0:1:0.1 gives 0.6, not 0.6000000000000001
            return Ok((0..n)
                .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
                .collect());
        }
        return Ok(patchlab_sweep::spec::grid(start, step, n));
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect()
}

/// `"L5/N12"` or `"5:12"`.
pub fn parse_neuron(s: &str) -> Result<patchlab_core::NeuronId> {
    let bad = || CliError::Config(format!("neuron {s:?} should look like L5/N12"));
    let (l, n) = s
        .split_once('/')
        .map(|(l, n)| (l.trim_start_matches('L'), n.trim_start_matches('N')))
        .or_else(|| s.split_once(':'))
        .ok_or_else(bad)?;
    Ok(patchlab_core::NeuronId {
        layer: l.parse().map_err(|_| bad())?,
        index: n.parse().map_err(|_| bad())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file_and_nulls_do_not() {
        let mut base = json!({"a": 1, "t": {"x": 1, "y": 2}});
        merge(
            &mut base,
            prune(json!({"a": null, "t": {"y": 3, "z": null}, "n": {"m": null}})),
        );
        assert_eq!(base, json!({"a": 1, "t": {"x": 1, "y": 3}}));
    }

    #[test]
    fn grids_and_lists() {
        assert_eq!(parse_grid("0:-5:-0.25").unwrap().len(), 21);
        assert_eq!(
            parse_grid("0:1:0.1").unwrap(),
            patchlab_sweep::spec::default_lambdas()
        );
        assert_eq!(
            parse_grid("0:-5:-0.25").unwrap(),
            patchlab_sweep::spec::default_alphas()
        );
        assert_eq!(parse_grid("0:1:0.3").unwrap().len(), 4);
        assert_eq!(parse_grid("0.5, 1").unwrap(), vec![0.5, 1.0]);
        assert!(parse_grid("0:1:-1").is_err());
        assert_eq!(parse_list("0,2,4,6").unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(parse_neuron("L5/N12").unwrap().index, 12);
        assert_eq!(parse_neuron("3:4").unwrap().layer, 3);
        assert_eq!(parse_pair("9.8,9.11").unwrap().to_string(), "9.8 vs 9.11");
    }
}
