//! Output files: `samples.csv`, `weights.csv`, `mean_path.csv`,
//! `summary.json` and `compare.json`. Floats are printed like C's `%.12g`
//! and JSON objects have sorted keys, so outputs are byte-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use pathlangevin::diagnostics::{Estimate, Marginal, Summary};
use pathlangevin::{Grid, Path};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// `%.12g` formatting.
pub fn fmt_g(x: f64) -> String {
    const PREC: i32 = 12;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (PREC - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PREC).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (PREC - 1 - exp) as usize, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Pretty JSON with two-space indentation, sorted keys and `%.12g` floats.
/// Non-finite numbers become `null`.
pub fn to_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fmt_g(n.as_f64().expect("f64")));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string")),
        Value::Array(items) => {
            if items.iter().all(|i| !i.is_array() && !i.is_object()) {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, item, indent);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, item) in items.iter().enumerate() {
                    out.push_str(&"  ".repeat(indent + 1));
                    write_value(out, item, indent + 1);
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                out.push_str(&"  ".repeat(indent));
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&"  ".repeat(indent + 1));
                out.push_str(&serde_json::to_string(k).expect("key"));
                out.push_str(": ");
                write_value(out, &map[*k], indent + 1);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&"  ".repeat(indent));
            out.push('}');
        }
    }
}

/// A float as a JSON value; non-finite values become `null`.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

pub fn estimate_json(e: &Estimate) -> Value {
    let mut m = Map::new();
    m.insert("value".into(), num(e.value));
    m.insert("std_error".into(), num(e.std_error));
    Value::Object(m)
}

pub fn write_text(path: &FsPath, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json(path: &FsPath) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

/// Node moments of a run, keyed by node and component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeMoments {
    pub u: Vec<f64>,
    pub mean: Vec<Vec<Estimate>>,
    pub variance: Vec<Vec<Estimate>>,
}

impl NodeMoments {
    pub fn to_json(&self) -> Value {
        let grid = |f: &dyn Fn(&Estimate) -> f64, rows: &Vec<Vec<Estimate>>| -> Value {
            Value::Array(rows.iter().map(|r| Value::Array(r.iter().map(|e| num(f(e))).collect())).collect())
        };
        let mut m = Map::new();
        m.insert("u".into(), Value::Array(self.u.iter().map(|v| num(*v)).collect()));
        m.insert("mean".into(), grid(&|e| e.value, &self.mean));
        m.insert("mean_se".into(), grid(&|e| e.std_error, &self.mean));
        m.insert("variance".into(), grid(&|e| e.value, &self.variance));
        m.insert("variance_se".into(), grid(&|e| e.std_error, &self.variance));
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Option<Self> {
        let floats = |v: &Value| -> Option<Vec<f64>> {
            v.as_array()?.iter().map(|x| Some(x.as_f64().unwrap_or(f64::NAN))).collect()
        };
        let table = |v: &Value| -> Option<Vec<Vec<f64>>> { v.as_array()?.iter().map(floats).collect() };
        let pair = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| -> Vec<Vec<Estimate>> {
            a.into_iter()
                .zip(b)
                .map(|(r, s)| r.into_iter().zip(s).map(|(x, y)| Estimate::new(x, y)).collect())
                .collect()
        };
        Some(Self {
            u: floats(v.get("u")?)?,
            mean: pair(table(v.get("mean")?)?, table(v.get("mean_se")?)?),
            variance: pair(table(v.get("variance")?)?, table(v.get("variance_se")?)?),
        })
    }
}

/// Functional estimates as stored in `summary.json`.
pub fn functionals_json(f: &BTreeMap<String, (Estimate, Option<f64>)>) -> Value {
    let mut m = Map::new();
    for (name, (e, iact)) in f {
        let mut row = Map::new();
        row.insert("value".into(), num(e.value));
        row.insert("std_error".into(), num(e.std_error));
        if let Some(t) = iact {
            row.insert("iact".into(), num(*t));
        }
        m.insert(name.clone(), Value::Object(row));
    }
    Value::Object(m)
}

/// Rebuilds the comparable estimates of a `summary.json`.
pub fn summary_from_json(path: &FsPath, v: &Value) -> Result<Summary> {
    let nodes = v
        .get("nodes")
        .and_then(NodeMoments::from_json)
        .ok_or_else(|| CliError::format(path, "missing or malformed `nodes` section"))?;
    let mut s = Summary { nodes: nodes.u.clone(), ..Default::default() };
    for (m, (means, vars)) in nodes.mean.iter().zip(&nodes.variance).enumerate() {
        for (k, (a, b)) in means.iter().zip(vars).enumerate() {
            s.functionals.insert(format!("mean[{m}][{k}]"), *a);
            s.functionals.insert(format!("var[{m}][{k}]"), *b);
        }
    }
    if let Some(Value::Object(f)) = v.get("functionals") {
        for (name, row) in f {
            let get = |k: &str| row.get(k).and_then(Value::as_f64).unwrap_or(f64::NAN);
            s.functionals.insert(name.clone(), Estimate::new(get("value"), get("std_error")));
        }
    }
    Ok(s)
}

/// `samples.csv`: one row per recorded path and node.
pub fn samples_csv(grid: &Grid, dim: usize, paths: &[Path]) -> String {
    let mut out = String::from("sample_index,u");
    for k in 1..=dim {
        let _ = write!(out, ",component_{k}");
    }
    out.push('\n');
    for (i, p) in paths.iter().enumerate() {
        for m in 0..grid.nodes() {
            let _ = write!(out, "{i},{}", fmt_g(grid.node(m)));
            for v in p.node(m) {
                let _ = write!(out, ",{}", fmt_g(*v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn weights_csv(log_weights: &[f64]) -> String {
    let mut out = String::from("sample_index,log_weight\n");
    for (i, w) in log_weights.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt_g(*w));
    }
    out
}

pub fn mean_path_csv(grid: &Grid, path: &Path) -> String {
    let mut out = String::from("u");
    for k in 1..=path.dim() {
        let _ = write!(out, ",component_{k}");
    }
    out.push('\n');
    for m in 0..grid.nodes() {
        out.push_str(&fmt_g(grid.node(m)));
        for v in path.node(m) {
            let _ = write!(out, ",{}", fmt_g(*v));
        }
        out.push('\n');
    }
    out
}

/// Reads the marginal of node `m`, component `k` from a run directory,
/// with log-weights when a `weights.csv` is present.
pub fn read_marginal(dir: &FsPath, m: usize, k: usize) -> Result<Marginal> {
    let path = dir.join("samples.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::format(&path, e.to_string()))?;
    let mut samples = Vec::new();
    let mut row_in_path = 0usize;
    let mut last_index = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::format(&path, e.to_string()))?;
        let index: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| CliError::format(&path, "bad sample_index"))?;
        if last_index != Some(index) {
            row_in_path = 0;
            last_index = Some(index);
        }
        if row_in_path == m {
            let v: f64 = rec
                .get(2 + k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::format(&path, format!("missing component {}", k + 1)))?;
            samples.push(v);
        }
        row_in_path += 1;
    }
    let wpath = dir.join("weights.csv");
    let log_weights = if wpath.exists() {
        let mut reader = csv::Reader::from_path(&wpath).map_err(|e| CliError::format(&wpath, e.to_string()))?;
        let mut w = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| CliError::format(&wpath, e.to_string()))?;
            w.push(rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| CliError::format(&wpath, "bad log_weight"))?);
        }
        if w.len() != samples.len() {
            return Err(CliError::format(&wpath, format!("{} weights for {} samples", w.len(), samples.len())));
        }
        Some(w)
    } else {
        None
    };
    Ok(Marginal { samples, log_weights })
}
