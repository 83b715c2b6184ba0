//! CSV and JSON rendering with fixed float formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use covnoise::data::write_atomic;
use nalgebra::DMatrix;
use serde_json::{Map, Value};

use crate::error::CliResult;

pub const SCHEMA_VERSION: u32 = 1;

/// 17 significant digits, round-trippable.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // keep the sign of negative zero out of artifacts
        return "0.0000000000000000e0".into();
    }
    format!("{x:.16e}")
}

/// Files produced by a command, in write order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn push(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn write_all(&self, dir: &Path) -> CliResult<()> {
        for (name, bytes) in &self.files {
            write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}

/// Comma-separated table with a header row and LF line endings.
pub struct Csv {
    out: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { out: format!("{}\n", header.join(",")), width: header.len() }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        debug_assert_eq!(cells.len(), self.width);
        let parts: Vec<String> = cells.iter().map(Cell::render).collect();
        let _ = writeln!(self.out, "{}", parts.join(","));
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.out.into_bytes()
    }
}

pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Dense row-major matrix with `c0..c{n-1}` headers.
pub fn matrix_csv(m: &DMatrix<f64>) -> Vec<u8> {
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&refs);
    for i in 0..m.nrows() {
        let row: Vec<Cell> = (0..m.ncols()).map(|j| Cell::Float(m[(i, j)])).collect();
        csv.row(&row);
    }
    csv.into_bytes()
}

/// Scalar metrics that are either finite or null with a reason.
#[derive(Clone, Debug, Default)]
pub struct Metrics {
    values: BTreeMap<String, Value>,
    reasons: BTreeMap<String, String>,
}

impl Metrics {
    pub fn num(&mut self, key: &str, v: f64) {
        if v.is_finite() {
            self.values.insert(key.into(), float(v));
        } else {
            self.null(key, format!("non-finite value {v}"));
        }
    }

    pub fn maybe(&mut self, key: &str, v: Option<f64>, reason: impl Into<String>) {
        match v {
            Some(x) => self.num(key, x),
            None => self.null(key, reason),
        }
    }

    pub fn result<E: std::fmt::Display>(&mut self, key: &str, v: Result<f64, E>) {
        match v {
            Ok(x) => self.num(key, x),
            Err(e) => self.null(key, e.to_string()),
        }
    }

    pub fn int(&mut self, key: &str, v: u64) {
        self.values.insert(key.into(), Value::from(v));
    }

    pub fn flag(&mut self, key: &str, v: bool) {
        self.values.insert(key.into(), Value::Bool(v));
    }

    pub fn text(&mut self, key: &str, v: impl Into<String>) {
        self.values.insert(key.into(), Value::String(v.into()));
    }

    pub fn null(&mut self, key: &str, reason: impl Into<String>) {
        self.values.insert(key.into(), Value::Null);
        self.reasons.insert(key.into(), reason.into());
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).and_then(Value::as_f64)
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        self.values.get(key).and_then(Value::as_bool)
    }

    pub fn is_null(&self, key: &str) -> bool {
        matches!(self.values.get(key), Some(Value::Null))
    }
}

pub fn float(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Report skeleton shared by every command.
pub fn report(command: &str, config_hash: &str, seed: u64, metrics: &Metrics, extra: Map<String, Value>) -> Vec<u8> {
    let mut root = Map::new();
    root.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    root.insert("command".into(), Value::from(command));
    root.insert("tool_version".into(), Value::from(env!("CARGO_PKG_VERSION")));
    root.insert("config_hash".into(), Value::from(config_hash));
    root.insert("seed".into(), Value::from(seed));
    root.insert("metrics".into(), Value::Object(metrics.values.clone().into_iter().collect()));
    root.insert(
        "null_reasons".into(),
        Value::Object(metrics.reasons.iter().map(|(k, v)| (k.clone(), Value::from(v.as_str()))).collect()),
    );
    for (k, v) in extra {
        root.insert(k, v);
    }
    let mut out = String::new();
    render(&Value::Object(root), 0, &mut out);
    out.push('\n');
    out.into_bytes()
}

/// Pretty JSON with every float printed through [`fmt_f64`].
pub fn render(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fmt_f64(n.as_f64().expect("f64 number")));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                render(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push_str(": ");
                render(item, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_with_17_digits() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0, -0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let digits = s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).count();
            assert_eq!(digits, 17, "{s}");
        }
    }

    #[test]
    fn report_is_valid_json_with_null_reasons() {
        let mut m = Metrics::default();
        m.num("a", 0.25);
        m.num("b", f64::NAN);
        m.maybe("c", None, "not computed");
        m.int("n", 3);
        let bytes = report("test", "abc", 7, &m, Map::new());
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["metrics"]["a"], 0.25);
        assert!(v["metrics"]["b"].is_null());
        assert_eq!(v["null_reasons"]["c"], "not computed");
        assert!(v["null_reasons"]["b"].as_str().unwrap().contains("non-finite"));
    }

    #[test]
    fn csv_layout() {
        let mut c = Csv::new(&["i", "x"]);
        c.row(&[Cell::Int(0), Cell::Float(1.5)]);
        assert_eq!(String::from_utf8(c.into_bytes()).unwrap(), "i,x\n0,1.5000000000000000e0\n");
    }
}
