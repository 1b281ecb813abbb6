use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// JSON report of one command. Contains no timestamps so reruns are byte-identical.
#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub versions: Map<String, Value>,
    pub seed: u64,
    pub workers: usize,
    pub mesh_hash: Option<String>,
    pub outputs: Map<String, Value>,
    pub fitted: Map<String, Value>,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
}

impl Report {
    pub fn new(command: &str, config_hash: &str, seed: u64, workers: usize) -> Self {
        let mut versions = Map::new();
        versions.insert("pcal-cli".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("pcal-core".into(), pcal::VERSION.into());
        Report {
            command: command.into(),
            schema_version: crate::config::SCHEMA_VERSION,
            config_hash: config_hash.into(),
            versions,
            seed,
            workers,
            mesh_hash: None,
            outputs: Map::new(),
            fitted: Map::new(),
            checks: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn output(&mut self, key: &str, v: impl Serialize) -> Result<(), Failure> {
        self.outputs.insert(key.into(), to_value(v)?);
        Ok(())
    }

    pub fn fit(&mut self, key: &str, v: f64) {
        self.fitted.insert(key.into(), float(v));
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Writes `<stem>.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf, Failure> {
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::solver(format!("report serialization: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }
}

fn to_value(v: impl Serialize) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(|e| Failure::solver(format!("report serialization: {e}")))
}

/// JSON has no infinities or NaN; those become strings.
pub fn float(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or_else(|| Value::String(v.to_string()))
}

/// Plot-ready table written as plain CSV.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn write(&self, dir: &Path, name: &str, report: &mut Report) -> Result<(), Failure> {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        let path = dir.join(name);
        std::fs::write(&path, s).map_err(|e| Failure::io(&path, e))?;
        report.artifacts.push(name.into());
        Ok(())
    }
}

/// CSV cell for a float: shortest round-trip representation.
pub fn cell(v: f64) -> String {
    format!("{v}")
}
