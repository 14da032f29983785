//! JSON reports with a provenance block, their schema check, and CSV tables.

use std::collections::BTreeMap;
use std::path::Path;

use lpld_core::digest::{sha256, to_hex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{read_file, write_file, Error, Result};

pub const TOOL: &str = "lpld";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    /// Digest of the file at `path`, recorded under `label`.
    pub fn of(path: &Path, label: impl Into<String>) -> Result<Self> {
        Ok(FileDigest { path: label.into(), sha256: to_hex(&sha256(&read_file(path)?)) })
    }

    pub fn at(path: &Path) -> Result<Self> {
        Self::of(path, path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Provenance {
    pub fn new(command: &str) -> Self {
        Provenance { tool: TOOL.into(), version: VERSION.into(), command: command.into(), seeds: BTreeMap::new(), config_hash: None, inputs: vec![], outputs: vec![] }
    }

    pub fn seed(mut self, name: &str, v: u64) -> Self {
        self.seeds.insert(name.into(), v);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema: String,
    pub provenance: Provenance,
    pub result: T,
}

/// Known report kinds and the keys their `result` object must carry.
pub const SCHEMAS: &[(&str, &[&str])] = &[
    ("lpld.squeeze/1", &["teacher", "estimate", "storage"]),
    ("lpld.recover/1", &["mode", "ipc", "groups"]),
    ("lpld.relabel/1", &["records", "record_bytes", "storage"]),
    ("lpld.prune/1", &["granularity", "metric", "kept", "storage"]),
    ("lpld.validate/1", &["final_accuracy", "log", "storage"]),
    ("lpld.analyze/1", &["synthetic", "real", "mmd2", "bandwidth"]),
    ("lpld.bound/1", &["inputs", "bound"]),
    ("lpld.manifest/1", &["phases"]),
];

pub fn schema_name(kind: &str) -> String {
    format!("lpld.{kind}/1")
}

impl<T: Serialize> Report<T> {
    pub fn new(kind: &str, provenance: Provenance, result: T) -> Self {
        Report { schema: schema_name(kind), provenance, result }
    }

    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        validate_report(&v)?;
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }
}

fn schema_err(msg: impl Into<String>) -> Error {
    Error::format("report schema", msg)
}

fn is_hex_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn check_digests(v: &Value, field: &str) -> Result<()> {
    let list = v.get(field).and_then(Value::as_array).ok_or_else(|| schema_err(format!("provenance.{field} must be an array")))?;
    for (i, d) in list.iter().enumerate() {
        let path = d.get("path").and_then(Value::as_str);
        let sha = d.get("sha256").and_then(Value::as_str);
        match (path, sha) {
            (Some(_), Some(s)) if is_hex_digest(s) => {}
            _ => return Err(schema_err(format!("provenance.{field}[{i}] needs a path and a 64-digit hex sha256"))),
        }
    }
    Ok(())
}

/// Structural check of a report document.
pub fn validate_report(v: &Value) -> Result<()> {
    let schema = v.get("schema").and_then(Value::as_str).ok_or_else(|| schema_err("missing schema"))?;
    let required = SCHEMAS.iter().find(|(s, _)| *s == schema).map(|(_, r)| *r).ok_or_else(|| schema_err(format!("unknown schema {schema:?}")))?;
    let p = v.get("provenance").filter(|p| p.is_object()).ok_or_else(|| schema_err("missing provenance block"))?;
    for key in ["tool", "version", "command"] {
        if p.get(key).and_then(Value::as_str).is_none() {
            return Err(schema_err(format!("provenance.{key} must be a string")));
        }
    }
    let seeds = p.get("seeds").and_then(Value::as_object).ok_or_else(|| schema_err("provenance.seeds must be an object"))?;
    if seeds.values().any(|s| !s.is_u64()) {
        return Err(schema_err("seeds must be unsigned integers"));
    }
    match p.get("config_hash") {
        Some(Value::Null) => {}
        Some(Value::String(s)) if is_hex_digest(s) => {}
        _ => return Err(schema_err("provenance.config_hash must be null or a hex digest")),
    }
    check_digests(p, "inputs")?;
    check_digests(p, "outputs")?;
    let result = v.get("result").and_then(Value::as_object).ok_or_else(|| schema_err("result must be an object"))?;
    if let Some(k) = required.iter().find(|k| !result.contains_key(**k)) {
        return Err(schema_err(format!("{schema} result lacks {k:?}")));
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Value> {
    let v: Value = serde_json::from_slice(&read_file(path)?)?;
    validate_report(&v)?;
    Ok(v)
}

/// Writes a CSV table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Value {
        let mut p = Provenance::new("bound").seed("global", 3);
        p.inputs.push(FileDigest { path: "a".into(), sha256: "0".repeat(64) });
        serde_json::to_value(Report::new("bound", p, json!({"inputs": {}, "bound": {"n": 1}}))).unwrap()
    }

    #[test]
    fn valid_report_passes() {
        validate_report(&sample()).unwrap();
    }

    #[test]
    fn schema_violations_are_caught() {
        let mut v = sample();
        v["schema"] = json!("lpld.unknown/1");
        assert!(validate_report(&v).is_err());
        let mut v = sample();
        v["result"].as_object_mut().unwrap().remove("bound");
        assert!(validate_report(&v).is_err());
        let mut v = sample();
        v["provenance"]["inputs"][0]["sha256"] = json!("xyz");
        assert!(validate_report(&v).is_err());
        let mut v = sample();
        v["provenance"].as_object_mut().unwrap().remove("seeds");
        assert!(validate_report(&v).is_err());
        let mut v = sample();
        v["provenance"]["config_hash"] = json!(5);
        assert!(validate_report(&v).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let dir = std::env::temp_dir().join(format!("lpld-csv-{}", std::process::id()));
        let path = dir.join("t.csv");
        write_csv(&path, &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,\"x,y\"\n");
        std::fs::remove_dir_all(dir).unwrap();
    }
}
