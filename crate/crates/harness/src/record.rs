//! Run records: canonical JSON documents (sorted keys, shortest round-trip
//! floats) so identical runs produce byte-identical files, plus the CSV
//! writer for sweep outputs.
//!
//! Records carry deterministic work counters instead of wall-clock timing;
//! wall-clock goes to stdout only, keeping the files reproducible.

use std::path::Path;

use purbench_core::{CoreError, Result};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const RECORD_VERSION: u32 = 1;

/// Canonical serialization: `serde_json`'s default object map is ordered,
/// so any `Value` built here serializes with sorted keys; floats print as
/// shortest round-trip decimals.
pub fn canonical_json(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values always serialize");
    s.push('\n');
    s
}

/// Hex SHA-256 of the canonical form, the content hash stored in records.
pub fn content_hash(value: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_json(value).as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Assembles a run record document. `work` holds deterministic counters
/// (model evaluations, chain steps, peak accounted bytes).
pub fn run_record(command: &str, config: Value, results: Value, aggregates: Value, work: Value) -> Value {
    serde_json::json!({
        "format_version": RECORD_VERSION,
        "command": command,
        "input_hash": content_hash(&config),
        "config": config,
        "results": results,
        "aggregates": aggregates,
        "work": work,
    })
}

pub fn write_run_record(record: &Value, path: &Path) -> Result<()> {
    std::fs::write(path, canonical_json(record))
        .map_err(|e| CoreError::Config(format!("cannot write record '{}': {e}", path.display())))
}

/// CSV with a mandatory header row, comma delimiter, `.` decimals, LF line
/// endings. Numbers are formatted with the shortest round-trip form.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "csv row arity");
        self.rows.push(cells);
    }

    pub fn cell_f64(v: f64) -> String {
        format!("{v}")
    }

    pub fn to_string(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())
            .map_err(|e| CoreError::Config(format!("cannot write csv '{}': {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_sorts_keys_and_is_stable() {
        let v1 = serde_json::json!({"zeta": 1, "alpha": {"b": 2.5, "a": [1.0, 0.1]}});
        let v2 = serde_json::json!({"alpha": {"a": [1.0, 0.1], "b": 2.5}, "zeta": 1});
        assert_eq!(canonical_json(&v1), canonical_json(&v2));
        let text = canonical_json(&v1);
        assert!(text.find("alpha").unwrap() < text.find("zeta").unwrap());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = serde_json::json!({"seed": 1, "eps": 0.08});
        let b = serde_json::json!({"seed": 2, "eps": 0.08});
        let c = serde_json::json!({"seed": 1, "eps": 0.09});
        assert_ne!(content_hash(&a), content_hash(&b));
        assert_ne!(content_hash(&a), content_hash(&c));
        assert_eq!(content_hash(&a), content_hash(&a));
    }

    #[test]
    fn csv_format_is_exact() {
        let mut t = CsvTable::new(&["t", "value"]);
        t.push_row(vec!["1".into(), CsvTable::cell_f64(0.25)]);
        t.push_row(vec!["2".into(), CsvTable::cell_f64(1.0 / 3.0)]);
        let s = t.to_string();
        assert_eq!(s, "t,value\n1,0.25\n2,0.3333333333333333\n");
    }
}
