//! Result files: `records.jsonl`, `summary.json` and plot-ready CSV tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use jhol_core::{Error, Result};
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Metadata repeated on every record.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub command: &'static str,
    pub version: &'static str,
    pub resolution: usize,
    pub epsilon: f64,
    pub mu_bound: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    #[serde(flatten)]
    meta: &'a Meta,
    kind: &'a str,
    index: usize,
    record: &'a T,
}

#[derive(Debug, Default)]
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

pub struct Output {
    pub meta: Meta,
    records: Vec<String>,
    tables: BTreeMap<String, Table>,
    files: BTreeMap<PathBuf, String>,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("cannot write {}: {e}", path.display()))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Numerical(format!("serialization: {e}")))
}

impl Output {
    pub fn new(meta: Meta) -> Self {
        Output { meta, records: Vec::new(), tables: BTreeMap::new(), files: BTreeMap::new() }
    }

    pub fn record<T: Serialize>(&mut self, kind: &str, record: &T) -> Result<()> {
        let index = self.records.len();
        let line = json(&Envelope { meta: &self.meta, kind, index, record })?;
        self.records.push(line);
        Ok(())
    }

    pub fn table(&mut self, name: &str, header: &[&str]) {
        self.tables.entry(name.to_string()).or_insert_with(|| Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        });
    }

    pub fn row(&mut self, name: &str, row: Vec<String>) {
        self.tables.get_mut(name).expect("table declared before use").rows.push(row);
    }

    /// An extra JSON document under the output directory.
    pub fn file<T: Serialize>(&mut self, relative: impl Into<PathBuf>, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(format!("serialization: {e}")))?;
        self.files.insert(relative.into(), text);
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Writes everything to `dir`, or the records to stdout without one.
    pub fn write(&self, dir: Option<&Path>, summary: &serde_json::Value) -> Result<()> {
        let summary_text =
            serde_json::to_string_pretty(summary).map_err(|e| Error::Numerical(format!("serialization: {e}")))?;
        let Some(dir) = dir else {
            let mut out = std::io::stdout().lock();
            for r in &self.records {
                writeln!(out, "{r}").map_err(|e| io_error(Path::new("stdout"), e))?;
            }
            writeln!(out, "{summary_text}").map_err(|e| io_error(Path::new("stdout"), e))?;
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let mut lines = self.records.join("\n");
        if !lines.is_empty() {
            lines.push('\n');
        }
        let path = dir.join("records.jsonl");
        std::fs::write(&path, lines).map_err(|e| io_error(&path, e))?;
        let path = dir.join("summary.json");
        std::fs::write(&path, summary_text + "\n").map_err(|e| io_error(&path, e))?;
        for (name, table) in &self.tables {
            let path = dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
            w.write_record(&table.header).map_err(|e| io_error(&path, e))?;
            for row in &table.rows {
                w.write_record(row).map_err(|e| io_error(&path, e))?;
            }
            w.flush().map_err(|e| io_error(&path, e))?;
        }
        for (rel, text) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
            }
            std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        }
        Ok(())
    }
}

/// Shortest round-trip form, so tables are as reproducible as the records.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        String::new()
    }
}
