use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mcsa_dtr::{Error, Result};
use serde::Serialize;
use serde_json::Value;

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Metadata {
    pub software: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub created_unix: u64,
    pub config: Value,
}

#[derive(Debug, Serialize)]
pub struct Bundle {
    pub metadata: Metadata,
    pub results: Value,
}

impl Bundle {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize, results: &impl Serialize) -> Result<Self> {
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Self {
            metadata: Metadata {
                software: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: command.into(),
                seed,
                created_unix,
                config: serde_json::to_value(config)?,
            },
            results: serde_json::to_value(results)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Rows of string cells written as one CSV file.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Fixed-width rendering for the terminal.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            parts.join("  ")
        };
        let mut out = line(&self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn fixed(v: f64) -> String {
    format!("{v:.4}")
}

/// `psi{j}` for one stage, `psi{k}{j}` with 1-based `k` otherwise.
pub fn coef_name(n_stages: usize, stage: usize, j: usize) -> String {
    if n_stages == 1 {
        format!("psi{j}")
    } else {
        format!("psi{stage}{j}")
    }
}
