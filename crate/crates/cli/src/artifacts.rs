//! Output files. Every file carries the format version, config hash and
//! seed: JSON Lines as a leading `{"meta": ...}` object, CSV as a `#`
//! comment line, checkpoints in the JSON sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tclab_core::tokenspace::{ClassLabel, GridRecord, TokenGrid, Vocabulary};

use crate::error::{io_err, CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Meta {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::json!({ "meta": self })
    }
}

/// Fixed 17-significant-digit float formatting.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// A CSV table; cells are preformatted strings.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, meta: &Meta) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# format_version={} config_hash={} seed={}",
            meta.format_version, meta.config_hash, meta.seed
        );
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Column `name` of every row.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Parses a CSV written by [`Table::render`].
pub fn parse_csv(text: &str) -> CliResult<(Meta, Table)> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| CliError::Config("empty CSV".into()))?;
    let mut meta = Meta::new("", 0);
    for part in first.trim_start_matches('#').split_whitespace() {
        match part.split_once('=') {
            Some(("format_version", v)) => meta.format_version = v.parse().map_err(|_| CliError::Config("bad format_version".into()))?,
            Some(("config_hash", v)) => meta.config_hash = v.to_string(),
            Some(("seed", v)) => meta.seed = v.parse().map_err(|_| CliError::Config("bad seed".into()))?,
            _ => {}
        }
    }
    let header: Vec<&str> = lines.next().map(|l| l.split(',').collect()).unwrap_or_default();
    let mut table = Table::new(&header);
    for line in lines {
        table.rows.push(line.split(',').map(str::to_string).collect());
    }
    Ok((meta, table))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_csv(path: &Path, meta: &Meta, table: &Table) -> CliResult<()> {
    write_text(path, &table.render(meta))
}

/// Writes grids in JSON Lines after the meta line.
pub fn write_samples(path: &Path, meta: &Meta, samples: &[(TokenGrid, ClassLabel)]) -> CliResult<()> {
    let mut out = meta.json().to_string();
    out.push('\n');
    for (grid, class) in samples {
        out.push_str(&serde_json::to_string(&GridRecord::from_grid(grid, *class)).expect("record serializes"));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_jsonl(path: &Path, meta: &Meta, values: &[serde_json::Value]) -> CliResult<()> {
    let mut out = meta.json().to_string();
    out.push('\n');
    for v in values {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    write_text(path, &out)
}

/// Reads a samples file; meta lines are skipped.
pub fn read_samples(path: &Path, vocab: Vocabulary) -> CliResult<Vec<(TokenGrid, ClassLabel)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CliError::Core(tclab_core::Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))?;
        if value.get("meta").is_some() {
            continue;
        }
        let record: GridRecord = serde_json::from_value(value)
            .map_err(|e| CliError::Core(tclab_core::Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))?;
        out.push(record.to_grid(vocab)?);
    }
    Ok(out)
}

/// `dir/name`.
pub fn artifact(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
