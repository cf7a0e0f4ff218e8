//! CSV output: a `# config: <json>` line, a header row, LF line endings.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, config: &impl Serialize) -> Result<String> {
        let echo = serde_json::to_string(config)?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let body = String::from_utf8(w.into_inner().context("flushing csv")?)?;
        Ok(format!("# config: {echo}\n{body}"))
    }

    pub fn write(&self, path: &Path, config: &impl Serialize) -> Result<()> {
        std::fs::write(path, self.render(config)?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Shortest round-trip formatting; missing values are empty cells.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Reads a table written by [`CsvTable::write`], skipping the echo line.
pub fn read_table(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| Ok(rec?.iter().map(String::from).collect())).collect::<Result<_>>()?;
    Ok((header, rows))
}
