//! Result bundles written by the command-line entry points.
//!
//! A bundle is reproducible byte-for-byte from identical inputs: no wall
//! clock or environment data is serialised.  CSV tables carry a header
//! row, `.` decimals and `\n` line endings in a documented column order,
//! so golden-file comparisons are exact.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct ResultBundle {
    pub command: String,
    pub scenario_name: String,
    /// FNV-1a hash of the canonical scenario serialisation.
    pub scenario_hash: String,
    pub seed: Option<u64>,
    pub passed: bool,
    /// Human-readable lines, also written to `summary.txt`.
    pub summary: Vec<String>,
    /// Named CSV blobs, written under `tables/`.
    #[serde(skip)]
    pub tables: Vec<(String, String)>,
    /// Command-specific structured report.
    pub details: serde_json::Value,
}

impl ResultBundle {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }

    /// Writes `tables/*.csv`, `report.json` and `summary.txt` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("tables"))?;
        for (name, content) in &self.tables {
            fs::write(dir.join("tables").join(format!("{name}.csv")), content)?;
        }
        let json = serde_json::to_string_pretty(self).expect("serialisable bundle");
        fs::write(dir.join("report.json"), json + "\n")?;
        let mut summary = String::new();
        summary.push_str(&format!(
            "command: {}\nscenario: {} ({})\nstatus: {}\n",
            self.command,
            self.scenario_name,
            self.scenario_hash,
            if self.passed { "pass" } else { "FAIL" }
        ));
        for line in &self.summary {
            summary.push_str(line);
            summary.push('\n');
        }
        fs::write(dir.join("summary.txt"), summary)?;
        Ok(())
    }
}

/// Builds a CSV blob from a header and row formatter; values use Rust's
/// shortest round-trip float formatting.
pub struct CsvTable {
    content: String,
    columns: usize,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            content: header.join(",") + "\n",
            columns: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.columns);
        self.content.push_str(&cells.join(","));
        self.content.push('\n');
    }

    pub fn finish(self) -> String {
        self.content
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".into()
    }
}
