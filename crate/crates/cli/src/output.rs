//! In-memory artifacts and their serialization.

use std::path::Path;

use serde_json::Value;

use qmi_core::error::{Error, Result};

use crate::config::SCHEMA_VERSION;

/// Shortest round-trip decimal form; identical across runs.
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

/// CSV text with a leading `# schema_version=N` comment line.
pub fn csv_table<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv");
    format!("# schema_version={SCHEMA_VERSION}\n{body}")
}

/// JSON summary plus named CSV tables of one command.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub name: String,
    pub summary: Value,
    pub csvs: Vec<(String, String)>,
    /// Process exit code: 0 ok, 2 not certified or check failed, 3 solver error.
    pub code: i32,
}

impl Artifacts {
    pub fn new(name: &str) -> Self {
        Artifacts {
            name: name.into(),
            summary: Value::Null,
            csvs: Vec::new(),
            code: 0,
        }
    }

    pub fn add_csv(&mut self, file: &str, text: String) {
        self.csvs.push((file.into(), text));
    }

    pub fn json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("serializable summary");
        s.push('\n');
        s
    }

    pub fn csv(&self, file: &str) -> Option<&str> {
        self.csvs.iter().find(|(f, _)| f == file).map(|(_, t)| t.as_str())
    }

    /// Writes `<name>.json` and `<name>_<file>` for every table.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Config(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join(format!("{}.json", self.name)), self.json()).map_err(io)?;
        for (file, text) in &self.csvs {
            std::fs::write(dir.join(format!("{}_{file}", self.name)), text).map_err(io)?;
        }
        Ok(())
    }
}
