//! Run-directory layout and append-only metrics persistence. One
//! directory holds the complete provenance of a result: config.resolved,
//! checkpoints/, metrics.jsonl, reports/.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use advlab_core::Result;

pub struct RunDir {
    pub root: PathBuf,
    pub run_id: String,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("reports"))?;
        let run_id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        Ok(RunDir { root: root.to_path_buf(), run_id })
    }

    pub fn write_resolved_config(&self, toml_text: &str) -> Result<()> {
        fs::write(self.root.join("config.resolved"), toml_text)?;
        Ok(())
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn append_metric(&self, tag: &str, metric: &str, value: f64) -> Result<()> {
        let record = MetricRecord {
            run_id: &self.run_id,
            tag,
            metric,
            value,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| advlab_core::Error::InvalidArgument(format!("metrics: {e}")))?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("metrics.jsonl"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// One JSON object per line, append-only.
#[derive(Serialize)]
pub struct MetricRecord<'a> {
    pub run_id: &'a str,
    pub tag: &'a str,
    pub metric: &'a str,
    pub value: f64,
    pub timestamp: u64,
}
