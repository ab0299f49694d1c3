//! JSON record of one CLI run.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::model_file::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved settings (flags, config file and defaults merged).
    pub settings: Value,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub status: String,
    pub outputs: Vec<String>,
    pub metrics_files: Vec<String>,
    pub final_metrics: Value,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, settings: Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            settings,
            seed,
            started_at: unix_now(),
            finished_at: None,
            status: "running".into(),
            outputs: Vec::new(),
            metrics_files: Vec::new(),
            final_metrics: Value::Null,
        }
    }

    pub fn finish(&mut self, status: &str) {
        self.finished_at = Some(unix_now());
        self.status = status.to_string();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut m = RunManifest::start("train", serde_json::json!({"hidden": 16}), Some(3));
        m.outputs.push("model.hdnn".into());
        m.final_metrics = serde_json::json!({"fer": 0.1});
        m.finish("ok");
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.finished_at.unwrap() >= back.started_at);
    }
}
