//! Append-only JSON-lines metrics log. Each line is one [`LogRecord`]; the
//! timestamp is the only field that differs between identical runs.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{PersistError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epoch: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp_ms: Option<u128>,
}

impl LogRecord {
    pub fn new(command: &str, epoch: Option<usize>, metric: &str, value: f64, seed: u64, config_digest: &str) -> Self {
        Self {
            command: command.to_string(),
            epoch,
            metric: metric.to_string(),
            value,
            seed,
            config_digest: config_digest.to_string(),
            timestamp_ms: None,
        }
    }

    /// The record without its timestamp, for comparisons across runs.
    pub fn untimed(&self) -> Self {
        Self {
            timestamp_ms: None,
            ..self.clone()
        }
    }
}

/// Appends `records` to `path` (created if absent), stamping the current time.
pub fn append(path: &Path, records: &[LogRecord]) -> Result<()> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let mut text = String::new();
    for r in records {
        let stamped = LogRecord {
            timestamp_ms: Some(now),
            ..r.clone()
        };
        text += &serde_json::to_string(&stamped).map_err(|e| PersistError::Numeric(e.to_string()))?;
        text.push('\n');
    }
    let io = |e: std::io::Error| PersistError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

pub fn read(path: &Path) -> Result<Vec<LogRecord>> {
    let bytes = super::store::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| PersistError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| PersistError::Format {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
