use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::metrics::Metrics;

/// One line of the training history log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        momentum: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        /// Global step count after this epoch.
        step: usize,
        train_loss: f64,
        val_loss: Option<f64>,
        #[serde(flatten)]
        val_metrics: Option<Metrics>,
    },
}

/// Append-only JSON-lines writer, flushed after every record.
pub struct HistoryWriter {
    path: PathBuf,
    file: File,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| TrainError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &HistoryRecord) -> Result<(), TrainError> {
        let mut line = serde_json::to_string(record).expect("record serialises");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| TrainError::io(&self.path, e))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>, TrainError> {
    let file = File::open(path).map_err(|e| TrainError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TrainError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| TrainError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_through_the_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let records = vec![
            HistoryRecord::Step {
                step: 0,
                epoch: 0,
                lr: 4e-4,
                momentum: 0.95,
                loss: 0.7,
            },
            HistoryRecord::Epoch {
                epoch: 0,
                step: 1,
                train_loss: 0.7,
                val_loss: Some(0.6),
                val_metrics: Some(Metrics {
                    jaccard: 0.5,
                    dsc: 2.0 / 3.0,
                    recall: 1.0,
                    precision: 0.5,
                    accuracy: 0.75,
                    f2: 5.0 / 6.0,
                }),
            },
            HistoryRecord::Epoch {
                epoch: 1,
                step: 2,
                train_loss: 0.5,
                val_loss: None,
                val_metrics: None,
            },
        ];
        let mut w = HistoryWriter::create(&path).unwrap();
        for r in &records {
            w.append(r).unwrap();
        }
        assert_eq!(read_history(&path).unwrap(), records);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.lines().nth(1).unwrap().contains("\"dsc\""));
    }
}
