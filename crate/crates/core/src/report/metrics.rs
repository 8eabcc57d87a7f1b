use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CignError, Result};
use crate::trainer::{EpochRecord, StepRecord};

/// One line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricRecord {
    RunStart {
        run: String,
        label: String,
        seed: u64,
        config: serde_json::Value,
    },
    Step {
        run: String,
        #[serde(flatten)]
        step: StepRecord,
    },
    Epoch {
        run: String,
        #[serde(flatten)]
        epoch: EpochRecord,
    },
    Diverged {
        run: String,
        iteration: u64,
        epoch: u64,
        detail: String,
    },
    RunEnd {
        run: String,
        label: String,
        seed: u64,
        test_accuracy: f64,
        iterations: u64,
        total_params: usize,
        per_sample_params: usize,
    },
    Evaluation {
        label: String,
        checkpoint: String,
        correct: usize,
        total: usize,
        accuracy: f64,
    },
}

/// Append-only JSON-lines writer; every record is flushed as it is written.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CignError::io(&path, e))?;
        Ok(MetricsWriter { path, file })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| CignError::io(&self.path, e))?;
        self.file.flush().map_err(|e| CignError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| CignError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CignError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CignError::Format {
            field: "metrics record",
            detail: format!("{}:{}: {e}", path.display(), i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Records of every `*.jsonl` file in `dir`, files taken in name order.
pub fn read_metrics_dir(dir: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CignError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_metrics(f)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let a = MetricRecord::RunEnd {
            run: "r1".into(),
            label: "mnist-thin".into(),
            seed: 1,
            test_accuracy: 0.9921,
            iterations: 48_000,
            total_params: 26_695,
            per_sample_params: 26_695,
        };
        let b = MetricRecord::Epoch {
            run: "r1".into(),
            epoch: EpochRecord {
                epoch: 0,
                iterations: 480,
                mean_loss: 0.1 + 0.2,
                train_accuracy: 0.97,
                test_accuracy: None,
            },
        };
        MetricsWriter::open(&p).unwrap().write(&a).unwrap();
        MetricsWriter::open(&p).unwrap().write(&b).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), vec![a, b]);
    }

    #[test]
    fn malformed_line_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"record\":\"nope\"}\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(CignError::Format { .. })));
    }
}
