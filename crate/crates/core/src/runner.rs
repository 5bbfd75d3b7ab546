//! Chunked evaluation of indexed cells with atomic checkpoints.
//!
//! Cells are processed in fixed-size chunks; each chunk runs on the configured
//! [`Parallelism`] and the completed prefix is written to the checkpoint file
//! after every chunk. A rerun with the same job key resumes from that prefix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::write_atomic;
use crate::modelclient::ClientError;
use crate::par::{self, Parallelism};

const CHECKPOINT_SCHEMA: &str = "lens-checkpoint/1";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub parallelism: Parallelism,
    pub checkpoint: Option<PathBuf>,
    pub chunk: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { parallelism: Parallelism::default(), checkpoint: None, chunk: 1024 }
    }
}

impl RunOptions {
    pub fn with_parallelism(mut self, parallelism: Parallelism) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cell {index} failed")]
    Cell { index: usize, completed: usize, source: ClientError },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
}

impl RunError {
    /// Number of leading cells persisted before the failure.
    pub fn completed(&self) -> usize {
        match self {
            RunError::Cell { completed, .. } => *completed,
            RunError::Checkpoint { .. } => 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    key: String,
    total: usize,
    values: Vec<f64>,
}

fn load_checkpoint(path: &Path, key: &str, total: usize) -> Result<Vec<f64>, RunError> {
    let err = |detail: String| RunError::Checkpoint { path: path.to_path_buf(), detail };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(err(e.to_string())),
    };
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if cp.schema != CHECKPOINT_SCHEMA || cp.key != key || cp.total != total || cp.values.len() > total {
        log::warn!("ignoring checkpoint {} written for a different job", path.display());
        return Ok(Vec::new());
    }
    Ok(cp.values)
}

fn save_checkpoint(path: &Path, key: &str, total: usize, values: &[f64]) -> Result<(), RunError> {
    let cp = Checkpoint { schema: CHECKPOINT_SCHEMA.into(), key: key.into(), total, values: values.to_vec() };
    let text = serde_json::to_string(&cp).map_err(|e| RunError::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_atomic(path, text.as_bytes())
        .map_err(|e| RunError::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })
}

/// Evaluates `f` on `0..total` and returns the values in index order.
///
/// `key` identifies the job; a checkpoint with another key is ignored. On
/// failure the lowest failing index is reported and every cell before it is
/// checkpointed. The result does not depend on parallelism or chunk size.
pub fn run_cells<F>(total: usize, key: &str, opts: &RunOptions, f: F) -> Result<Vec<f64>, RunError>
where
    F: Fn(usize) -> Result<f64, ClientError> + Sync + Send,
{
    let mut values = match &opts.checkpoint {
        Some(p) => load_checkpoint(p, key, total)?,
        None => Vec::new(),
    };
    if !values.is_empty() {
        log::info!("resuming at cell {} of {total}", values.len());
    }
    let chunk = opts.chunk.max(1);
    while values.len() < total {
        let start = values.len();
        let end = (start + chunk).min(total);
        let results = par::map_range(end - start, opts.parallelism, |k| f(start + k));
        let mut failure = None;
        for (k, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => values.push(v),
                Err(e) => {
                    failure = Some((start + k, e));
                    break;
                }
            }
        }
        if let Some(p) = &opts.checkpoint {
            save_checkpoint(p, key, total, &values)?;
        }
        if let Some((index, source)) = failure {
            return Err(RunError::Cell { index, completed: values.len(), source });
        }
    }
    if let Some(p) = &opts.checkpoint {
        if let Err(e) = std::fs::remove_file(p) {
            log::debug!("could not remove checkpoint {}: {e}", p.display());
        }
    }
    Ok(values)
}
