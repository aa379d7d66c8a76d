//! Annotation service for collecting human caption judgments.

pub mod service;
pub mod store;
pub mod tasks;

use std::net::SocketAddr;

use thiserror::Error;

pub use service::{router, serve, AppState, ServiceConfig};
pub use store::JudgmentStore;
pub use tasks::{import_task_files, import_tasks, task_id, AnnotationTask, TaskRecord, TaskStatus};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("judgment store: {0}")]
    Store(#[from] ssvc_core::metrics::MetricsError),
    #[error("task file line {line}: {reason}")]
    Tasks { line: usize, reason: String },
    #[error("{0}")]
    Json(String),
    #[error("{0}")]
    Manifest(String),
    #[error("annotator `{annotator_id}` already judged task `{task_id}`")]
    Duplicate {
        task_id: String,
        annotator_id: String,
    },
    #[error("address {0} is already in use; pick another with --bind")]
    AddrInUse(SocketAddr),
}
