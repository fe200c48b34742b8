//! Jobs, tasks, placement and the two execution backends.
//!
//! A job becomes one task per partition. Workers compute partition partials
//! independently; a single coordinator per job merges them into the result
//! grid and emits one ordered event stream. The in-process backend
//! ([`Engine`]) runs a thread per core; the multi-process backend
//! ([`Cluster`]) talks to worker processes over the [`wire`] protocol and
//! simulates one data directory per node.

mod bench;
mod cluster;
mod job;
mod local;
mod locality;
mod task;
pub mod wire;

use std::sync::Arc;

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::kernels::{KernelError, PartialResult, ResultGrid};

pub use bench::{run_benchmark, BenchConfig, BenchReport, BenchRow, CacheState};
pub use cluster::{
    replicate_to_nodes, worker_main, Cluster, ClusterConfig, NodeSpec, WorkerLaunch,
};
pub use job::{CancelToken, JobId, JobStats, JobStatus, StatusTrail};
pub use local::{default_workers, Engine, EngineConfig, JobInfo, LOCAL_NODE};
pub use locality::{assign, dispatch, Assignment, LocalityMap, NodeId, NodeSlots, WorkerPool};
pub use task::{plan_tasks, run_partition, Task, TaskError, TaskState};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("job {0} not found")]
    NotFound(JobId),
    #[error("job {0} already finished")]
    AlreadyFinished(JobId),
    #[error("scheduling error: {0}")]
    Scheduling(String),
    #[error("job {0} was cancelled")]
    Cancelled(JobId),
    #[error("job {job_id} failed{}: {message}", partition.map(|p| format!(" in partition {p}")).unwrap_or_default())]
    Failed {
        job_id: JobId,
        partition: Option<usize>,
        message: String,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("worker protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Job event stream. `seq` starts at 1 and increases by one per event; the
/// last event of every job is `Completed`, `Cancelled` or `Failed`.
#[derive(Debug, Clone)]
pub enum Event {
    Partial {
        job_id: JobId,
        seq: u64,
        partial: Arc<PartialResult>,
        node: NodeId,
        worker: usize,
        local: bool,
    },
    Completed {
        job_id: JobId,
        seq: u64,
        grid: Arc<ResultGrid>,
        stats: JobStats,
    },
    Cancelled {
        job_id: JobId,
        seq: u64,
        stats: JobStats,
    },
    Failed {
        job_id: JobId,
        seq: u64,
        partition: Option<usize>,
        message: String,
    },
}

impl Event {
    pub fn job_id(&self) -> JobId {
        match self {
            Event::Partial { job_id, .. }
            | Event::Completed { job_id, .. }
            | Event::Cancelled { job_id, .. }
            | Event::Failed { job_id, .. } => *job_id,
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            Event::Partial { seq, .. }
            | Event::Completed { seq, .. }
            | Event::Cancelled { seq, .. }
            | Event::Failed { seq, .. } => *seq,
        }
    }

    pub fn is_terminal(&self) -> bool {
        !matches!(self, Event::Partial { .. })
    }
}

/// Receives a job's events, in order, from its coordinator thread. Must not
/// block for long and must not call back into the engine for the same job.
pub type EventSink = Box<dyn FnMut(Event) + Send>;

/// Final state of a job. For cancelled or failed jobs `grid` holds
/// whatever was merged before the stop.
#[derive(Debug, Clone)]
pub struct JobOutcome {
    pub job_id: JobId,
    pub status: JobStatus,
    pub grid: Arc<ResultGrid>,
    pub stats: JobStats,
    pub error: Option<String>,
    pub failed_partition: Option<usize>,
    pub history: Vec<JobStatus>,
}

impl JobOutcome {
    /// The grid of a completed job, or the job's cancellation/failure.
    pub fn into_result(self) -> Result<Arc<ResultGrid>, ExecError> {
        match self.status {
            JobStatus::Done => Ok(self.grid),
            JobStatus::Cancelled => Err(ExecError::Cancelled(self.job_id)),
            _ => Err(ExecError::Failed {
                job_id: self.job_id,
                partition: self.failed_partition,
                message: self.error.unwrap_or_else(|| "unknown failure".into()),
            }),
        }
    }
}
