use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};

pub type JobId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Cancelled,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Cancelled | JobStatus::Failed)
    }

    /// pending -> running -> {done, cancelled, failed}. A job cancelled
    /// before it starts passes through running without launching tasks.
    pub fn can_transition(self, to: JobStatus) -> bool {
        use JobStatus::*;
        matches!(
            (self, to),
            (Pending, Running) | (Running, Done) | (Running, Cancelled) | (Running, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Pending => "pending",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Cancelled => "cancelled",
            JobStatus::Failed => "failed",
        }
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Status plus its full history, so illegal transitions are caught where
/// they happen rather than inferred later.
#[derive(Debug, Clone, PartialEq)]
pub struct StatusTrail {
    history: Vec<JobStatus>,
    pub created: SystemTime,
    pub started: Option<SystemTime>,
    pub finished: Option<SystemTime>,
}

impl Default for StatusTrail {
    fn default() -> Self {
        StatusTrail {
            history: vec![JobStatus::Pending],
            created: SystemTime::now(),
            started: None,
            finished: None,
        }
    }
}

impl StatusTrail {
    pub fn current(&self) -> JobStatus {
        *self.history.last().expect("trail starts at pending")
    }

    pub fn history(&self) -> &[JobStatus] {
        &self.history
    }

    /// Applies a transition; returns false (and changes nothing) when the
    /// edge is not allowed.
    pub fn advance(&mut self, to: JobStatus) -> bool {
        if !self.current().can_transition(to) {
            return false;
        }
        let now = SystemTime::now();
        if to == JobStatus::Running {
            self.started = Some(now);
        }
        if to.is_terminal() {
            self.finished = Some(now);
        }
        self.history.push(to);
        true
    }
}

/// Shared cancellation flag, checked by workers at tile boundaries.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Per-job counters reported with the outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobStats {
    pub partitions: usize,
    pub partials: usize,
    pub local_tasks: usize,
    pub nonlocal_tasks: usize,
    pub bytes: u64,
    pub wall: Duration,
    pub first_partial: Option<Duration>,
}

impl JobStats {
    pub fn nonlocal_fraction(&self) -> f64 {
        let n = self.local_tasks + self.nonlocal_tasks;
        if n == 0 {
            0.0
        } else {
            self.nonlocal_tasks as f64 / n as f64
        }
    }

    pub fn mib_per_s(&self) -> f64 {
        self.bytes as f64 / (1 << 20) as f64 / self.wall.as_secs_f64().max(1e-9)
    }
}
