//! In-process backend: a fixed pool of worker threads shared by all jobs,
//! and one coordinator thread per job that owns the merge.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime};

use super::{
    run_partition, CancelToken, Event, EventSink, ExecError, JobId, JobOutcome, JobStats,
    JobStatus, StatusTrail,
};
use crate::dataset::Dataset;
use crate::io::{ReadBackend, TilingPlan};
use crate::kernels::{AnalysisSpec, CompiledAnalysis, PartialResult, ResultGrid};

pub const LOCAL_NODE: &str = "local";

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub workers: usize,
    /// `None` selects a backend per partition.
    pub backend: Option<ReadBackend>,
    pub tiling: TilingPlan,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: default_workers(false),
            backend: None,
            tiling: TilingPlan::default(),
        }
    }
}

/// One worker per physical core; logical cores only when asked for.
pub fn default_workers(hyperthreads: bool) -> usize {
    if hyperthreads {
        num_cpus::get()
    } else {
        num_cpus::get_physical()
    }
    .max(1)
}

/// Snapshot of a job's bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct JobInfo {
    pub job_id: JobId,
    pub status: JobStatus,
    pub history: Vec<JobStatus>,
    pub merged: usize,
    pub partitions: usize,
    pub created: SystemTime,
    pub started: Option<SystemTime>,
    pub finished: Option<SystemTime>,
}

struct JobState {
    trail: StatusTrail,
    grid: Option<ResultGrid>,
    seq: u64,
    sink: Option<EventSink>,
    stats: JobStats,
    failure: Option<(Option<usize>, String)>,
    outcome: Option<JobOutcome>,
}

struct JobShared {
    id: JobId,
    dataset: Arc<Dataset>,
    analysis: Arc<CompiledAnalysis>,
    token: CancelToken,
    state: Mutex<JobState>,
    finished: Condvar,
}

impl JobShared {
    fn emit(&self, state: &mut JobState, make: impl FnOnce(u64) -> Event) {
        state.seq += 1;
        let event = make(state.seq);
        if let Some(sink) = state.sink.as_mut() {
            sink(event);
        }
    }
}

struct WorkItem {
    job: Arc<JobShared>,
    partition: usize,
    reply: Sender<TaskReport>,
}

enum TaskReport {
    Done {
        partial: PartialResult,
        worker: usize,
    },
    Aborted,
    Failed {
        partition: usize,
        message: String,
    },
}

/// Job registry plus worker pool.
pub struct Engine {
    config: EngineConfig,
    queue: Mutex<Option<Sender<WorkItem>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    jobs: Mutex<HashMap<JobId, Arc<JobShared>>>,
    next_id: AtomicU64,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, ExecError> {
        if config.workers == 0 {
            return Err(ExecError::Scheduling("worker pool is empty".into()));
        }
        let (tx, rx) = channel::<WorkItem>();
        let rx = Arc::new(Mutex::new(rx));
        let threads = (0..config.workers)
            .map(|w| {
                let rx = Arc::clone(&rx);
                let cfg = config.clone();
                std::thread::Builder::new()
                    .name(format!("virt4d-worker-{w}"))
                    .spawn(move || worker_loop(w, &rx, &cfg))
                    .expect("spawning worker thread")
            })
            .collect();
        Ok(Engine {
            config,
            queue: Mutex::new(Some(tx)),
            threads: Mutex::new(threads),
            jobs: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Validates the spec against the dataset, registers a pending job and
    /// starts its coordinator. Events go to `sink` from a single thread.
    pub fn submit(
        &self,
        dataset: Arc<Dataset>,
        spec: &AnalysisSpec,
        sink: Option<EventSink>,
    ) -> Result<JobId, ExecError> {
        let analysis = Arc::new(spec.compile(&dataset.descriptor)?);
        self.submit_compiled(dataset, analysis, sink)
    }

    pub fn submit_compiled(
        &self,
        dataset: Arc<Dataset>,
        analysis: Arc<CompiledAnalysis>,
        sink: Option<EventSink>,
    ) -> Result<JobId, ExecError> {
        let queue = self
            .queue
            .lock()
            .unwrap()
            .clone()
            .ok_or_else(|| ExecError::Scheduling("engine is shut down".into()))?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let grid = analysis.new_grid(&dataset.descriptor);
        let job = Arc::new(JobShared {
            id,
            state: Mutex::new(JobState {
                trail: StatusTrail::default(),
                grid: Some(grid),
                seq: 0,
                sink,
                stats: JobStats {
                    partitions: dataset.descriptor.partitions.len(),
                    bytes: dataset.descriptor.total_bytes(),
                    ..JobStats::default()
                },
                failure: None,
                outcome: None,
            }),
            dataset,
            analysis,
            token: CancelToken::new(),
            finished: Condvar::new(),
        });
        self.jobs.lock().unwrap().insert(id, Arc::clone(&job));
        std::thread::Builder::new()
            .name(format!("virt4d-job-{id}"))
            .spawn(move || coordinate(job, queue))
            .map_err(ExecError::Io)?;
        Ok(id)
    }

    /// Stops a pending or running job. Once this returns, the job emits no
    /// further partials; its terminal `Cancelled` event follows after
    /// in-flight tasks reach a tile boundary.
    pub fn cancel(&self, id: JobId) -> Result<(), ExecError> {
        let job = self.job(id)?;
        let mut state = job.state.lock().unwrap();
        match state.trail.current() {
            JobStatus::Pending => {
                state.trail.advance(JobStatus::Running);
                state.trail.advance(JobStatus::Cancelled);
            }
            JobStatus::Running => {
                state.trail.advance(JobStatus::Cancelled);
            }
            _ => return Err(ExecError::AlreadyFinished(id)),
        }
        job.token.cancel();
        Ok(())
    }

    pub fn info(&self, id: JobId) -> Result<JobInfo, ExecError> {
        let job = self.job(id)?;
        let state = job.state.lock().unwrap();
        let merged = match (&state.grid, &state.outcome) {
            (Some(g), _) => g.merged_count(),
            (None, Some(o)) => o.grid.merged_count(),
            _ => 0,
        };
        Ok(JobInfo {
            job_id: id,
            status: state.trail.current(),
            history: state.trail.history().to_vec(),
            merged,
            partitions: state.stats.partitions,
            created: state.trail.created,
            started: state.trail.started,
            finished: state.trail.finished,
        })
    }

    /// Blocks until the job reaches a terminal state.
    pub fn wait(&self, id: JobId) -> Result<JobOutcome, ExecError> {
        let job = self.job(id)?;
        let mut state = job.state.lock().unwrap();
        loop {
            if let Some(o) = &state.outcome {
                return Ok(o.clone());
            }
            state = job.finished.wait(state).unwrap();
        }
    }

    /// Like [`Engine::wait`] but gives up after `timeout`, returning `None`.
    pub fn wait_timeout(&self, id: JobId, timeout: Duration) -> Result<Option<JobOutcome>, ExecError> {
        let job = self.job(id)?;
        let deadline = Instant::now() + timeout;
        let mut state = job.state.lock().unwrap();
        loop {
            if let Some(o) = &state.outcome {
                return Ok(Some(o.clone()));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            state = job.finished.wait_timeout(state, deadline - now).unwrap().0;
        }
    }

    /// Submit and wait.
    pub fn run(
        &self,
        dataset: Arc<Dataset>,
        spec: &AnalysisSpec,
        sink: Option<EventSink>,
    ) -> Result<JobOutcome, ExecError> {
        let id = self.submit(dataset, spec, sink)?;
        self.wait(id)
    }

    /// Drops a finished job from the registry.
    pub fn forget(&self, id: JobId) -> Result<(), ExecError> {
        let job = self.job(id)?;
        if !job.state.lock().unwrap().trail.current().is_terminal() {
            return Err(ExecError::Scheduling(format!("job {id} is still active")));
        }
        self.jobs.lock().unwrap().remove(&id);
        Ok(())
    }

    fn job(&self, id: JobId) -> Result<Arc<JobShared>, ExecError> {
        self.jobs
            .lock()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or(ExecError::NotFound(id))
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.queue.lock().unwrap().take();
        for t in self.threads.lock().unwrap().drain(..) {
            let _ = t.join();
        }
    }
}

fn worker_loop(worker: usize, queue: &Mutex<Receiver<WorkItem>>, config: &EngineConfig) {
    let mut scratch = Vec::new();
    loop {
        let item = match queue.lock().unwrap().recv() {
            Ok(item) => item,
            Err(_) => return,
        };
        let job = &item.job;
        let report = if job.token.is_cancelled() {
            TaskReport::Aborted
        } else {
            let partition = &job.dataset.descriptor.partitions[item.partition];
            let result = catch_unwind(AssertUnwindSafe(|| {
                run_partition(
                    &job.dataset,
                    partition,
                    &job.analysis,
                    &config.tiling,
                    config.backend,
                    &mut scratch,
                    &job.token,
                )
            }));
            match result {
                Ok(Ok(Some(partial))) => TaskReport::Done { partial, worker },
                Ok(Ok(None)) => TaskReport::Aborted,
                Ok(Err(e)) => TaskReport::Failed {
                    partition: item.partition,
                    message: e.to_string(),
                },
                Err(_) => TaskReport::Failed {
                    partition: item.partition,
                    message: "worker panicked".into(),
                },
            }
        };
        let _ = item.reply.send(report);
    }
}

fn coordinate(job: Arc<JobShared>, queue: Sender<WorkItem>) {
    let start = Instant::now();
    {
        let mut state = job.state.lock().unwrap();
        if state.trail.current() == JobStatus::Pending {
            state.trail.advance(JobStatus::Running);
        }
    }
    let partitions = job.dataset.descriptor.partitions.len();
    let (tx, rx) = channel();
    let mut outstanding = 0;
    if !job.token.is_cancelled() {
        for partition in 0..partitions {
            let item = WorkItem {
                job: Arc::clone(&job),
                partition,
                reply: tx.clone(),
            };
            if queue.send(item).is_err() {
                break;
            }
            outstanding += 1;
        }
    }
    drop(tx);
    drop(queue);

    while outstanding > 0 {
        let Ok(report) = rx.recv() else {
            fail(&job, None, "worker lost".into());
            break;
        };
        outstanding -= 1;
        match report {
            TaskReport::Done { partial, worker } => merge(&job, partial, worker, start),
            TaskReport::Aborted => {}
            TaskReport::Failed { partition, message } => fail(&job, Some(partition), message),
        }
    }
    finish(&job, start);
}

fn merge(job: &JobShared, partial: PartialResult, worker: usize, start: Instant) {
    let mut state = job.state.lock().unwrap();
    if state.trail.current() != JobStatus::Running {
        return;
    }
    let merged = state.grid.as_mut().expect("grid present while running").merge_partial(&partial);
    if let Err(e) = merged {
        let index = partial.partition_index;
        drop(state);
        fail(job, Some(index), e.to_string());
        return;
    }
    state.stats.partials += 1;
    state.stats.local_tasks += 1;
    state.stats.first_partial.get_or_insert_with(|| start.elapsed());
    let job_id = job.id;
    job.emit(&mut state, |seq| Event::Partial {
        job_id,
        seq,
        partial: Arc::new(partial),
        node: LOCAL_NODE.to_string(),
        worker,
        local: true,
    });
}

fn fail(job: &JobShared, partition: Option<usize>, message: String) {
    let mut state = job.state.lock().unwrap();
    if state.trail.advance(JobStatus::Failed) {
        state.failure = Some((partition, message));
        job.token.cancel();
    }
}

fn finish(job: &JobShared, start: Instant) {
    let mut state = job.state.lock().unwrap();
    if state.trail.current() == JobStatus::Running {
        state.trail.advance(JobStatus::Done);
    }
    state.stats.wall = start.elapsed();
    let grid = Arc::new(state.grid.take().expect("finished once"));
    let status = state.trail.current();
    let (failed_partition, error) = match state.failure.clone() {
        Some((p, m)) => (p, Some(m)),
        None => (None, None),
    };
    let stats = state.stats.clone();
    let job_id = job.id;
    job.emit(&mut state, |seq| match status {
        JobStatus::Done => Event::Completed {
            job_id,
            seq,
            grid: Arc::clone(&grid),
            stats: stats.clone(),
        },
        JobStatus::Cancelled => Event::Cancelled {
            job_id,
            seq,
            stats: stats.clone(),
        },
        _ => Event::Failed {
            job_id,
            seq,
            partition: failed_partition,
            message: error.clone().unwrap_or_default(),
        },
    });
    state.sink = None;
    state.outcome = Some(JobOutcome {
        job_id,
        status,
        grid,
        stats,
        error,
        failed_partition,
        history: state.trail.history().to_vec(),
    });
    job.finished.notify_all();
}
