//! Multi-process backend: simulated nodes, each with its own data directory
//! and one worker process per slot, driven over the [`wire`](super::wire)
//! protocol on loopback TCP.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom};
use std::net::{TcpListener, TcpStream};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::wire::{
    read_message, write_message, Message, PartialMsg, StatusCode, StatusMsg, TaskMsg, AUTO_BACKEND,
};
use super::{
    dispatch, run_partition, CancelToken, Event, EventSink, ExecError, JobId, JobOutcome,
    JobStats, JobStatus, LocalityMap, NodeId, StatusTrail, WorkerPool,
};
use crate::dataset::{write_sidecar, Dataset, DatasetError, SIDECAR_NAME};
use crate::io::{ReadBackend, TilingPlan};
use crate::kernels::{AnalysisSpec, CompiledAnalysis, PartialResult, ResultKind};

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub data_dir: PathBuf,
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkerLaunch {
    /// Spawn `<exe> worker --connect <addr> --node <id> --slot <n>`.
    Process(PathBuf),
    /// Run the worker loop on threads of this process (tests).
    Threads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeSpec>,
    pub launch: WorkerLaunch,
    pub backend: Option<ReadBackend>,
    pub tiling: TilingPlan,
    pub connect_timeout: Duration,
}

impl ClusterConfig {
    pub fn new(nodes: Vec<NodeSpec>, launch: WorkerLaunch) -> Self {
        ClusterConfig {
            nodes,
            launch,
            backend: None,
            tiling: TilingPlan::default(),
            connect_timeout: Duration::from_secs(30),
        }
    }
}

/// Copies every partition to the data directories of its holders and writes
/// the coordinator's sidecar (with `preferred_nodes`) to `coordinator_dir`.
/// Partition `i` is held by nodes `i, i+1, .., i+replication-1` (mod n).
pub fn replicate_to_nodes(
    dataset: &Dataset,
    nodes: &[NodeSpec],
    replication: usize,
    coordinator_dir: &Path,
) -> Result<Dataset, DatasetError> {
    if nodes.is_empty() || replication == 0 || replication > nodes.len() {
        return Err(DatasetError::Invalid(format!(
            "replication {replication} impossible with {} nodes",
            nodes.len()
        )));
    }
    let mut desc = dataset.descriptor.clone();
    for (i, part) in desc.partitions.iter_mut().enumerate() {
        let holders: Vec<&NodeSpec> = (0..replication).map(|j| &nodes[(i + j) % nodes.len()]).collect();
        let src_path = dataset.partition_path(part);
        let mut src = File::open(&src_path)
            .map_err(|e| DatasetError::io(format!("opening {}", src_path.display()), e))?;
        let mut bytes = vec![0u8; part.byte_length as usize];
        src.seek(SeekFrom::Start(part.byte_offset))
            .and_then(|_| src.read_exact(&mut bytes))
            .map_err(|e| DatasetError::io(format!("reading {}", src_path.display()), e))?;
        for node in &holders {
            let dst = node.data_dir.join(&part.file_path);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)
                    .map_err(|e| DatasetError::io(format!("creating {}", parent.display()), e))?;
            }
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(false)
                .open(&dst)
                .and_then(|f| f.write_all_at(&bytes, part.byte_offset))
                .map_err(|e| DatasetError::io(format!("writing {}", dst.display()), e))?;
        }
        part.preferred_nodes = holders.iter().map(|n| n.id.clone()).collect();
    }
    fs::create_dir_all(coordinator_dir)
        .map_err(|e| DatasetError::io(format!("creating {}", coordinator_dir.display()), e))?;
    let sidecar = coordinator_dir.join(SIDECAR_NAME);
    write_sidecar(&desc, &dataset.metadata, &sidecar)?;
    for node in nodes {
        write_sidecar(&desc, &dataset.metadata, &node.data_dir.join(SIDECAR_NAME))?;
    }
    Dataset::open(&sidecar)
}

struct Conn {
    node: NodeId,
    slot: u32,
    writer: BufWriter<TcpStream>,
    busy: Option<(JobId, usize)>,
    alive: bool,
    child: Option<Child>,
}

enum Inbound {
    Msg(usize, Message),
    Gone(usize),
}

/// Coordinator side of the multi-process backend. Runs one job at a time.
pub struct Cluster {
    config: ClusterConfig,
    conns: Vec<Conn>,
    inbox: Receiver<Inbound>,
    readers: Vec<JoinHandle<()>>,
    local_workers: Vec<JoinHandle<io::Result<()>>>,
    next_job: JobId,
}

impl Cluster {
    pub fn start(config: ClusterConfig) -> Result<Cluster, ExecError> {
        let total: usize = config.nodes.iter().map(|n| n.slots).sum();
        if total == 0 {
            return Err(ExecError::Scheduling("cluster has no worker slots".into()));
        }
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let mut children: HashMap<(NodeId, u32), Child> = HashMap::new();
        let mut local_workers = Vec::new();
        for node in &config.nodes {
            for slot in 0..node.slots as u32 {
                match &config.launch {
                    WorkerLaunch::Process(exe) => {
                        let child = Command::new(exe)
                            .args(["worker", "--connect", &addr, "--node", &node.id])
                            .args(["--slot", &slot.to_string()])
                            .stdin(Stdio::null())
                            .spawn()?;
                        children.insert((node.id.clone(), slot), child);
                    }
                    WorkerLaunch::Threads => {
                        let (addr, id) = (addr.clone(), node.id.clone());
                        local_workers.push(std::thread::spawn(move || worker_main(&addr, &id, slot)));
                    }
                }
            }
        }

        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + config.connect_timeout;
        let (tx, inbox) = channel();
        let mut conns = Vec::with_capacity(total);
        let mut readers = Vec::with_capacity(total);
        while conns.len() < total {
            let stream = match listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        for (_, mut c) in children {
                            let _ = c.kill();
                        }
                        return Err(ExecError::Protocol(format!(
                            "only {} of {total} workers connected",
                            conns.len()
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let (node, slot) = match read_message(&mut reader)? {
                Some(Message::Hello { node_id, slot, .. }) => (node_id, slot),
                other => return Err(ExecError::Protocol(format!("expected hello, got {other:?}"))),
            };
            let idx = conns.len();
            readers.push(spawn_reader(idx, reader, tx.clone()));
            conns.push(Conn {
                child: children.remove(&(node.clone(), slot)),
                node,
                slot,
                writer: BufWriter::new(stream),
                busy: None,
                alive: true,
            });
        }
        Ok(Cluster {
            config,
            conns,
            inbox,
            readers,
            local_workers,
            next_job: 1,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    /// Live nodes and their slot counts.
    pub fn pool(&self) -> WorkerPool {
        let mut slots: HashMap<&str, usize> = HashMap::new();
        for c in self.conns.iter().filter(|c| c.alive) {
            *slots.entry(&c.node).or_default() += 1;
        }
        let mut pool = WorkerPool::new(slots.into_iter().map(|(id, n)| (id.to_string(), n)));
        for c in self.conns.iter().filter(|c| c.alive && c.busy.is_some()) {
            pool.occupy(&c.node);
        }
        pool
    }

    /// Shuts a node's workers down; its data directory stays readable as a
    /// remote replica.
    pub fn remove_node(&mut self, id: &str) {
        for c in self.conns.iter_mut().filter(|c| c.node == id && c.alive) {
            let _ = write_message(&mut c.writer, &Message::Shutdown);
            c.alive = false;
            if let Some(mut child) = c.child.take() {
                let _ = child.wait();
            }
        }
    }

    fn data_dir(&self, node: &str) -> Option<&Path> {
        self.config
            .nodes
            .iter()
            .find(|n| n.id == node)
            .map(|n| n.data_dir.as_path())
    }

    /// Runs one job to a terminal state, emitting the same events as the
    /// in-process engine. Cancelling `cancel` stops dispatch and aborts
    /// running tasks at their next tile boundary.
    pub fn run_job(
        &mut self,
        dataset: &Dataset,
        spec: &AnalysisSpec,
        locality: &LocalityMap,
        mut sink: Option<EventSink>,
        cancel: &CancelToken,
    ) -> Result<JobOutcome, ExecError> {
        let analysis = spec.compile(&dataset.descriptor)?;
        let analysis_json = serde_json::to_string(spec).expect("spec serializes");
        let job_id = self.next_job;
        self.next_job += 1;
        let start = Instant::now();
        let desc = &dataset.descriptor;
        let mut grid = analysis.new_grid(desc);
        let mut trail = StatusTrail::default();
        let mut stats = JobStats {
            partitions: desc.partitions.len(),
            bytes: desc.total_bytes(),
            ..JobStats::default()
        };
        let mut failure: Option<(Option<usize>, String)> = None;
        let mut seq = 0u64;
        let mut pending: VecDeque<usize> = (0..desc.partitions.len()).collect();
        let mut placed: HashMap<usize, (usize, bool)> = HashMap::new();
        let sidecar = dataset
            .sidecar_path
            .canonicalize()
            .unwrap_or_else(|_| dataset.sidecar_path.clone());
        trail.advance(JobStatus::Running);
        let mut cancel_sent = false;

        loop {
            if cancel.is_cancelled() && trail.current() == JobStatus::Running {
                trail.advance(JobStatus::Cancelled);
            }
            if trail.current() != JobStatus::Running && !cancel_sent {
                pending.clear();
                self.broadcast_cancel(job_id);
                cancel_sent = true;
            }

            // dispatch whatever can be placed now, in partition order
            let mut pool = self.pool();
            let mut waiting = VecDeque::new();
            while let Some(p) = pending.pop_front() {
                let Some(a) = dispatch(p, locality, &pool).map_err(|e| {
                    ExecError::Scheduling(format!("partition {p}: {e}"))
                })?
                else {
                    waiting.push_back(p);
                    continue;
                };
                let source = if a.local {
                    self.data_dir(&a.node).map(Path::to_path_buf)
                } else {
                    locality
                        .holders(p)
                        .find_map(|h| self.data_dir(h))
                        .map(Path::to_path_buf)
                }
                .unwrap_or_else(|| dataset.root.clone());
                let ci = self
                    .conns
                    .iter()
                    .position(|c| c.alive && c.busy.is_none() && c.node == a.node)
                    .expect("pool reports a free slot");
                let msg = Message::Task(TaskMsg {
                    job_id,
                    partition: p as u32,
                    backend: self.config.backend.map_or(AUTO_BACKEND, ReadBackend::code),
                    tile_target_bytes: self.config.tiling.tile_target_bytes as u64,
                    sidecar_path: sidecar.to_string_lossy().into_owned(),
                    source_dir: source.to_string_lossy().into_owned(),
                    analysis_json: analysis_json.clone(),
                });
                let conn = &mut self.conns[ci];
                if write_message(&mut conn.writer, &msg).is_err() {
                    conn.alive = false;
                    waiting.push_back(p);
                    pool = self.pool();
                    continue;
                }
                conn.busy = Some((job_id, p));
                pool.occupy(&a.node);
                placed.insert(p, (ci, a.local));
            }
            pending = waiting;

            let in_flight = self.conns.iter().any(|c| c.busy.is_some_and(|(j, _)| j == job_id));
            if pending.is_empty() && !in_flight {
                break;
            }
            if !in_flight && self.conns.iter().all(|c| !c.alive) {
                if trail.advance(JobStatus::Failed) {
                    failure = Some((pending.front().copied(), "no live workers".into()));
                }
                continue;
            }

            let inbound = match self.inbox.recv_timeout(Duration::from_millis(20)) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => Inbound::Gone(usize::MAX),
            };
            match inbound {
                Inbound::Msg(ci, Message::Partial(pm)) => {
                    self.conns[ci].busy = None;
                    if pm.job_id != job_id || trail.current() != JobStatus::Running {
                        continue;
                    }
                    let index = pm.partition as usize;
                    let partial = PartialResult {
                        partition_index: index,
                        frame_start: pm.frame_start,
                        frame_count: pm.frame_count,
                        kind: ResultKind::from_code(pm.kind).unwrap_or(ResultKind::PerFrame),
                        channels: pm.channels as usize,
                        values: pm.values,
                    };
                    if let Err(e) = grid.merge_partial(&partial) {
                        trail.advance(JobStatus::Failed);
                        failure = Some((Some(index), e.to_string()));
                        continue;
                    }
                    let local = placed.get(&index).is_some_and(|&(_, l)| l);
                    if local {
                        stats.local_tasks += 1;
                    } else {
                        stats.nonlocal_tasks += 1;
                    }
                    stats.partials += 1;
                    stats.first_partial.get_or_insert_with(|| start.elapsed());
                    seq += 1;
                    if let Some(sink) = sink.as_mut() {
                        sink(Event::Partial {
                            job_id,
                            seq,
                            partial: Arc::new(partial),
                            node: self.conns[ci].node.clone(),
                            worker: ci,
                            local,
                        });
                    }
                }
                Inbound::Msg(ci, Message::Status(s)) => {
                    self.conns[ci].busy = None;
                    if s.job_id == job_id
                        && s.code == StatusCode::Failed
                        && trail.advance(JobStatus::Failed)
                    {
                        failure = Some((Some(s.partition as usize), s.message));
                    }
                }
                Inbound::Msg(_, _) => {}
                Inbound::Gone(ci) => {
                    if let Some(c) = self.conns.get_mut(ci) {
                        c.alive = false;
                        if let Some((j, p)) = c.busy.take() {
                            if j == job_id && trail.advance(JobStatus::Failed) {
                                failure = Some((Some(p), format!("worker on node {} lost", c.node)));
                            }
                        }
                    } else if trail.advance(JobStatus::Failed) {
                        failure = Some((None, "all worker connections closed".into()));
                    }
                }
            }
        }

        if trail.current() == JobStatus::Running {
            trail.advance(JobStatus::Done);
        }
        stats.wall = start.elapsed();
        let status = trail.current();
        let grid = Arc::new(grid);
        let (failed_partition, error) = match failure {
            Some((p, m)) => (p, Some(m)),
            None => (None, None),
        };
        seq += 1;
        if let Some(sink) = sink.as_mut() {
            sink(match status {
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
        }
        Ok(JobOutcome {
            job_id,
            status,
            grid,
            stats,
            error,
            failed_partition,
            history: trail.history().to_vec(),
        })
    }

    fn broadcast_cancel(&mut self, job_id: JobId) {
        for c in self.conns.iter_mut().filter(|c| c.alive) {
            if c.busy.is_some_and(|(j, _)| j == job_id) {
                let _ = write_message(&mut c.writer, &Message::Cancel { job_id });
            }
        }
    }

    /// Sends shutdown to every worker and waits for them.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for c in self.conns.iter_mut() {
            if c.alive {
                let _ = write_message(&mut c.writer, &Message::Shutdown);
                c.alive = false;
            }
            if let Some(mut child) = c.child.take() {
                let deadline = Instant::now() + Duration::from_secs(5);
                loop {
                    match child.try_wait() {
                        Ok(Some(_)) => break,
                        Ok(None) if Instant::now() < deadline => {
                            std::thread::sleep(Duration::from_millis(10))
                        }
                        _ => {
                            let _ = child.kill();
                            let _ = child.wait();
                            break;
                        }
                    }
                }
            }
        }
        for h in self.local_workers.drain(..) {
            let _ = h.join();
        }
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
    }

    /// `(node, slot)` of every connected worker.
    pub fn workers(&self) -> Vec<(NodeId, u32, bool)> {
        self.conns.iter().map(|c| (c.node.clone(), c.slot, c.alive)).collect()
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.stop();
    }
}

fn spawn_reader(idx: usize, mut reader: BufReader<TcpStream>, tx: Sender<Inbound>) -> JoinHandle<()> {
    std::thread::spawn(move || loop {
        match read_message(&mut reader) {
            Ok(Some(m)) => {
                if tx.send(Inbound::Msg(idx, m)).is_err() {
                    return;
                }
            }
            _ => {
                let _ = tx.send(Inbound::Gone(idx));
                return;
            }
        }
    })
}

/// Worker side: connects to the coordinator, announces itself and serves
/// tasks until shutdown. Cancel messages are handled while a task runs.
pub fn worker_main(addr: &str, node_id: &str, slot: u32) -> io::Result<()> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    write_message(
        &mut *writer.lock().unwrap(),
        &Message::Hello {
            node_id: node_id.to_string(),
            slot,
            pid: std::process::id(),
        },
    )?;
    let cancelled: Arc<Mutex<HashMap<JobId, CancelToken>>> = Arc::default();
    let (task_tx, task_rx) = channel::<TaskMsg>();
    let compute = {
        let writer = Arc::clone(&writer);
        let cancelled = Arc::clone(&cancelled);
        std::thread::spawn(move || compute_loop(task_rx, &writer, &cancelled))
    };
    let mut reader = BufReader::new(stream);
    let result = loop {
        match read_message(&mut reader) {
            Ok(Some(Message::Task(t))) => {
                if task_tx.send(t).is_err() {
                    break Ok(());
                }
            }
            Ok(Some(Message::Cancel { job_id })) => {
                cancelled.lock().unwrap().entry(job_id).or_default().cancel();
            }
            Ok(Some(Message::Shutdown)) | Ok(None) => break Ok(()),
            Ok(Some(other)) => {
                break Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("unexpected message {:#04x}", other.type_byte()),
                ))
            }
            Err(e) => break Err(e),
        }
    };
    drop(task_tx);
    let _ = compute.join();
    result
}

fn compute_loop(
    tasks: Receiver<TaskMsg>,
    writer: &Mutex<BufWriter<TcpStream>>,
    cancelled: &Mutex<HashMap<JobId, CancelToken>>,
) {
    let mut datasets: HashMap<(String, String), Arc<Dataset>> = HashMap::new();
    let mut compiled: Option<(u64, String, Arc<CompiledAnalysis>)> = None;
    let mut scratch = Vec::new();
    for t in tasks {
        let token = cancelled.lock().unwrap().entry(t.job_id).or_default().clone();
        let status = |code, message: String| {
            Message::Status(StatusMsg {
                job_id: t.job_id,
                partition: t.partition,
                code,
                message,
            })
        };
        let reply = match serve_task(&t, &mut datasets, &mut compiled, &mut scratch, &token) {
            Ok(Some(p)) => Message::Partial(PartialMsg {
                job_id: t.job_id,
                partition: t.partition,
                kind: p.kind.code(),
                frame_start: p.frame_start,
                frame_count: p.frame_count,
                channels: p.channels as u32,
                values: p.values,
            }),
            Ok(None) => status(StatusCode::Aborted, "cancelled".into()),
            Err(e) => status(StatusCode::Failed, e),
        };
        if write_message(&mut *writer.lock().unwrap(), &reply).is_err() {
            return;
        }
    }
}

fn serve_task(
    t: &TaskMsg,
    datasets: &mut HashMap<(String, String), Arc<Dataset>>,
    compiled: &mut Option<(u64, String, Arc<CompiledAnalysis>)>,
    scratch: &mut Vec<f32>,
    token: &CancelToken,
) -> Result<Option<PartialResult>, String> {
    if token.is_cancelled() {
        return Ok(None);
    }
    let key = (t.sidecar_path.clone(), t.source_dir.clone());
    let dataset = match datasets.get(&key) {
        Some(d) => Arc::clone(d),
        None => {
            let d = Dataset::open(&t.sidecar_path).map_err(|e| e.to_string())?;
            let d = Arc::new(d.with_root(&t.source_dir));
            datasets.insert(key, Arc::clone(&d));
            d
        }
    };
    let analysis = match compiled {
        Some((job, json, a)) if *job == t.job_id && *json == t.analysis_json => Arc::clone(a),
        _ => {
            let spec: AnalysisSpec =
                serde_json::from_str(&t.analysis_json).map_err(|e| format!("bad analysis: {e}"))?;
            let a = Arc::new(spec.compile(&dataset.descriptor).map_err(|e| e.to_string())?);
            *compiled = Some((t.job_id, t.analysis_json.clone(), Arc::clone(&a)));
            a
        }
    };
    let partition = dataset
        .descriptor
        .partitions
        .get(t.partition as usize)
        .ok_or_else(|| format!("no partition {}", t.partition))?;
    let backend = if t.backend == AUTO_BACKEND {
        None
    } else {
        Some(ReadBackend::from_code(t.backend).ok_or_else(|| format!("bad backend {}", t.backend))?)
    };
    let plan = TilingPlan::new(t.tile_target_bytes as usize);
    run_partition(&dataset, partition, &analysis, &plan, backend, scratch, token).map_err(|e| e.to_string())
}
