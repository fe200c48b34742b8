//! Job event stream over `WS /api/events`.
//!
//! Client commands (JSON text):
//!
//! | command                                   | effect                              |
//! |-------------------------------------------|-------------------------------------|
//! | `{"type":"run","analysis_id":A}`          | start a job, reply `job_started`, subscribe |
//! | `{"type":"subscribe","job_id":J}`         | reply `snapshot`, then live events  |
//! | `{"type":"unsubscribe","job_id":J}`       | stop live events                    |
//! | `{"type":"cancel","job_id":J}`            | cancel the job                      |
//!
//! Server messages are JSON text envelopes `{type, job_id, seq, ...}`. An
//! envelope with `slab_bytes > 0` is immediately followed by one binary
//! message of that many bytes: float64 little-endian values.
//!
//! * `partial`: `partition, frame_start, frame_count, channels, kind, node,
//!   local, merged, partitions`. Per-frame slabs hold `frame_count x channels`
//!   values for frames starting at `frame_start`; reduced slabs hold one
//!   addend for the whole signal grid.
//! * `snapshot`: `status, kind, channels, shape, labels, filled` plus the
//!   merged grid so far. Sent on subscribe; later partials have larger `seq`.
//! * `completed`: `checksums` (per channel, see `grid_checksums`), `shape`,
//!   `stats`.
//! * `cancelled`, `failed` (`partition`, `message`), `error` (`message`, no
//!   `job_id`).
//!
//! When the last subscriber of a running job disconnects, the job is
//! cancelled after the configured grace period unless someone resubscribes.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use futures::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};
use virt4d_core::executor::{Event, JobId, JobStats, JobStatus};
use virt4d_core::kernels::{ResultGrid, ResultKind};

use crate::AppState;

/// One outgoing WebSocket message.
#[derive(Debug, Clone)]
pub enum Out {
    Text(String),
    Binary(Bytes),
}

impl From<Out> for Message {
    fn from(o: Out) -> Self {
        match o {
            Out::Text(t) => Message::Text(t.into()),
            Out::Binary(b) => Message::Binary(b),
        }
    }
}

fn slab(values: &[f64]) -> Bytes {
    let mut b = Vec::with_capacity(values.len() * 8);
    for v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    Bytes::from(b)
}

fn kind_str(k: ResultKind) -> &'static str {
    match k {
        ResultKind::PerFrame => "per_frame",
        ResultKind::Reduced => "reduced",
    }
}

fn stats_json(s: &JobStats) -> Value {
    json!({
        "partitions": s.partitions,
        "partials": s.partials,
        "local_tasks": s.local_tasks,
        "nonlocal_tasks": s.nonlocal_tasks,
        "nonlocal_fraction": s.nonlocal_fraction(),
        "bytes": s.bytes,
        "wall_ms": s.wall.as_secs_f64() * 1e3,
        "first_partial_ms": s.first_partial.map(|d| d.as_secs_f64() * 1e3),
    })
}

/// Server-side mirror of one job: the grid merged from its partials, and
/// its subscribers.
pub struct JobView {
    grid: ResultGrid,
    seq: u64,
    /// Seq of the last partial folded into `grid`.
    merged_seq: u64,
    status: JobStatus,
    checksums: Option<Vec<f64>>,
    terminal: Vec<Out>,
    subscribers: HashMap<u64, UnboundedSender<Out>>,
    orphan_epoch: u64,
}

impl JobView {
    pub(crate) fn new(grid: ResultGrid) -> Self {
        JobView {
            grid,
            seq: 0,
            merged_seq: 0,
            status: JobStatus::Running,
            checksums: None,
            terminal: Vec::new(),
            subscribers: HashMap::new(),
            orphan_epoch: 0,
        }
    }

    pub fn grid(&self) -> &ResultGrid {
        &self.grid
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn status(&self) -> JobStatus {
        self.status
    }

    pub fn checksums(&self) -> Option<&[f64]> {
        self.checksums.as_deref()
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.len()
    }

    fn broadcast(&mut self, msgs: &[Out]) {
        self.subscribers
            .retain(|_, tx| msgs.iter().all(|m| tx.send(m.clone()).is_ok()));
    }

    /// Engine sink: merges and forwards one event.
    pub(crate) fn apply(&mut self, event: Event) {
        self.seq = event.seq();
        let msgs = match event {
            Event::Partial {
                job_id,
                seq,
                partial,
                node,
                local,
                ..
            } => {
                // The engine already rejected duplicates; a failure here
                // would mean the mirror diverged, which the checksums expose.
                let _ = self.grid.merge_partial(&partial);
                self.merged_seq = seq;
                let env = json!({
                    "type": "partial",
                    "job_id": job_id,
                    "seq": seq,
                    "partition": partial.partition_index,
                    "frame_start": partial.frame_start,
                    "frame_count": partial.frame_count,
                    "channels": partial.channels,
                    "kind": kind_str(partial.kind),
                    "node": node,
                    "local": local,
                    "merged": self.grid.merged_count(),
                    "partitions": self.grid.partitions(),
                    "slab_bytes": partial.values.len() * 8,
                });
                vec![Out::Text(env.to_string()), Out::Binary(slab(&partial.values))]
            }
            Event::Completed {
                job_id,
                seq,
                grid,
                stats,
            } => {
                let checksums = grid.checksums();
                self.status = JobStatus::Done;
                self.checksums = Some(checksums.clone());
                let env = json!({
                    "type": "completed",
                    "job_id": job_id,
                    "seq": seq,
                    "checksums": checksums,
                    "labels": grid.labels(),
                    "kind": kind_str(grid.kind()),
                    "shape": grid.shape(),
                    "stats": stats_json(&stats),
                    "slab_bytes": 0,
                });
                vec![Out::Text(env.to_string())]
            }
            Event::Cancelled { job_id, seq, stats } => {
                self.status = JobStatus::Cancelled;
                let env = json!({
                    "type": "cancelled", "job_id": job_id, "seq": seq,
                    "stats": stats_json(&stats), "slab_bytes": 0,
                });
                vec![Out::Text(env.to_string())]
            }
            Event::Failed {
                job_id,
                seq,
                partition,
                message,
            } => {
                self.status = JobStatus::Failed;
                let env = json!({
                    "type": "failed", "job_id": job_id, "seq": seq,
                    "partition": partition, "message": message, "slab_bytes": 0,
                });
                vec![Out::Text(env.to_string())]
            }
        };
        self.broadcast(&msgs);
        if self.status.is_terminal() {
            self.terminal = msgs;
            self.subscribers.clear();
        }
    }

    fn snapshot(&self, job_id: JobId) -> Vec<Out> {
        let values = self.grid.values();
        let env = json!({
            "type": "snapshot",
            "job_id": job_id,
            "seq": self.merged_seq,
            "status": self.status,
            "kind": kind_str(self.grid.kind()),
            "channels": self.grid.channels(),
            "labels": self.grid.labels(),
            "shape": self.grid.shape(),
            "filled": self.grid.filled(),
            "merged": self.grid.merged_count(),
            "partitions": self.grid.partitions(),
            "slab_bytes": values.len() * 8,
        });
        vec![Out::Text(env.to_string()), Out::Binary(slab(values))]
    }

    /// Sends the snapshot (and the terminal message of a finished job), then
    /// registers `tx` for live events.
    fn subscribe(&mut self, job_id: JobId, client: u64, tx: &UnboundedSender<Out>) {
        for m in self.snapshot(job_id).into_iter().chain(self.terminal.iter().cloned()) {
            let _ = tx.send(m);
        }
        if !self.status.is_terminal() {
            self.subscribers.insert(client, tx.clone());
        }
    }

    fn unsubscribe(&mut self, client: u64) {
        self.subscribers.remove(&client);
    }

    /// Drops a disconnected subscriber; returns the orphan epoch if no
    /// subscriber is left on a live job. The client may already have been
    /// pruned by a failed broadcast, so only the outcome is checked.
    fn detach(&mut self, client: u64) -> Option<u64> {
        self.subscribers.remove(&client);
        if self.subscribers.is_empty() && !self.status.is_terminal() {
            self.orphan_epoch += 1;
            Some(self.orphan_epoch)
        } else {
            None
        }
    }

    fn still_orphaned(&self, epoch: u64) -> bool {
        self.orphan_epoch == epoch && self.subscribers.is_empty() && !self.status.is_terminal()
    }
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Command {
    Run { analysis_id: u64 },
    Subscribe { job_id: JobId },
    Unsubscribe { job_id: JobId },
    Cancel { job_id: JobId },
}

fn error(message: impl std::fmt::Display) -> Out {
    Out::Text(json!({ "type": "error", "message": message.to_string() }).to_string())
}

pub(crate) async fn handler(ws: WebSocketUpgrade, State(st): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, st))
}

struct Client {
    id: u64,
    tx: UnboundedSender<Out>,
    jobs: HashSet<JobId>,
}

impl Client {
    fn view(st: &AppState, job_id: JobId) -> Option<Arc<Mutex<JobView>>> {
        st.session().jobs.get(&job_id).map(|j| Arc::clone(&j.view))
    }

    fn subscribe(&mut self, st: &AppState, job_id: JobId) {
        match Self::view(st, job_id) {
            Some(view) => {
                view.lock().unwrap().subscribe(job_id, self.id, &self.tx);
                self.jobs.insert(job_id);
            }
            None => {
                let _ = self.tx.send(error(format!("job {job_id} not found")));
            }
        }
    }

    fn command(&mut self, st: &AppState, text: &str) {
        let cmd = match serde_json::from_str::<Command>(text) {
            Ok(c) => c,
            Err(e) => {
                let _ = self.tx.send(error(format!("invalid command: {e}")));
                return;
            }
        };
        match cmd {
            Command::Run { analysis_id } => match st.start_job(analysis_id) {
                Ok(mut started) => {
                    let job_id = started["job_id"].as_u64().expect("job id");
                    started["type"] = "job_started".into();
                    let _ = self.tx.send(Out::Text(started.to_string()));
                    self.subscribe(st, job_id);
                }
                Err(e) => {
                    let _ = self.tx.send(error(e.message));
                }
            },
            Command::Subscribe { job_id } => self.subscribe(st, job_id),
            Command::Unsubscribe { job_id } => {
                if let Some(view) = Self::view(st, job_id) {
                    view.lock().unwrap().unsubscribe(self.id);
                }
                self.jobs.remove(&job_id);
            }
            Command::Cancel { job_id } => {
                if let Err(e) = st.cancel_job(job_id) {
                    let _ = self.tx.send(error(e.message));
                }
            }
        }
    }

    /// Starts the grace timer for every job this client was the last
    /// subscriber of.
    fn disconnect(self, st: &AppState) {
        for job_id in self.jobs {
            let Some(view) = Self::view(st, job_id) else { continue };
            let Some(epoch) = view.lock().unwrap().detach(self.id) else { continue };
            let st = st.clone();
            let grace = st.config().grace;
            tokio::spawn(async move {
                tokio::time::sleep(grace).await;
                if view.lock().unwrap().still_orphaned(epoch) {
                    let _ = st.0.engine.cancel(job_id);
                }
            });
        }
    }
}

async fn client(socket: WebSocket, st: AppState) {
    let (tx, mut rx) = unbounded_channel::<Out>();
    let mut c = Client {
        id: st.client_id(),
        tx,
        jobs: HashSet::new(),
    };
    // Writes run on their own task so a client that stops reading cannot
    // keep its close frame (or a dropped connection) from being noticed.
    let (mut sink, mut stream) = socket.split();
    let mut writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            if sink.send(out.into()).await.is_err() {
                break;
            }
        }
    });
    loop {
        tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(t))) => c.command(&st, t.as_str()),
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            _ = &mut writer => break,
        }
    }
    writer.abort();
    c.disconnect(&st);
}

/// Client-side reconstruction of a job's grid from its message stream.
#[derive(Debug, Clone, Default)]
pub struct StreamAccumulator {
    pub values: Vec<f64>,
    pub channels: usize,
    pub kind: Option<ResultKind>,
    pub last_seq: u64,
    pub partitions_seen: Vec<usize>,
    pub checksums: Option<Vec<f64>>,
    pub terminal: Option<String>,
}

impl StreamAccumulator {
    /// Feeds one envelope and its slab (empty when `slab_bytes` is 0).
    /// Returns an error on out-of-order sequence numbers or malformed input.
    pub fn feed(&mut self, env: &Value, slab: &[u8]) -> Result<(), String> {
        let ty = env["type"].as_str().ok_or("envelope without type")?;
        if ty == "error" || ty == "job_started" {
            return Ok(());
        }
        let seq = env["seq"].as_u64().ok_or("envelope without seq")?;
        let expected = env["slab_bytes"].as_u64().unwrap_or(0) as usize;
        if slab.len() != expected || slab.len() % 8 != 0 {
            return Err(format!("slab of {} bytes, envelope says {expected}", slab.len()));
        }
        let vals: Vec<f64> = slab
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if ty == "snapshot" {
            self.values = vals;
            self.channels = env["channels"].as_u64().ok_or("snapshot without channels")? as usize;
            self.kind = Some(parse_kind(&env["kind"])?);
            self.last_seq = seq;
            self.partitions_seen = env["filled"]
                .as_array()
                .ok_or("snapshot without filled")?
                .iter()
                .enumerate()
                .filter(|(_, f)| f.as_bool() == Some(true))
                .map(|(i, _)| i)
                .collect();
            return Ok(());
        }
        if seq <= self.last_seq {
            return Err(format!("seq {seq} after {}", self.last_seq));
        }
        self.last_seq = seq;
        match ty {
            "partial" => {
                let kind = parse_kind(&env["kind"])?;
                self.partitions_seen
                    .push(env["partition"].as_u64().ok_or("partial without partition")? as usize);
                match kind {
                    ResultKind::PerFrame => {
                        let start = env["frame_start"].as_u64().ok_or("no frame_start")? as usize
                            * self.channels;
                        self.values
                            .get_mut(start..start + vals.len())
                            .ok_or("partial outside the grid")?
                            .copy_from_slice(&vals);
                    }
                    ResultKind::Reduced if !vals.is_empty() => {
                        for (a, b) in self.values.iter_mut().zip(&vals) {
                            *a += b;
                        }
                    }
                    ResultKind::Reduced => {}
                }
            }
            "completed" => {
                self.checksums = Some(
                    env["checksums"]
                        .as_array()
                        .ok_or("completion without checksums")?
                        .iter()
                        .map(|v| v.as_f64().unwrap_or(f64::NAN))
                        .collect(),
                );
                self.terminal = Some(ty.into());
            }
            "cancelled" | "failed" => self.terminal = Some(ty.into()),
            other => return Err(format!("unknown message type {other}")),
        }
        Ok(())
    }

    /// Per-channel checksums of the accumulated values.
    pub fn local_checksums(&self) -> Vec<f64> {
        virt4d_core::kernels::grid_checksums(
            &self.values,
            self.channels,
            self.kind.unwrap_or(ResultKind::PerFrame),
        )
    }
}

fn parse_kind(v: &Value) -> Result<ResultKind, String> {
    match v.as_str() {
        Some("per_frame") => Ok(ResultKind::PerFrame),
        Some("reduced") => Ok(ResultKind::Reduced),
        _ => Err(format!("bad kind {v}")),
    }
}
