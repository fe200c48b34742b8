//! Coordinator <-> worker protocol of the multi-process backend.
//!
//! Every message is a frame:
//!
//! ```text
//! u32 LE   length of the rest of the frame (type byte + body)
//! u8       message type
//! ...      body
//! ```
//!
//! Integers are little-endian; `str` is `u32 LE byte length` + UTF-8.
//!
//! | type | name     | direction | body |
//! |------|----------|-----------|------|
//! | 0x01 | Task     | c -> w    | `u64 job, u32 partition, u8 backend (0 mmap, 1 buffered, 2 direct, 0xFF auto), u64 tile_target_bytes, str sidecar_path, str source_dir, str analysis_json` |
//! | 0x02 | Partial  | w -> c    | `u64 job, u32 partition, u8 kind (0 per-frame, 1 reduced), u64 frame_start, u64 frame_count, u32 channels, u64 n, n x f64 LE` |
//! | 0x03 | Status   | w -> c    | `u64 job, u32 partition, u8 code (0 aborted, 1 failed), str message` |
//! | 0x04 | Cancel   | c -> w    | `u64 job` |
//! | 0x05 | Hello    | w -> c    | `str node_id, u32 slot, u32 pid` |
//! | 0x06 | Shutdown | c -> w    | empty |
//!
//! A worker answers each Task with exactly one Partial or Status.

use std::io::{self, Read, Write};

/// Frames above this size are rejected as corrupt.
pub const MAX_FRAME_BYTES: u32 = 1 << 30;

pub const AUTO_BACKEND: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMsg {
    pub job_id: u64,
    pub partition: u32,
    pub backend: u8,
    pub tile_target_bytes: u64,
    pub sidecar_path: String,
    pub source_dir: String,
    pub analysis_json: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialMsg {
    pub job_id: u64,
    pub partition: u32,
    pub kind: u8,
    pub frame_start: u64,
    pub frame_count: u64,
    pub channels: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusCode {
    Aborted = 0,
    Failed = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusMsg {
    pub job_id: u64,
    pub partition: u32,
    pub code: StatusCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Task(TaskMsg),
    Partial(PartialMsg),
    Status(StatusMsg),
    Cancel { job_id: u64 },
    Hello { node_id: String, slot: u32, pid: u32 },
    Shutdown,
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Task(_) => 0x01,
            Message::Partial(_) => 0x02,
            Message::Status(_) => 0x03,
            Message::Cancel { .. } => 0x04,
            Message::Hello { .. } => 0x05,
            Message::Shutdown => 0x06,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0, 0, 0, 0, self.type_byte()];
        match self {
            Message::Task(t) => {
                put_u64(&mut b, t.job_id);
                put_u32(&mut b, t.partition);
                b.push(t.backend);
                put_u64(&mut b, t.tile_target_bytes);
                put_str(&mut b, &t.sidecar_path);
                put_str(&mut b, &t.source_dir);
                put_str(&mut b, &t.analysis_json);
            }
            Message::Partial(p) => {
                put_u64(&mut b, p.job_id);
                put_u32(&mut b, p.partition);
                b.push(p.kind);
                put_u64(&mut b, p.frame_start);
                put_u64(&mut b, p.frame_count);
                put_u32(&mut b, p.channels);
                put_u64(&mut b, p.values.len() as u64);
                b.reserve(p.values.len() * 8);
                for v in &p.values {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Status(s) => {
                put_u64(&mut b, s.job_id);
                put_u32(&mut b, s.partition);
                b.push(s.code as u8);
                put_str(&mut b, &s.message);
            }
            Message::Cancel { job_id } => put_u64(&mut b, *job_id),
            Message::Hello { node_id, slot, pid } => {
                put_str(&mut b, node_id);
                put_u32(&mut b, *slot);
                put_u32(&mut b, *pid);
            }
            Message::Shutdown => {}
        }
        let len = (b.len() - 4) as u32;
        b[..4].copy_from_slice(&len.to_le_bytes());
        b
    }

    /// Decodes one frame body (type byte + fields, without the length).
    pub fn decode(frame: &[u8]) -> io::Result<Message> {
        let (&ty, body) = frame.split_first().ok_or_else(|| bad("empty frame"))?;
        let mut c = Cursor { buf: body };
        let msg = match ty {
            0x01 => Message::Task(TaskMsg {
                job_id: c.u64()?,
                partition: c.u32()?,
                backend: c.u8()?,
                tile_target_bytes: c.u64()?,
                sidecar_path: c.str()?,
                source_dir: c.str()?,
                analysis_json: c.str()?,
            }),
            0x02 => {
                let job_id = c.u64()?;
                let partition = c.u32()?;
                let kind = c.u8()?;
                let frame_start = c.u64()?;
                let frame_count = c.u64()?;
                let channels = c.u32()?;
                let n = c.u64()? as usize;
                let raw = c.take(n.checked_mul(8).ok_or_else(|| bad("slab too large"))?)?;
                let values = raw
                    .chunks_exact(8)
                    .map(|v| f64::from_le_bytes(v.try_into().unwrap()))
                    .collect();
                Message::Partial(PartialMsg {
                    job_id,
                    partition,
                    kind,
                    frame_start,
                    frame_count,
                    channels,
                    values,
                })
            }
            0x03 => Message::Status(StatusMsg {
                job_id: c.u64()?,
                partition: c.u32()?,
                code: match c.u8()? {
                    0 => StatusCode::Aborted,
                    1 => StatusCode::Failed,
                    other => return Err(bad(&format!("unknown status code {other}"))),
                },
                message: c.str()?,
            }),
            0x04 => Message::Cancel { job_id: c.u64()? },
            0x05 => Message::Hello {
                node_id: c.str()?,
                slot: c.u32()?,
                pid: c.u32()?,
            },
            0x06 => Message::Shutdown,
            other => return Err(bad(&format!("unknown message type 0x{other:02x}"))),
        };
        if !c.buf.is_empty() {
            return Err(bad(&format!("{} trailing bytes in message 0x{ty:02x}", c.buf.len())));
        }
        Ok(msg)
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

/// Reads one message; `Ok(None)` on a clean end of stream.
pub fn read_message(r: &mut impl Read) -> io::Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME_BYTES {
        return Err(bad(&format!("frame length {len} out of range")));
    }
    let mut frame = vec![0u8; len as usize];
    r.read_exact(&mut frame)?;
    Message::decode(&frame).map(Some)
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("message truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> io::Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }
}
