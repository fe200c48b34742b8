use std::alloc::{self, Layout};
use std::fmt;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::ptr::NonNull;
use std::str::FromStr;

use memmap2::{Mmap, MmapOptions};
use serde::{Deserialize, Serialize};

use super::IoError;
use crate::dataset::{Dataset, Partition};

/// Alignment quantum for direct IO buffers, offsets and lengths.
pub const DIRECT_IO_ALIGN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadBackend {
    #[serde(rename = "mmap")]
    MemoryMapped,
    Buffered,
    Direct,
}

impl ReadBackend {
    pub const ALL: [ReadBackend; 3] = [
        ReadBackend::MemoryMapped,
        ReadBackend::Buffered,
        ReadBackend::Direct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReadBackend::MemoryMapped => "mmap",
            ReadBackend::Buffered => "buffered",
            ReadBackend::Direct => "direct",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ReadBackend::MemoryMapped => 0,
            ReadBackend::Buffered => 1,
            ReadBackend::Direct => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Default policy: direct IO when the dataset cannot stay in the page
    /// cache, mmap when the partition fits in available memory, buffered
    /// reads otherwise.
    pub fn auto(dataset: &Dataset, partition: &Partition) -> Self {
        let Some(mem) = MemInfo::read() else {
            return ReadBackend::MemoryMapped;
        };
        if dataset.descriptor.total_bytes() > mem.total {
            ReadBackend::Direct
        } else if partition.byte_length <= mem.available / 2 {
            ReadBackend::MemoryMapped
        } else {
            ReadBackend::Buffered
        }
    }
}

impl fmt::Display for ReadBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReadBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mmap" | "memory-mapped" => Ok(ReadBackend::MemoryMapped),
            "buffered" => Ok(ReadBackend::Buffered),
            "direct" => Ok(ReadBackend::Direct),
            other => Err(format!("unknown backend {other:?} (expected mmap, buffered or direct)")),
        }
    }
}

struct MemInfo {
    total: u64,
    available: u64,
}

impl MemInfo {
    fn read() -> Option<Self> {
        let text = std::fs::read_to_string("/proc/meminfo").ok()?;
        let field = |name: &str| -> Option<u64> {
            let line = text.lines().find(|l| l.starts_with(name))?;
            let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
            Some(kib * 1024)
        };
        Some(MemInfo {
            total: field("MemTotal:")?,
            available: field("MemAvailable:")?,
        })
    }
}

/// Open handle on one partition's byte range.
pub struct PartitionSource {
    partition_index: usize,
    path: PathBuf,
    byte_offset: u64,
    length: u64,
    kind: SourceKind,
}

enum SourceKind {
    Mapped { map: Mmap, start: usize },
    Buffered { file: File, offset: u64, buf: Vec<u8> },
    Direct { file: File, offset: u64, buf: AlignedBuf },
}

impl PartitionSource {
    pub fn open(
        dataset: &Dataset,
        partition: &Partition,
        backend: ReadBackend,
    ) -> Result<Self, IoError> {
        let path = dataset.partition_path(partition);
        let open_err = |source| IoError::Open {
            partition: partition.index,
            path: path.clone(),
            source,
        };
        let file = match backend {
            ReadBackend::Direct => open_direct(&path).map_err(|e| match e {
                DirectOpen::Unsupported(reason) => IoError::DirectUnsupported {
                    path: path.clone(),
                    reason,
                },
                DirectOpen::Io(e) => open_err(e),
            })?,
            _ => File::open(&path).map_err(open_err)?,
        };
        let file_len = file
            .metadata()
            .map_err(|source| IoError::Read {
                partition: partition.index,
                source,
            })?
            .len();
        if file_len < partition.byte_offset + partition.byte_length {
            return Err(IoError::Truncated {
                partition: partition.index,
                expected: partition.byte_offset + partition.byte_length,
                actual: file_len,
            });
        }
        let kind = match backend {
            ReadBackend::MemoryMapped => {
                let page = page_size() as u64;
                let map_offset = partition.byte_offset / page * page;
                let start = (partition.byte_offset - map_offset) as usize;
                let len = start + partition.byte_length as usize;
                // SAFETY: read-only mapping of a file this process never writes.
                let map = unsafe { MmapOptions::new().offset(map_offset).len(len).map(&file) }
                    .map_err(|source| IoError::Read {
                        partition: partition.index,
                        source,
                    })?;
                SourceKind::Mapped { map, start }
            }
            ReadBackend::Buffered => SourceKind::Buffered {
                file,
                offset: partition.byte_offset,
                buf: Vec::new(),
            },
            ReadBackend::Direct => SourceKind::Direct {
                file,
                offset: partition.byte_offset,
                buf: AlignedBuf::new(),
            },
        };
        Ok(PartitionSource {
            partition_index: partition.index,
            path,
            byte_offset: partition.byte_offset,
            length: partition.byte_length,
            kind,
        })
    }

    pub fn backend(&self) -> ReadBackend {
        match self.kind {
            SourceKind::Mapped { .. } => ReadBackend::MemoryMapped,
            SourceKind::Buffered { .. } => ReadBackend::Buffered,
            SourceKind::Direct { .. } => ReadBackend::Direct,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// Absolute file offset of partition-relative `offset`.
    pub fn file_offset(&self, offset: u64) -> u64 {
        self.byte_offset + offset
    }

    /// Bytes `[offset, offset + len)` of the partition. The mapped backend
    /// returns a view into the mapping; the others fill a reusable buffer.
    pub fn read(&mut self, offset: u64, len: usize) -> Result<&[u8], IoError> {
        let end = offset + len as u64;
        if end > self.length {
            return Err(IoError::Truncated {
                partition: self.partition_index,
                expected: end,
                actual: self.length,
            });
        }
        let partition = self.partition_index;
        let read_err = |source| IoError::Read { partition, source };
        match &mut self.kind {
            SourceKind::Mapped { map, start } => {
                let s = *start + offset as usize;
                Ok(&map[s..s + len])
            }
            SourceKind::Buffered { file, offset: base, buf } => {
                buf.resize(len, 0);
                file.read_exact_at(buf, *base + offset).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::UnexpectedEof {
                        IoError::Truncated {
                            partition,
                            expected: end,
                            actual: 0,
                        }
                    } else {
                        read_err(e)
                    }
                })?;
                Ok(&buf[..])
            }
            SourceKind::Direct { file, offset: base, buf } => {
                let abs = *base + offset;
                let align = DIRECT_IO_ALIGN as u64;
                let aligned_start = abs / align * align;
                let aligned_end = (abs + len as u64).div_ceil(align) * align;
                let span = (aligned_end - aligned_start) as usize;
                let data = buf.reserve(span);
                let mut filled = 0usize;
                while filled < span {
                    match file.read_at(&mut data[filled..], aligned_start + filled as u64) {
                        Ok(0) => break,
                        Ok(n) => filled += n,
                        Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                        Err(e) if e.raw_os_error() == Some(libc::EINVAL) => {
                            return Err(IoError::DirectUnsupported {
                                path: self.path.clone(),
                                reason: format!("read rejected: {e}"),
                            })
                        }
                        Err(e) => return Err(read_err(e)),
                    }
                }
                let skip = (abs - aligned_start) as usize;
                if filled < skip + len {
                    return Err(IoError::Truncated {
                        partition,
                        expected: end,
                        actual: offset + filled.saturating_sub(skip) as u64,
                    });
                }
                Ok(&data[skip..skip + len])
            }
        }
    }
}

fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 {
        p as usize
    } else {
        4096
    }
}

enum DirectOpen {
    Unsupported(String),
    Io(std::io::Error),
}

#[cfg(target_os = "linux")]
fn open_direct(path: &Path) -> Result<File, DirectOpen> {
    use std::os::unix::fs::OpenOptionsExt;
    std::fs::OpenOptions::new()
        .read(true)
        .custom_flags(libc::O_DIRECT)
        .open(path)
        .map_err(|e| {
            if e.raw_os_error() == Some(libc::EINVAL) {
                DirectOpen::Unsupported(format!("O_DIRECT rejected by filesystem: {e}"))
            } else {
                DirectOpen::Io(e)
            }
        })
}

#[cfg(not(target_os = "linux"))]
fn open_direct(_path: &Path) -> Result<File, DirectOpen> {
    Err(DirectOpen::Unsupported(
        "direct IO is only implemented on Linux".into(),
    ))
}

/// Heap buffer aligned to [`DIRECT_IO_ALIGN`], grown on demand.
struct AlignedBuf {
    ptr: NonNull<u8>,
    cap: usize,
}

// SAFETY: AlignedBuf uniquely owns its allocation.
unsafe impl Send for AlignedBuf {}

impl AlignedBuf {
    fn new() -> Self {
        AlignedBuf {
            ptr: NonNull::dangling(),
            cap: 0,
        }
    }

    fn reserve(&mut self, len: usize) -> &mut [u8] {
        if len > self.cap {
            self.release();
            let layout = Layout::from_size_align(len, DIRECT_IO_ALIGN).expect("buffer layout");
            // SAFETY: layout has non-zero size here.
            let raw = unsafe { alloc::alloc_zeroed(layout) };
            self.ptr = NonNull::new(raw).unwrap_or_else(|| alloc::handle_alloc_error(layout));
            self.cap = len;
        }
        // SAFETY: ptr is valid for cap >= len initialized bytes.
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), len) }
    }

    fn release(&mut self) {
        if self.cap > 0 {
            let layout = Layout::from_size_align(self.cap, DIRECT_IO_ALIGN).unwrap();
            // SAFETY: allocated with this exact layout in `reserve`.
            unsafe { alloc::dealloc(self.ptr.as_ptr(), layout) };
            self.cap = 0;
            self.ptr = NonNull::dangling();
        }
    }
}

impl Drop for AlignedBuf {
    fn drop(&mut self) {
        self.release();
    }
}
