//! Dataset model: shapes, element types and the partition table.
//!
//! A dataset on disk is a directory holding headerless raw partition files
//! plus one sidecar text file describing them (see [`sidecar`]). Partition
//! paths are stored relative to the sidecar's directory so a dataset can be
//! moved or copied as a unit.

mod ingest;
mod plan;
pub mod sidecar;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{
    generate_synthetic, ingest, write_dataset_with, write_raw_dataset, SourceLayout, SIDECAR_NAME,
};
pub use plan::{
    partition_bytes_for_budget, plan_partitions, plan_partitions_in_file, DEFAULT_PARTITION_BYTES,
    DEFAULT_TIME_BUDGET,
};
pub use sidecar::{parse_sidecar, write_sidecar, SidecarMetadata};

/// Current sidecar format version. Parsing rejects any other value.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("target below frame size: target {target} B < frame {frame} B")]
    TargetBelowFrameSize { target: u64, frame: u64 },
    #[error("size mismatch: source has {actual} bytes, expected {expected} bytes")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("invalid descriptor: {0}")]
    Invalid(String),
    #[error("parse error at line {line} ({field}): {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        DatasetError::Io {
            context: context.into(),
            source,
        }
    }

    fn invalid(msg: impl Into<String>) -> Self {
        DatasetError::Invalid(msg.into())
    }
}

/// Element encoding of the raw payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "float32_le")]
    Float32Le,
    #[serde(rename = "uint16_le")]
    Uint16Le,
    /// Two 12-bit pixels packed into three bytes.
    #[serde(rename = "uint12_packed_le")]
    Uint12PackedLe,
    /// Only valid for exported results (`role: result`).
    #[serde(rename = "float64_le")]
    Float64Le,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::Float32Le => "float32_le",
            Dtype::Uint16Le => "uint16_le",
            Dtype::Uint12PackedLe => "uint12_packed_le",
            Dtype::Float64Le => "float64_le",
        }
    }

    /// Encoded size of `pixels` elements, or `None` when a packed type
    /// cannot hold an odd pixel count.
    pub fn encoded_len(self, pixels: u64) -> Option<u64> {
        match self {
            Dtype::Float32Le => Some(pixels * 4),
            Dtype::Uint16Le => Some(pixels * 2),
            Dtype::Uint12PackedLe => (pixels % 2 == 0).then(|| pixels / 2 * 3),
            Dtype::Float64Le => Some(pixels * 8),
        }
    }

    /// Byte quantum that every range boundary must respect.
    pub fn byte_quantum(self) -> u64 {
        match self {
            Dtype::Float32Le => 4,
            Dtype::Uint16Le => 2,
            Dtype::Uint12PackedLe => 3,
            Dtype::Float64Le => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "float32_le" => Ok(Dtype::Float32Le),
            "uint16_le" => Ok(Dtype::Uint16Le),
            "uint12_packed_le" => Ok(Dtype::Uint12PackedLe),
            "float64_le" => Ok(Dtype::Float64Le),
            other => Err(format!("unknown dtype {other:?}")),
        }
    }
}

/// What a sidecar describes: raw detector data or an exported result grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    #[default]
    Dataset,
    Result,
}

impl DatasetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRole::Dataset => "dataset",
            DatasetRole::Result => "result",
        }
    }
}

/// Frame-aligned unit of work and of locality assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub index: usize,
    pub frame_start: u64,
    pub frame_count: u64,
    /// Relative to the sidecar directory.
    pub file_path: PathBuf,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub preferred_nodes: Vec<String>,
}

impl Partition {
    pub fn frame_end(&self) -> u64 {
        self.frame_start + self.frame_count
    }

    pub fn contains_frame(&self, frame: u64) -> bool {
        (self.frame_start..self.frame_end()).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub format_version: u32,
    pub role: DatasetRole,
    pub dtype: Dtype,
    pub scan_shape: Vec<usize>,
    pub sig_shape: Vec<usize>,
    pub partitions: Vec<Partition>,
}

impl DatasetDescriptor {
    /// A descriptor with an empty partition table, ready for
    /// [`plan_partitions`].
    pub fn new(dtype: Dtype, scan_shape: Vec<usize>, sig_shape: Vec<usize>) -> Self {
        DatasetDescriptor {
            format_version: FORMAT_VERSION,
            role: DatasetRole::Dataset,
            dtype,
            scan_shape,
            sig_shape,
            partitions: Vec::new(),
        }
    }

    pub fn total_frames(&self) -> u64 {
        self.scan_shape.iter().map(|&d| d as u64).product()
    }

    pub fn sig_pixels(&self) -> usize {
        self.sig_shape.iter().product()
    }

    /// Detector rows; a one-dimensional signal counts as a single row.
    pub fn sig_rows(&self) -> usize {
        if self.sig_shape.len() >= 2 {
            self.sig_shape[0]
        } else {
            1
        }
    }

    pub fn row_pixels(&self) -> usize {
        self.sig_pixels() / self.sig_rows().max(1)
    }

    /// Panics if the dtype cannot encode one frame; call [`validate`] first
    /// on untrusted descriptors.
    ///
    /// [`validate`]: DatasetDescriptor::validate
    pub fn bytes_per_frame(&self) -> u64 {
        self.dtype
            .encoded_len(self.sig_pixels() as u64)
            .expect("uint12 frame with odd pixel count")
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_frames() * self.bytes_per_frame()
    }

    pub fn partition_for_frame(&self, frame: u64) -> Option<&Partition> {
        let idx = self
            .partitions
            .partition_point(|p| p.frame_end() <= frame);
        self.partitions.get(idx).filter(|p| p.contains_frame(frame))
    }

    /// Checks shape, alignment and coverage invariants. The error names the
    /// violated invariant.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.format_version != FORMAT_VERSION {
            return Err(DatasetError::UnsupportedVersion(self.format_version));
        }
        if self.scan_shape.is_empty() || self.scan_shape.contains(&0) {
            return Err(DatasetError::invalid(
                "scan_shape must be a non-empty list of positive integers",
            ));
        }
        if self.sig_shape.is_empty() || self.sig_shape.contains(&0) {
            return Err(DatasetError::invalid(
                "sig_shape must be a non-empty list of positive integers",
            ));
        }
        if self.dtype == Dtype::Float64Le && self.role != DatasetRole::Result {
            return Err(DatasetError::invalid(
                "dtype float64_le is only allowed for role result",
            ));
        }
        let bpf = self
            .dtype
            .encoded_len(self.sig_pixels() as u64)
            .ok_or_else(|| {
                DatasetError::invalid("uint12_packed_le requires an even pixel count per frame")
            })?;
        let total = self.total_frames();
        if self.partitions.is_empty() {
            return Err(DatasetError::invalid("partition table is empty"));
        }
        let mut next_frame = 0u64;
        for (i, p) in self.partitions.iter().enumerate() {
            if p.index != i {
                return Err(DatasetError::invalid(format!(
                    "partition indices must be 0..n in order (found {} at position {i})",
                    p.index
                )));
            }
            if p.frame_count == 0 {
                return Err(DatasetError::invalid(format!(
                    "partition {i} has frame_count 0"
                )));
            }
            if p.frame_start != next_frame {
                let kind = if p.frame_start < next_frame { "overlap" } else { "gap" };
                return Err(DatasetError::invalid(format!(
                    "partitions must cover frames exactly once: {kind} at partition {i} \
                     (frame_start {} , expected {next_frame})",
                    p.frame_start
                )));
            }
            if p.byte_offset % bpf != 0 || p.byte_length % bpf != 0 {
                return Err(DatasetError::invalid(format!(
                    "partition {i} byte range is not frame-aligned"
                )));
            }
            if p.byte_offset % self.dtype.byte_quantum() != 0 {
                return Err(DatasetError::invalid(format!(
                    "partition {i} byte_offset is not element-aligned"
                )));
            }
            if p.byte_length != p.frame_count * bpf {
                return Err(DatasetError::invalid(format!(
                    "partition {i} byte_length {} != frame_count x bytes_per_frame ({})",
                    p.byte_length,
                    p.frame_count * bpf
                )));
            }
            if p.file_path.as_os_str().is_empty() || p.file_path.is_absolute() {
                return Err(DatasetError::invalid(format!(
                    "partition {i} file path must be relative and non-empty"
                )));
            }
            next_frame = p.frame_end();
        }
        if next_frame != total {
            let kind = if next_frame < total { "gap" } else { "overlap" };
            return Err(DatasetError::invalid(format!(
                "partitions must cover frames exactly once: {kind} at end \
                 (covered {next_frame} of {total} frames)"
            )));
        }
        Ok(())
    }
}

/// A descriptor bound to the directory its partition paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub sidecar_path: PathBuf,
    pub descriptor: DatasetDescriptor,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn open(sidecar_path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let sidecar_path = sidecar_path.as_ref();
        let SidecarMetadata {
            descriptor,
            metadata,
        } = parse_sidecar(sidecar_path)?;
        let root = sidecar_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Dataset {
            root,
            sidecar_path: sidecar_path.to_path_buf(),
            descriptor,
            metadata,
        })
    }

    /// Same descriptor resolved against a different data directory, used
    /// when a node reads its own replica.
    pub fn with_root(&self, root: impl Into<PathBuf>) -> Self {
        Dataset {
            root: root.into(),
            ..self.clone()
        }
    }

    pub fn partition_path(&self, partition: &Partition) -> PathBuf {
        self.root.join(&partition.file_path)
    }
}
