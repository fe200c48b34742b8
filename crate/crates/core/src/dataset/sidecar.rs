//! Sidecar text format.
//!
//! ```text
//! # virt4d sidecar
//! format_version: 1
//! role: dataset
//! dtype: uint12_packed_le
//! scan_shape: 16, 16
//! sig_shape: 128, 128
//! total_frames: 256
//! bytes_per_frame: 24576
//! partitions: 2
//!   0 frame_start=0 frame_count=128 byte_offset=0 byte_length=3145728 nodes=n0,n1 file=part-00000.raw
//!   1 frame_start=128 frame_count=128 byte_offset=0 byte_length=3145728 nodes=- file=part-00001.raw
//! metadata:
//!   instrument: K2 IS
//! ```
//!
//! Integers are base 10. `file` is always the last field of a partition row
//! and runs to the end of the line. Metadata values escape `\` and newlines
//! as `\\` and `\n`. `total_frames` and `bytes_per_frame` are derived values
//! and are checked on parse.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetDescriptor, DatasetError, DatasetRole, Dtype, Partition, FORMAT_VERSION};

/// Descriptor plus free-form acquisition metadata.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SidecarMetadata {
    pub descriptor: DatasetDescriptor,
    pub metadata: BTreeMap<String, String>,
}

impl Default for DatasetDescriptor {
    fn default() -> Self {
        DatasetDescriptor::new(Dtype::Float32Le, vec![], vec![])
    }
}

pub fn write_sidecar(
    descriptor: &DatasetDescriptor,
    extra_metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), DatasetError> {
    let text = to_sidecar_string(descriptor, extra_metadata)?;
    let tmp = path.with_extension("sidecar.tmp");
    fs::write(&tmp, text)
        .map_err(|e| DatasetError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path)
        .map_err(|e| DatasetError::io(format!("writing {}", path.display()), e))
}

pub fn to_sidecar_string(
    d: &DatasetDescriptor,
    metadata: &BTreeMap<String, String>,
) -> Result<String, DatasetError> {
    d.validate()?;
    for key in metadata.keys() {
        if key.is_empty() || key.contains([':', '\n', '\r']) || key.starts_with([' ', '#']) {
            return Err(DatasetError::Invalid(format!(
                "metadata key {key:?} must be non-empty without ':' or newlines"
            )));
        }
    }
    for p in &d.partitions {
        let file = p.file_path.to_string_lossy();
        if file.contains(['\n', '\r']) || file.starts_with(' ') {
            return Err(DatasetError::Invalid(format!(
                "partition {} file path {file:?} cannot be stored",
                p.index
            )));
        }
        if p.preferred_nodes
            .iter()
            .any(|n| n.is_empty() || n == "-" || n.contains([',', ' ', '\n']))
        {
            return Err(DatasetError::Invalid(format!(
                "partition {} has an invalid node identifier",
                p.index
            )));
        }
    }

    let join = |dims: &[usize]| {
        dims.iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut out = String::new();
    out.push_str("# virt4d sidecar\n");
    writeln!(out, "format_version: {}", d.format_version).unwrap();
    writeln!(out, "role: {}", d.role.as_str()).unwrap();
    writeln!(out, "dtype: {}", d.dtype).unwrap();
    writeln!(out, "scan_shape: {}", join(&d.scan_shape)).unwrap();
    writeln!(out, "sig_shape: {}", join(&d.sig_shape)).unwrap();
    writeln!(out, "total_frames: {}", d.total_frames()).unwrap();
    writeln!(out, "bytes_per_frame: {}", d.bytes_per_frame()).unwrap();
    writeln!(out, "partitions: {}", d.partitions.len()).unwrap();
    for p in &d.partitions {
        let nodes = if p.preferred_nodes.is_empty() {
            "-".to_string()
        } else {
            p.preferred_nodes.join(",")
        };
        writeln!(
            out,
            "  {} frame_start={} frame_count={} byte_offset={} byte_length={} nodes={} file={}",
            p.index,
            p.frame_start,
            p.frame_count,
            p.byte_offset,
            p.byte_length,
            nodes,
            p.file_path.to_string_lossy()
        )
        .unwrap();
    }
    out.push_str("metadata:\n");
    for (k, v) in metadata {
        writeln!(out, "  {k}: {}", escape(v)).unwrap();
    }
    Ok(out)
}

pub fn parse_sidecar(path: &Path) -> Result<SidecarMetadata, DatasetError> {
    let text = fs::read_to_string(path)
        .map_err(|e| DatasetError::io(format!("reading {}", path.display()), e))?;
    parse_sidecar_str(&text)
}

enum Section {
    Top,
    Partitions,
    Metadata,
}

pub fn parse_sidecar_str(text: &str) -> Result<SidecarMetadata, DatasetError> {
    let mut version = None;
    let mut role = None;
    let mut dtype = None;
    let mut scan_shape = None;
    let mut sig_shape = None;
    let mut total_frames = None;
    let mut bytes_per_frame = None;
    let mut declared_partitions = None;
    let mut partitions = Vec::new();
    let mut metadata = BTreeMap::new();
    let mut section = Section::Top;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(row) = line.strip_prefix("  ") {
            match section {
                Section::Partitions => partitions.push(parse_partition_row(row, line_no)?),
                Section::Metadata => {
                    let (k, v) = split_key(row, line_no)?;
                    metadata.insert(k.to_string(), unescape(v, line_no)?);
                }
                Section::Top => {
                    return Err(parse_err(line_no, "line", "unexpected indented line"));
                }
            }
            continue;
        }
        let (key, value) = split_key(line, line_no)?;
        section = Section::Top;
        match key {
            "format_version" => {
                let v: u32 = parse_int(value, line_no, key)?;
                if v != FORMAT_VERSION {
                    return Err(DatasetError::UnsupportedVersion(v));
                }
                version = Some(v);
            }
            "role" => {
                role = Some(match value {
                    "dataset" => DatasetRole::Dataset,
                    "result" => DatasetRole::Result,
                    other => {
                        return Err(parse_err(line_no, key, format!("unknown role {other:?}")))
                    }
                })
            }
            "dtype" => {
                dtype = Some(value.parse::<Dtype>().map_err(|m| parse_err(line_no, key, m))?)
            }
            "scan_shape" => scan_shape = Some(parse_shape(value, line_no, key)?),
            "sig_shape" => sig_shape = Some(parse_shape(value, line_no, key)?),
            "total_frames" => total_frames = Some(parse_int::<u64>(value, line_no, key)?),
            "bytes_per_frame" => bytes_per_frame = Some(parse_int::<u64>(value, line_no, key)?),
            "partitions" => {
                declared_partitions = Some(parse_int::<usize>(value, line_no, key)?);
                section = Section::Partitions;
            }
            "metadata" => {
                if !value.is_empty() {
                    return Err(parse_err(line_no, key, "expected an empty value"));
                }
                section = Section::Metadata;
            }
            other => return Err(parse_err(line_no, other, "unknown field")),
        }
    }

    let missing = |field: &str| parse_err(0, field, "missing required field");
    let version = version.ok_or_else(|| missing("format_version"))?;
    let descriptor = DatasetDescriptor {
        format_version: version,
        role: role.unwrap_or_default(),
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        scan_shape: scan_shape.ok_or_else(|| missing("scan_shape"))?,
        sig_shape: sig_shape.ok_or_else(|| missing("sig_shape"))?,
        partitions,
    };
    let declared = declared_partitions.ok_or_else(|| missing("partitions"))?;
    if declared != descriptor.partitions.len() {
        return Err(DatasetError::Invalid(format!(
            "partition count {declared} does not match {} table rows",
            descriptor.partitions.len()
        )));
    }
    descriptor.validate()?;
    if let Some(t) = total_frames {
        if t != descriptor.total_frames() {
            return Err(DatasetError::Invalid(format!(
                "total_frames {t} != product(scan_shape) {}",
                descriptor.total_frames()
            )));
        }
    }
    if let Some(b) = bytes_per_frame {
        if b != descriptor.bytes_per_frame() {
            return Err(DatasetError::Invalid(format!(
                "bytes_per_frame {b} does not match dtype and sig_shape ({})",
                descriptor.bytes_per_frame()
            )));
        }
    }
    Ok(SidecarMetadata {
        descriptor,
        metadata,
    })
}

fn parse_err(line: usize, field: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn split_key(line: &str, line_no: usize) -> Result<(&str, &str), DatasetError> {
    let (k, v) = line
        .split_once(':')
        .ok_or_else(|| parse_err(line_no, "line", "expected `key: value`"))?;
    Ok((k.trim(), v.strip_prefix(' ').unwrap_or(v)))
}

fn parse_int<T: std::str::FromStr>(s: &str, line: usize, field: &str) -> Result<T, DatasetError> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, field, format!("expected a base-10 integer, got {s:?}")))
}

fn parse_shape(s: &str, line: usize, field: &str) -> Result<Vec<usize>, DatasetError> {
    s.split(',').map(|d| parse_int(d, line, field)).collect()
}

fn parse_partition_row(row: &str, line: usize) -> Result<Partition, DatasetError> {
    let (head, file) = row
        .split_once(" file=")
        .ok_or_else(|| parse_err(line, "file", "partition row lacks file="))?;
    let mut tokens = head.split_whitespace();
    let index = parse_int(
        tokens
            .next()
            .ok_or_else(|| parse_err(line, "index", "missing partition index"))?,
        line,
        "index",
    )?;
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(line, tok, "expected key=value"))?;
        if fields.insert(k, v).is_some() {
            return Err(parse_err(line, k, "duplicate field"));
        }
    }
    let mut take = |name: &str| {
        fields
            .remove(name)
            .ok_or_else(|| parse_err(line, name, "missing partition field"))
    };
    let frame_start = parse_int(take("frame_start")?, line, "frame_start")?;
    let frame_count = parse_int(take("frame_count")?, line, "frame_count")?;
    let byte_offset = parse_int(take("byte_offset")?, line, "byte_offset")?;
    let byte_length = parse_int(take("byte_length")?, line, "byte_length")?;
    let nodes = take("nodes")?;
    if let Some(k) = fields.keys().next() {
        return Err(parse_err(line, *k, "unknown partition field"));
    }
    let preferred_nodes = if nodes == "-" {
        Vec::new()
    } else {
        nodes.split(',').map(str::to_string).collect()
    };
    Ok(Partition {
        index,
        frame_start,
        frame_count,
        file_path: PathBuf::from(file),
        byte_offset,
        byte_length,
        preferred_nodes,
    })
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(v: &str, line: usize) -> Result<String, DatasetError> {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(parse_err(
                    line,
                    "metadata",
                    format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default()),
                ))
            }
        }
    }
    Ok(out)
}
