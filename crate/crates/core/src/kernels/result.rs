use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::KernelError;
use crate::dataset::{
    write_sidecar, Dataset, DatasetDescriptor, DatasetError, DatasetRole, Dtype, Partition,
    SIDECAR_NAME,
};

/// How a partial result enters the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultKind {
    /// One row of `channels` values per frame; partials write disjoint slabs.
    PerFrame,
    /// One detector-shaped image; partials are summed.
    Reduced,
}

impl ResultKind {
    pub fn code(self) -> u8 {
        match self {
            ResultKind::PerFrame => 0,
            ResultKind::Reduced => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ResultKind::PerFrame),
            1 => Some(ResultKind::Reduced),
            _ => None,
        }
    }
}

/// Output of one task: the `frames x channels` slab of its partition, or
/// its contribution to a reduced image (empty when it contributes nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct PartialResult {
    pub partition_index: usize,
    pub frame_start: u64,
    pub frame_count: u64,
    pub kind: ResultKind,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Result assembled progressively from partition partials.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultGrid {
    kind: ResultKind,
    scan_shape: Vec<usize>,
    sig_shape: Vec<usize>,
    labels: Vec<String>,
    values: Vec<f64>,
    partition_frames: Vec<(u64, u64)>,
    filled: Vec<bool>,
}

impl ResultGrid {
    /// Grid of `scan positions x labels.len()` values.
    pub fn per_frame(desc: &DatasetDescriptor, labels: Vec<String>) -> Self {
        let len = desc.total_frames() as usize * labels.len();
        Self::build(desc, ResultKind::PerFrame, labels, len)
    }

    /// Detector-shaped image with a single channel.
    pub fn reduced(desc: &DatasetDescriptor, label: &str) -> Self {
        Self::build(desc, ResultKind::Reduced, vec![label.to_string()], desc.sig_pixels())
    }

    fn build(desc: &DatasetDescriptor, kind: ResultKind, labels: Vec<String>, len: usize) -> Self {
        ResultGrid {
            kind,
            scan_shape: desc.scan_shape.clone(),
            sig_shape: desc.sig_shape.clone(),
            labels,
            values: vec![0.0; len],
            partition_frames: desc
                .partitions
                .iter()
                .map(|p| (p.frame_start, p.frame_count))
                .collect(),
            filled: vec![false; desc.partitions.len()],
        }
    }

    pub fn kind(&self) -> ResultKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn scan_shape(&self) -> &[usize] {
        &self.scan_shape
    }

    /// `scan_shape + [channels]` for per-frame grids, the detector shape for
    /// reduced ones.
    pub fn shape(&self) -> Vec<usize> {
        match self.kind {
            ResultKind::PerFrame => {
                let mut s = self.scan_shape.clone();
                s.push(self.channels());
                s
            }
            ResultKind::Reduced => self.sig_shape.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn filled(&self) -> &[bool] {
        &self.filled
    }

    pub fn partitions(&self) -> usize {
        self.filled.len()
    }

    pub fn merged_count(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }

    /// Frames covered by the merged partitions; divides a sum into an average.
    pub fn frames_merged(&self) -> u64 {
        self.partition_frames
            .iter()
            .zip(&self.filled)
            .filter(|(_, &f)| f)
            .map(|(&(_, n), _)| n)
            .sum()
    }

    pub fn is_complete(&self) -> bool {
        self.filled.iter().all(|&f| f)
    }

    /// One channel in scan order (per-frame) or the image (reduced).
    pub fn channel(&self, k: usize) -> Vec<f64> {
        match self.kind {
            ResultKind::PerFrame => self
                .values
                .iter()
                .skip(k)
                .step_by(self.channels())
                .copied()
                .collect(),
            ResultKind::Reduced => self.values.clone(),
        }
    }

    /// Per-channel sums taken in storage order. A client that rebuilds the
    /// grid from partials and sums the same way gets identical values.
    pub fn checksums(&self) -> Vec<f64> {
        grid_checksums(&self.values, self.channels(), self.kind)
    }

    pub fn merge_partial(&mut self, partial: &PartialResult) -> Result<(), KernelError> {
        let idx = partial.partition_index;
        let Some(&(frame_start, frame_count)) = self.partition_frames.get(idx) else {
            return Err(KernelError::Contract(format!("unknown partition {idx}")));
        };
        if self.filled[idx] {
            return Err(KernelError::DoubleMerge(idx));
        }
        if partial.kind != self.kind {
            return Err(KernelError::Contract(format!(
                "partial of kind {:?} merged into {:?} grid",
                partial.kind, self.kind
            )));
        }
        match self.kind {
            ResultKind::PerFrame => {
                let k = self.channels();
                if partial.channels != k
                    || partial.frame_start != frame_start
                    || partial.frame_count != frame_count
                    || partial.values.len() != frame_count as usize * k
                {
                    return Err(KernelError::ShapeMismatch(format!(
                        "partial for partition {idx} does not match its slab"
                    )));
                }
                let start = frame_start as usize * k;
                self.values[start..start + partial.values.len()].copy_from_slice(&partial.values);
            }
            ResultKind::Reduced => {
                if !partial.values.is_empty() {
                    if partial.values.len() != self.values.len() {
                        return Err(KernelError::ShapeMismatch(format!(
                            "reduced partial for partition {idx} has {} values, expected {}",
                            partial.values.len(),
                            self.values.len()
                        )));
                    }
                    for (v, p) in self.values.iter_mut().zip(&partial.values) {
                        *v += p;
                    }
                }
            }
        }
        self.filled[idx] = true;
        Ok(())
    }

    /// Writes the grid as a `float64_le` result dataset: one raw file plus a
    /// sidecar with `role: result`. Per-frame grids use the scan shape with
    /// the channels as the signal axis.
    pub fn export(&self, output_dir: &Path) -> Result<Dataset, DatasetError> {
        let (scan_shape, sig_shape) = match self.kind {
            ResultKind::PerFrame => (self.scan_shape.clone(), vec![self.channels()]),
            ResultKind::Reduced => (vec![1], self.sig_shape.clone()),
        };
        let mut desc = DatasetDescriptor::new(Dtype::Float64Le, scan_shape, sig_shape);
        desc.role = DatasetRole::Result;
        let file = Path::new("result.raw");
        desc.partitions = vec![Partition {
            index: 0,
            frame_start: 0,
            frame_count: desc.total_frames(),
            file_path: file.to_path_buf(),
            byte_offset: 0,
            byte_length: self.values.len() as u64 * 8,
            preferred_nodes: vec![],
        }];
        desc.validate()?;
        std::fs::create_dir_all(output_dir)
            .map_err(|e| DatasetError::io(format!("creating {}", output_dir.display()), e))?;
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let raw_path = output_dir.join(file);
        std::fs::write(&raw_path, bytes)
            .map_err(|e| DatasetError::io(format!("writing {}", raw_path.display()), e))?;
        let mut metadata = BTreeMap::new();
        metadata.insert("channels".to_string(), self.labels.join(","));
        metadata.insert(
            "result_kind".to_string(),
            match self.kind {
                ResultKind::PerFrame => "per_frame",
                ResultKind::Reduced => "reduced",
            }
            .to_string(),
        );
        let sidecar_path = output_dir.join(SIDECAR_NAME);
        write_sidecar(&desc, &metadata, &sidecar_path)?;
        Ok(Dataset {
            root: output_dir.to_path_buf(),
            sidecar_path,
            descriptor: desc,
            metadata,
        })
    }
}

/// Checksums over a flat value buffer laid out like [`ResultGrid::values`].
pub fn grid_checksums(values: &[f64], channels: usize, kind: ResultKind) -> Vec<f64> {
    match kind {
        ResultKind::PerFrame => {
            let mut sums = vec![0f64; channels];
            for row in values.chunks_exact(channels.max(1)) {
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
            sums
        }
        ResultKind::Reduced => vec![values.iter().sum()],
    }
}

/// Centre of mass per scan position; `NaN` and `valid == false` where the
/// frame has zero total intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct ComField {
    pub scan_shape: Vec<usize>,
    pub com_x: Vec<f64>,
    pub com_y: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Divides the `(sum, x, y)` channels of a complete grid.
pub fn finalize_com(grid: &ResultGrid) -> Result<ComField, KernelError> {
    if grid.kind() != ResultKind::PerFrame || grid.channels() != 3 {
        return Err(KernelError::Contract(
            "centre of mass needs a per-frame grid with (sum, x, y) channels".into(),
        ));
    }
    if !grid.is_complete() {
        return Err(KernelError::Contract("grid is not complete".into()));
    }
    let n = grid.values().len() / 3;
    let mut field = ComField {
        scan_shape: grid.scan_shape().to_vec(),
        com_x: Vec::with_capacity(n),
        com_y: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for row in grid.values().chunks_exact(3) {
        let (s, wx, wy) = (row[0], row[1], row[2]);
        if s == 0.0 {
            field.com_x.push(f64::NAN);
            field.com_y.push(f64::NAN);
            field.valid.push(false);
        } else {
            field.com_x.push(wx / s);
            field.com_y.push(wy / s);
            field.valid.push(true);
        }
    }
    Ok(field)
}
