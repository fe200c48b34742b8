use serde::{Deserialize, Serialize};

use super::{
    make_com_masks, make_disk_mask, make_point_mask, make_random_mask, make_ring_mask, KernelError,
    MaskStack, ResultGrid, ResultKind,
};
use crate::dataset::DatasetDescriptor;

/// One mask of a `mask_apply` analysis. Geometry is in detector pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskShape {
    Disk { cx: f64, cy: f64, r: f64 },
    Ring { cx: f64, cy: f64, r_inner: f64, r_outer: f64 },
    Point { x: i64, y: i64 },
    Random { seed: u64 },
    Ones,
}

impl MaskShape {
    fn name(&self) -> &'static str {
        match self {
            MaskShape::Disk { .. } => "disk",
            MaskShape::Ring { .. } => "ring",
            MaskShape::Point { .. } => "point",
            MaskShape::Random { .. } => "random",
            MaskShape::Ones => "ones",
        }
    }

    pub fn build(&self, sig_shape: &[usize]) -> Result<Vec<f32>, KernelError> {
        match *self {
            MaskShape::Disk { cx, cy, r } => make_disk_mask(sig_shape, cx, cy, r),
            MaskShape::Ring {
                cx,
                cy,
                r_inner,
                r_outer,
            } => make_ring_mask(sig_shape, cx, cy, r_inner, r_outer),
            MaskShape::Point { x, y } => Ok(make_point_mask(sig_shape, x, y)),
            MaskShape::Random { seed } => Ok(make_random_mask(sig_shape, seed)),
            MaskShape::Ones => Ok(vec![1.0; sig_shape.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskRoi {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// What a job computes. Serialized as `{"type": "...", ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisSpec {
    /// One channel per mask, one value per scan position.
    MaskApply { masks: Vec<MaskShape> },
    /// Sum of all frames, detector-shaped.
    SumFrames,
    /// One frame at a scan position (`[row, col]` for a 2-D scan).
    PickFrame { position: Vec<usize> },
    /// Channels `sum`, `x`, `y`, optionally restricted to a disk.
    CenterOfMass {
        #[serde(default)]
        roi: Option<DiskRoi>,
    },
}

/// What a worker does with each tile.
#[derive(Debug, Clone, PartialEq)]
pub enum Operation {
    Masks(MaskStack),
    Sum,
    Pick { frame: u64 },
}

/// An [`AnalysisSpec`] checked against a dataset, with its masks built.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledAnalysis {
    pub spec: AnalysisSpec,
    pub operation: Operation,
}

impl AnalysisSpec {
    pub fn ring(cx: f64, cy: f64, r_inner: f64, r_outer: f64) -> Self {
        AnalysisSpec::MaskApply {
            masks: vec![MaskShape::Ring {
                cx,
                cy,
                r_inner,
                r_outer,
            }],
        }
    }

    /// Checks parameters without building masks.
    pub fn validate(&self, desc: &DatasetDescriptor) -> Result<(), KernelError> {
        self.compile_with(desc, false).map(|_| ())
    }

    pub fn compile(&self, desc: &DatasetDescriptor) -> Result<CompiledAnalysis, KernelError> {
        self.compile_with(desc, true)
    }

    fn compile_with(
        &self,
        desc: &DatasetDescriptor,
        build: bool,
    ) -> Result<CompiledAnalysis, KernelError> {
        // Masks are cheap to build at desk scale, but validation of large
        // detectors should not allocate K frames.
        let sig = if build { desc.sig_shape.clone() } else { vec![1] };
        let operation = match self {
            AnalysisSpec::MaskApply { masks } => {
                if masks.is_empty() {
                    return Err(KernelError::Parameter("mask_apply needs at least one mask".into()));
                }
                let built = masks
                    .iter()
                    .map(|m| m.build(&sig))
                    .collect::<Result<Vec<_>, _>>()?;
                let labels = masks
                    .iter()
                    .enumerate()
                    .map(|(i, m)| format!("{}{i}", m.name()))
                    .collect();
                Operation::Masks(MaskStack::new(sig, built, labels)?)
            }
            AnalysisSpec::SumFrames => Operation::Sum,
            AnalysisSpec::PickFrame { position } => Operation::Pick {
                frame: flat_position(&desc.scan_shape, position)?,
            },
            AnalysisSpec::CenterOfMass { roi } => {
                let stack = make_com_masks(&sig);
                match roi {
                    None => Operation::Masks(stack),
                    Some(DiskRoi { cx, cy, r }) => {
                        let disk = make_disk_mask(&sig, *cx, *cy, *r)?;
                        Operation::Masks(stack.restricted_to(&disk)?)
                    }
                }
            }
        };
        Ok(CompiledAnalysis {
            spec: self.clone(),
            operation,
        })
    }
}

/// Row-major flat index of a scan position.
pub(crate) fn flat_position(scan_shape: &[usize], position: &[usize]) -> Result<u64, KernelError> {
    if position.len() != scan_shape.len() {
        return Err(KernelError::Parameter(format!(
            "position {position:?} has {} axes, scan shape {scan_shape:?} has {}",
            position.len(),
            scan_shape.len()
        )));
    }
    let mut flat = 0u64;
    for (&p, &n) in position.iter().zip(scan_shape) {
        if p >= n {
            return Err(KernelError::Parameter(format!(
                "position {position:?} out of range for scan shape {scan_shape:?}"
            )));
        }
        flat = flat * n as u64 + p as u64;
    }
    Ok(flat)
}

impl CompiledAnalysis {
    pub fn result_kind(&self) -> ResultKind {
        match self.operation {
            Operation::Masks(_) => ResultKind::PerFrame,
            Operation::Sum | Operation::Pick { .. } => ResultKind::Reduced,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match &self.operation {
            Operation::Masks(stack) => stack.labels().to_vec(),
            Operation::Sum => vec!["sum".into()],
            Operation::Pick { .. } => vec!["frame".into()],
        }
    }

    pub fn channels(&self) -> usize {
        match &self.operation {
            Operation::Masks(stack) => stack.channels(),
            _ => 1,
        }
    }

    pub fn new_grid(&self, desc: &DatasetDescriptor) -> ResultGrid {
        match self.result_kind() {
            ResultKind::PerFrame => ResultGrid::per_frame(desc, self.labels()),
            ResultKind::Reduced => ResultGrid::reduced(desc, &self.labels()[0]),
        }
    }
}
