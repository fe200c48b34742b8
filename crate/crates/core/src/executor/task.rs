use thiserror::Error;

use super::{CancelToken, JobId};
use crate::dataset::{Dataset, DatasetDescriptor, Partition};
use crate::io::{IoError, ReadBackend, TileReader, TilingPlan};
use crate::kernels::{
    apply_masks, sum_frames_tile, CompiledAnalysis, FrameAccumulator, KernelError, Operation,
    PartialResult, ResultKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Queued,
    Running,
    Done,
    Aborted,
    Failed,
}

/// One partition of one job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub job_id: JobId,
    pub partition_index: usize,
    pub node: Option<String>,
    pub local: bool,
    pub state: TaskState,
}

/// One task per partition, in partition order.
pub fn plan_tasks(job_id: JobId, desc: &DatasetDescriptor) -> Vec<Task> {
    desc.partitions
        .iter()
        .map(|p| Task {
            job_id,
            partition_index: p.index,
            node: None,
            local: false,
            state: TaskState::Queued,
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Reads one partition tile by tile and computes its partial result.
/// Returns `Ok(None)` when cancelled at a tile boundary. `backend: None`
/// picks [`ReadBackend::auto`] per partition.
pub fn run_partition(
    dataset: &Dataset,
    partition: &Partition,
    analysis: &CompiledAnalysis,
    plan: &TilingPlan,
    backend: Option<ReadBackend>,
    scratch: &mut Vec<f32>,
    cancel: &CancelToken,
) -> Result<Option<PartialResult>, TaskError> {
    let desc = &dataset.descriptor;
    let backend = backend.unwrap_or_else(|| ReadBackend::auto(dataset, partition));
    let mut partial = PartialResult {
        partition_index: partition.index,
        frame_start: partition.frame_start,
        frame_count: partition.frame_count,
        kind: analysis.result_kind(),
        channels: analysis.channels(),
        values: Vec::new(),
    };

    // pick_frame reads only the frame it needs; other partitions
    // contribute an empty partial
    let picked;
    let source = match analysis.operation {
        Operation::Pick { frame } => {
            if !partition.contains_frame(frame) {
                return Ok(Some(partial));
            }
            let bpf = desc.bytes_per_frame();
            picked = Partition {
                frame_start: frame,
                frame_count: 1,
                byte_offset: partition.byte_offset + (frame - partition.frame_start) * bpf,
                byte_length: bpf,
                ..partition.clone()
            };
            &picked
        }
        _ => partition,
    };

    let mut reader = TileReader::with_scratch(dataset, source, plan, backend, std::mem::take(scratch))?;
    let completed = match &analysis.operation {
        Operation::Masks(stack) => {
            let mut acc =
                FrameAccumulator::new(partition.frame_start, partition.frame_count, stack.channels());
            let done = for_each_tile(&mut reader, cancel, |tile| apply_masks(tile, stack, &mut acc))?;
            partial.values = acc.values;
            done
        }
        Operation::Sum | Operation::Pick { .. } => {
            let mut image = vec![0f64; desc.sig_pixels()];
            let done = for_each_tile(&mut reader, cancel, |tile| sum_frames_tile(tile, &mut image))?;
            partial.values = image;
            done
        }
    };
    *scratch = reader.into_scratch();
    debug_assert!(partial.kind == ResultKind::PerFrame || partial.channels == 1);
    Ok(completed.then_some(partial))
}

fn for_each_tile(
    reader: &mut TileReader<'_>,
    cancel: &CancelToken,
    mut f: impl FnMut(&crate::io::Tile<'_>) -> Result<(), KernelError>,
) -> Result<bool, TaskError> {
    loop {
        if cancel.is_cancelled() {
            return Ok(false);
        }
        match reader.next_tile() {
            None => return Ok(true),
            Some(tile) => f(&tile?)?,
        }
    }
}
