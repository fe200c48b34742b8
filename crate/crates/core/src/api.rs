//! Blocking entry points for scripts and the CLI.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use crate::dataset::Dataset;
use crate::executor::{Engine, EngineConfig, ExecError, JobStats};
use crate::kernels::{finalize_com, AnalysisSpec, ComField, ResultGrid};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub engine: EngineConfig,
    /// Cancel the job if it has not finished after this long.
    pub timeout: Option<Duration>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub grid: Arc<ResultGrid>,
    /// Finalized centre of mass for `center_of_mass` analyses.
    pub com: Option<ComField>,
    pub stats: JobStats,
}

/// Opens the dataset at `sidecar`, runs `spec` to completion and returns the
/// final grid. A timeout cancels the job and yields [`ExecError::Cancelled`].
pub fn sync_run(
    sidecar: impl AsRef<Path>,
    spec: &AnalysisSpec,
    options: &RunOptions,
) -> Result<RunResult, ExecError> {
    let dataset = Arc::new(Dataset::open(sidecar)?);
    run_dataset(dataset, spec, options)
}

pub fn run_dataset(
    dataset: Arc<Dataset>,
    spec: &AnalysisSpec,
    options: &RunOptions,
) -> Result<RunResult, ExecError> {
    let engine = Engine::new(options.engine.clone())?;
    let id = engine.submit(dataset, spec, None)?;
    let outcome = match options.timeout {
        None => engine.wait(id)?,
        Some(t) => match engine.wait_timeout(id, t)? {
            Some(o) => o,
            None => {
                // the job may finish between the timeout and the cancel
                match engine.cancel(id) {
                    Ok(()) | Err(ExecError::AlreadyFinished(_)) => {}
                    Err(e) => return Err(e),
                }
                engine.wait(id)?
            }
        },
    };
    let stats = outcome.stats.clone();
    let grid = outcome.into_result()?;
    let com = match spec {
        AnalysisSpec::CenterOfMass { .. } => Some(finalize_com(&grid)?),
        _ => None,
    };
    Ok(RunResult { grid, com, stats })
}

/// Detector-shaped sum over all frames, plus the number of frames summed.
pub fn sum_frames(dataset: Arc<Dataset>, options: &RunOptions) -> Result<(Vec<f64>, u64), ExecError> {
    let r = run_dataset(dataset, &AnalysisSpec::SumFrames, options)?;
    Ok((r.grid.values().to_vec(), r.grid.frames_merged()))
}

/// The decoded frame at a scan position.
pub fn pick_frame(
    dataset: Arc<Dataset>,
    position: &[usize],
    options: &RunOptions,
) -> Result<Vec<f64>, ExecError> {
    let spec = AnalysisSpec::PickFrame {
        position: position.to_vec(),
    };
    Ok(run_dataset(dataset, &spec, options)?.grid.values().to_vec())
}
