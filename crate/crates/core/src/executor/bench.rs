use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Engine, EngineConfig, ExecError, JobStatus};
use crate::dataset::Dataset;
use crate::io::{ReadBackend, TilingPlan};
use crate::kernels::AnalysisSpec;

/// Page-cache state as declared by the caller; the harness does not drop
/// caches itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheState {
    Warm,
    Cold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub workers: Vec<usize>,
    pub backend: Option<ReadBackend>,
    pub tiling: TilingPlan,
    pub cache_state: CacheState,
    /// Measured runs per worker count.
    pub repeats: usize,
    /// Runs whose spread `(max - min) / median` exceeds this are flagged.
    pub jitter_bound: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            workers: vec![1],
            backend: None,
            tiling: TilingPlan::default(),
            cache_state: CacheState::Warm,
            repeats: 3,
            jitter_bound: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub workers: usize,
    pub backend: String,
    pub wall_s: Vec<f64>,
    pub median_wall_s: f64,
    pub mib_per_s: f64,
    pub values_per_s: f64,
    pub first_partial_ms: f64,
    /// Median throughput relative to the single-worker row (or the first row).
    pub speedup: f64,
    pub jitter: f64,
    pub jitter_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dataset: String,
    pub dtype: String,
    pub total_bytes: u64,
    pub frames: u64,
    pub analysis: AnalysisSpec,
    pub cache_state: CacheState,
    pub physical_cores: usize,
    pub logical_cores: usize,
    pub rows: Vec<BenchRow>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Runs the analysis once per repeat for each worker count. Warm runs are
/// preceded by one unmeasured pass that fills the page cache.
pub fn run_benchmark(
    dataset: Arc<Dataset>,
    spec: &AnalysisSpec,
    config: &BenchConfig,
) -> Result<BenchReport, ExecError> {
    let desc = &dataset.descriptor;
    let backend_name = match config.backend {
        Some(b) => b.to_string(),
        None => match desc.partitions.first() {
            Some(p) => format!("auto:{}", ReadBackend::auto(&dataset, p)),
            None => "auto".into(),
        },
    };
    let values = desc.total_frames() as f64 * desc.sig_pixels() as f64;
    let mut rows: Vec<BenchRow> = Vec::new();
    for &workers in &config.workers {
        let engine = Engine::new(EngineConfig {
            workers,
            backend: config.backend,
            tiling: config.tiling,
        })?;
        if config.cache_state == CacheState::Warm && rows.is_empty() {
            engine.run(Arc::clone(&dataset), spec, None)?.into_result()?;
        }
        let mut walls = Vec::new();
        let mut firsts = Vec::new();
        for _ in 0..config.repeats.max(1) {
            let outcome = engine.run(Arc::clone(&dataset), spec, None)?;
            if outcome.status != JobStatus::Done {
                outcome.into_result()?;
                unreachable!("non-done outcome converts to an error");
            }
            walls.push(outcome.stats.wall.as_secs_f64());
            firsts.push(outcome.stats.first_partial.unwrap_or_default().as_secs_f64() * 1e3);
        }
        let med = median(&walls);
        let max = walls.iter().copied().fold(f64::MIN, f64::max);
        let min = walls.iter().copied().fold(f64::MAX, f64::min);
        let jitter = if med > 0.0 { (max - min) / med } else { 0.0 };
        rows.push(BenchRow {
            workers,
            backend: backend_name.clone(),
            median_wall_s: med,
            mib_per_s: desc.total_bytes() as f64 / (1 << 20) as f64 / med.max(1e-12),
            values_per_s: values / med.max(1e-12),
            first_partial_ms: median(&firsts),
            speedup: 1.0,
            jitter,
            jitter_flagged: jitter > config.jitter_bound,
            wall_s: walls,
        });
    }
    let base = rows
        .iter()
        .find(|r| r.workers == 1)
        .or(rows.first())
        .map(|r| r.mib_per_s)
        .unwrap_or(1.0);
    for r in &mut rows {
        r.speedup = r.mib_per_s / base;
    }
    Ok(BenchReport {
        dataset: dataset.sidecar_path.display().to_string(),
        dtype: desc.dtype.to_string(),
        total_bytes: desc.total_bytes(),
        frames: desc.total_frames(),
        analysis: spec.clone(),
        cache_state: config.cache_state,
        physical_cores: num_cpus::get_physical(),
        logical_cores: num_cpus::get(),
        rows,
    })
}
