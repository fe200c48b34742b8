use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use virt4d_core::api::{run_dataset, RunOptions};
use virt4d_core::dataset::{
    generate_synthetic, ingest, Dataset, Dtype, SourceLayout, DEFAULT_PARTITION_BYTES,
    SIDECAR_NAME,
};
use virt4d_core::executor::{
    default_workers, run_benchmark, worker_main, BenchConfig, BenchReport, CacheState,
    EngineConfig, JobStats,
};
use virt4d_core::io::{ReadBackend, TilingPlan};
use virt4d_core::kernels::{AnalysisSpec, DiskRoi, MaskShape};
use virt4d_server::{AppState, ServerConfig};

mod render;

#[derive(Parser)]
#[command(name = "virt4d", version, about = "Virtual-detector processing for 4D-STEM datasets")]
struct Cli {
    /// Report format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Machine,
}

#[derive(Subcommand)]
enum Command {
    /// Split a contiguous raw file into a partitioned dataset.
    Ingest(IngestArgs),
    /// Run one analysis and write the result grid.
    Run(RunArgs),
    /// Serve the HTTP/WebSocket API.
    Serve(ServeArgs),
    /// Measure throughput per worker count.
    Bench(BenchArgs),
    /// Tile an existing dataset along the slow scan axis.
    Synth(SynthArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Headerless C-order raw file.
    input: PathBuf,
    #[arg(long)]
    dtype: Dtype,
    #[arg(long, value_parser = parse_shape)]
    scan_shape: Shape,
    #[arg(long, value_parser = parse_shape)]
    sig_shape: Shape,
    #[arg(long)]
    out: PathBuf,
    /// Target bytes per partition (suffixes K, M, G).
    #[arg(long, value_parser = parse_size, default_value_t = DEFAULT_PARTITION_BYTES)]
    partition_size: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Base dataset directory or sidecar.
    base: PathBuf,
    #[arg(long)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_size, default_value_t = DEFAULT_PARTITION_BYTES)]
    partition_size: u64,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Worker threads; defaults to the number of physical cores.
    #[arg(long)]
    workers: Option<usize>,
    /// mmap, buffered or direct; chosen per partition when omitted.
    #[arg(long)]
    backend: Option<ReadBackend>,
    /// Tile target in bytes; 0 reads whole partitions.
    #[arg(long, value_parser = parse_size)]
    tile_size: Option<u64>,
}

impl EngineArgs {
    fn config(&self, workers: Option<usize>) -> EngineConfig {
        EngineConfig {
            workers: workers.or(self.workers).unwrap_or_else(|| default_workers(false)),
            backend: self.backend,
            tiling: self
                .tile_size
                .map(|t| TilingPlan::new(t as usize))
                .unwrap_or_default(),
        }
    }
}

#[derive(Args)]
#[command(group(
    ArgGroup::new("analysis")
        .required(true)
        .args(["spec", "ring", "disk", "sum", "pick", "com"])
))]
struct AnalysisArgs {
    /// Analysis spec as JSON, or @path to a JSON file.
    #[arg(long)]
    spec: Option<String>,
    /// Ring detector CX,CY,R_INNER,R_OUTER.
    #[arg(long, value_parser = parse_floats::<4>)]
    ring: Option<[f64; 4]>,
    /// Disk detector CX,CY,R.
    #[arg(long, value_parser = parse_floats::<3>)]
    disk: Option<[f64; 3]>,
    /// Sum of all frames.
    #[arg(long)]
    sum: bool,
    /// Frame at a scan position, e.g. 3,7.
    #[arg(long, value_parser = parse_shape)]
    pick: Option<Shape>,
    /// Centre of mass.
    #[arg(long)]
    com: bool,
    /// Restrict the centre of mass to a disk CX,CY,R.
    #[arg(long, value_parser = parse_floats::<3>, requires = "com")]
    roi: Option<[f64; 3]>,
}

impl AnalysisArgs {
    fn spec(&self) -> Result<AnalysisSpec> {
        if let Some(s) = &self.spec {
            let text = match s.strip_prefix('@') {
                Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
                None => s.clone(),
            };
            return serde_json::from_str(&text).context("parsing analysis spec");
        }
        if let Some([cx, cy, ri, ro]) = self.ring {
            return Ok(AnalysisSpec::ring(cx, cy, ri, ro));
        }
        if let Some([cx, cy, r]) = self.disk {
            return Ok(AnalysisSpec::MaskApply {
                masks: vec![MaskShape::Disk { cx, cy, r }],
            });
        }
        if self.sum {
            return Ok(AnalysisSpec::SumFrames);
        }
        if let Some(p) = &self.pick {
            return Ok(AnalysisSpec::PickFrame { position: p.0.clone() });
        }
        if self.com {
            return Ok(AnalysisSpec::CenterOfMass {
                roi: self.roi.map(|[cx, cy, r]| DiskRoi { cx, cy, r }),
            });
        }
        bail!("no analysis given")
    }
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory or sidecar.
    dataset: PathBuf,
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Output directory for the result sidecar and raw file.
    #[arg(long)]
    out: PathBuf,
    /// Also render one channel as a PNG.
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    png_channel: usize,
    /// Cancel the job after this many seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Seconds a job survives without subscribers.
    #[arg(long, default_value_t = 30.0)]
    grace: f64,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct BenchArgs {
    dataset: PathBuf,
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Comma-separated worker counts.
    #[arg(long, value_parser = parse_shape, default_value = "1")]
    workers: Shape,
    /// mmap, buffered or direct; chosen per partition when omitted.
    #[arg(long)]
    backend: Option<ReadBackend>,
    #[arg(long, value_parser = parse_size)]
    tile_size: Option<u64>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Page-cache state as prepared by the caller.
    #[arg(long, value_enum, default_value_t = Cache::Warm)]
    cache: Cache,
    #[arg(long, default_value_t = 0.2)]
    jitter_bound: f64,
    /// Also write the machine-readable report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cache {
    Warm,
    Cold,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    connect: String,
    #[arg(long)]
    node: String,
    #[arg(long)]
    slot: u32,
}

/// Comma-separated non-negative integers.
#[derive(Clone, Debug)]
struct Shape(Vec<usize>);

fn parse_shape(s: &str) -> Result<Shape, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Shape)
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} values, got {}", v.len()))
}

/// Byte count with an optional K/M/G (binary) suffix.
fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let upper = t.to_ascii_uppercase();
    let stripped = upper.trim_end_matches("IB").trim_end_matches('B');
    let (digits, shift) = match stripped.chars().last() {
        Some('K') => (&stripped[..stripped.len() - 1], 10),
        Some('M') => (&stripped[..stripped.len() - 1], 20),
        Some('G') => (&stripped[..stripped.len() - 1], 30),
        _ => (stripped, 0),
    };
    let n: u64 = digits.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    n.checked_shl(shift).filter(|v| v >> shift == n).ok_or_else(|| format!("{s:?} overflows"))
}

fn sidecar(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SIDECAR_NAME)
    } else {
        path.to_path_buf()
    }
}

fn open(path: &Path) -> Result<Arc<Dataset>> {
    let p = sidecar(path);
    Ok(Arc::new(Dataset::open(&p).with_context(|| format!("opening {}", p.display()))?))
}

fn stats_json(s: &JobStats) -> Value {
    json!({
        "partitions": s.partitions,
        "partials": s.partials,
        "bytes": s.bytes,
        "wall_s": s.wall.as_secs_f64(),
        "mib_per_s": s.mib_per_s(),
        "first_partial_ms": s.first_partial.map(|d| d.as_secs_f64() * 1e3),
    })
}

fn dataset_json(ds: &Dataset) -> Value {
    let d = &ds.descriptor;
    json!({
        "sidecar": ds.sidecar_path,
        "dtype": d.dtype.as_str(),
        "scan_shape": d.scan_shape,
        "sig_shape": d.sig_shape,
        "partitions": d.partitions.len(),
        "total_bytes": d.total_bytes(),
    })
}

fn print_dataset(format: Format, verb: &str, ds: &Dataset) {
    match format {
        Format::Machine => println!("{}", dataset_json(ds)),
        Format::Text => {
            let d = &ds.descriptor;
            println!(
                "{verb} {}: {} scan {:?} sig {:?}, {} partitions, {} bytes",
                ds.root.display(),
                d.dtype,
                d.scan_shape,
                d.sig_shape,
                d.partitions.len(),
                d.total_bytes()
            );
        }
    }
}

fn cmd_ingest(a: IngestArgs, format: Format) -> Result<()> {
    let layout = SourceLayout {
        dtype: a.dtype,
        scan_shape: a.scan_shape.0,
        sig_shape: a.sig_shape.0,
    };
    let ds = ingest(&a.input, &layout, &a.out, a.partition_size)
        .with_context(|| format!("ingesting {}", a.input.display()))?;
    print_dataset(format, "ingested", &ds);
    Ok(())
}

fn cmd_synth(a: SynthArgs, format: Format) -> Result<()> {
    let base = open(&a.base)?;
    let ds = generate_synthetic(&base, a.repeats, &a.out, a.partition_size)
        .context("generating synthetic dataset")?;
    print_dataset(format, "generated", &ds);
    Ok(())
}

fn cmd_run(a: RunArgs, format: Format) -> Result<()> {
    let ds = open(&a.dataset)?;
    let spec = a.analysis.spec()?;
    let opts = RunOptions {
        engine: a.engine.config(None),
        timeout: a.timeout.map(Duration::from_secs_f64),
    };
    let result = run_dataset(Arc::clone(&ds), &spec, &opts)?;
    let grid = &result.grid;
    grid.export(&a.out)
        .with_context(|| format!("writing result to {}", a.out.display()))?;
    if let Some(com) = &result.com {
        let body = json!({
            "scan_shape": com.scan_shape,
            "com_x": com.com_x,
            "com_y": com.com_y,
            "valid": com.valid,
        });
        std::fs::write(a.out.join("com.json"), body.to_string()).context("writing com.json")?;
    }
    if let Some(png) = &a.png {
        render::write_png(grid, a.png_channel, png)?;
    }
    match format {
        Format::Machine => println!(
            "{}",
            json!({
                "dataset": dataset_json(&ds),
                "analysis": spec,
                "out": a.out,
                "labels": grid.labels(),
                "shape": grid.shape(),
                "checksums": grid.checksums(),
                "png": a.png,
                "stats": stats_json(&result.stats),
            })
        ),
        Format::Text => {
            println!("wrote {} ({:?}, channels {})", a.out.display(), grid.shape(), grid.labels().join(","));
            for (label, c) in grid.labels().iter().zip(grid.checksums()) {
                println!("  checksum {label}: {c}");
            }
            println!(
                "  {} partitions in {:.3} s, {:.1} MiB/s",
                result.stats.partitions,
                result.stats.wall.as_secs_f64(),
                result.stats.mib_per_s()
            );
        }
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs, format: Format) -> Result<()> {
    let mut config = ServerConfig::from_env(a.engine.config(None));
    config.grace = Duration::from_secs_f64(a.grace);
    let state = AppState::new(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        let addr = listener.local_addr()?;
        match format {
            Format::Machine => println!("{}", json!({ "listening": format!("http://{addr}") })),
            Format::Text => println!("listening on http://{addr}"),
        }
        virt4d_server::serve(listener, state).await?;
        Ok(())
    })
}

fn print_report(r: &BenchReport) {
    println!(
        "{} ({}, {} bytes, {} frames), cache {:?}, {} physical / {} logical cores",
        r.dataset, r.dtype, r.total_bytes, r.frames, r.cache_state, r.physical_cores, r.logical_cores
    );
    println!("workers  backend          median_s    MiB/s   values/s  first_ms  speedup  jitter");
    for row in &r.rows {
        println!(
            "{:>7}  {:<15} {:>9.4} {:>8.1} {:>10.3e} {:>9.1} {:>8.2} {:>6.3}{}",
            row.workers,
            row.backend,
            row.median_wall_s,
            row.mib_per_s,
            row.values_per_s,
            row.first_partial_ms,
            row.speedup,
            row.jitter,
            if row.jitter_flagged { "  (jitter above bound)" } else { "" }
        );
    }
}

fn cmd_bench(a: BenchArgs, format: Format) -> Result<()> {
    let ds = open(&a.dataset)?;
    let spec = a.analysis.spec()?;
    if a.workers.0.contains(&0) {
        bail!("worker counts must be positive");
    }
    let config = BenchConfig {
        workers: a.workers.0,
        backend: a.backend,
        tiling: a.tile_size.map(|t| TilingPlan::new(t as usize)).unwrap_or_default(),
        cache_state: match a.cache {
            Cache::Warm => CacheState::Warm,
            Cache::Cold => CacheState::Cold,
        },
        repeats: a.repeats,
        jitter_bound: a.jitter_bound,
    };
    let report = run_benchmark(ds, &spec, &config)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.report {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    match format {
        Format::Machine => println!("{text}"),
        Format::Text => print_report(&report),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let format = cli.format;
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a, format),
        Command::Run(a) => cmd_run(a, format),
        Command::Serve(a) => cmd_serve(a, format),
        Command::Bench(a) => cmd_bench(a, format),
        Command::Synth(a) => cmd_synth(a, format),
        Command::Worker(a) => worker_main(&a.connect, &a.node, a.slot).map_err(Into::into),
    };
    if let Err(e) = result {
        let msg = error_message(&e);
        match format {
            Format::Machine => eprintln!("{}", json!({ "error": msg })),
            Format::Text => eprintln!("error: {msg}"),
        }
        std::process::exit(1);
    }
}

/// Context chain joined by `: `; library errors already print their source,
/// so causes repeated verbatim are dropped.
fn error_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096").unwrap(), 4096);
        assert_eq!(parse_size("256M").unwrap(), 256 << 20);
        assert_eq!(parse_size("1GiB").unwrap(), 1 << 30);
        assert_eq!(parse_size("64kb").unwrap(), 64 << 10);
        assert!(parse_size("12Q").is_err());
        assert!(parse_size("99999999999999G").is_err());
    }

    #[test]
    fn float_lists() {
        assert_eq!(parse_floats::<3>("1, 2.5,3").unwrap(), [1.0, 2.5, 3.0]);
        assert!(parse_floats::<3>("1,2").is_err());
    }

    #[test]
    fn cli_definition() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
