use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use virt4d_core::dataset::{Dataset, Dtype, SIDECAR_NAME};
use virt4d_core::kernels::AnalysisSpec;
use virt4d_testkit::{max_rel_err, oracle, random_fixture, rng, write_frames, Fixture};

const EXE: &str = env!("CARGO_BIN_EXE_virt4d");
const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/ring_uint12.json");

fn virt4d(args: &[&str]) -> Output {
    Command::new(EXE).args(args).output().expect("running virt4d")
}

fn ok(args: &[&str]) -> String {
    let out = virt4d(args);
    assert!(
        out.status.success(),
        "virt4d {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_f64(path: &Path) -> Vec<f64> {
    std::fs::read(path)
        .unwrap()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fixed fixture behind the golden file.
fn golden_fixture(dir: &Path) -> Fixture {
    random_fixture(dir, &mut rng(2024), Dtype::Uint12PackedLe, &[6, 5], &[16, 16], 7)
}

#[test]
fn run_matches_golden_oracle_file() {
    let dir = tempfile::tempdir().unwrap();
    let fx = golden_fixture(&dir.path().join("ds"));
    let spec = AnalysisSpec::ring(7.5, 7.5, 2.0, 6.0);
    if std::env::var_os("VIRT4D_BLESS").is_some() {
        let want = oracle(&spec, fx.scan_shape(), fx.sig_shape(), &fx.frames);
        let body = serde_json::json!({ "spec": spec, "values": want.values() });
        std::fs::create_dir_all(Path::new(GOLDEN).parent().unwrap()).unwrap();
        std::fs::write(GOLDEN, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    }
    let golden: Value = serde_json::from_str(&std::fs::read_to_string(GOLDEN).unwrap()).unwrap();
    assert_eq!(golden["spec"], serde_json::to_value(&spec).unwrap());
    let want: Vec<f64> = golden["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();

    let out = dir.path().join("out");
    let png = dir.path().join("ring.png");
    ok(&[
        "run", s(&dir.path().join("ds")), "--ring", "7.5,7.5,2,6", "--out", s(&out), "--png", s(&png),
        "--workers", "2",
    ]);
    let got = read_f64(&out.join("result.raw"));
    assert_eq!(got.len(), 30);
    assert!(max_rel_err(&got, &want) <= 1e-4, "{got:?}");

    let result = Dataset::open(out.join(SIDECAR_NAME)).unwrap();
    assert_eq!(result.descriptor.dtype, Dtype::Float64Le);
    assert_eq!(result.descriptor.scan_shape, vec![6, 5]);
    assert_eq!(result.metadata["channels"], "ring0");
    let img = image::open(&png).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (5, 6));
}

#[test]
fn ingest_then_run_equals_preingested() {
    let dir = tempfile::tempdir().unwrap();
    let fx = golden_fixture(&dir.path().join("pre"));
    let raw = dir.path().join("scan.raw");
    std::fs::write(&raw, &fx.raw).unwrap();
    let ingested = dir.path().join("ingested");
    let report = ok(&[
        "--format", "machine", "ingest", s(&raw), "--dtype", "uint12_packed_le", "--scan-shape", "6,5",
        "--sig-shape", "16,16", "--out", s(&ingested), "--partition-size", "2K",
    ]);
    let report: Value = serde_json::from_str(report.trim()).unwrap();
    assert_eq!(report["partitions"], 6); // 5 frames of 384 B per 2 KiB partition
    for backend in ["mmap", "buffered", "direct"] {
        let a = dir.path().join(format!("a-{backend}"));
        let b = dir.path().join(format!("b-{backend}"));
        for (src, out) in [(&ingested, &a), (&dir.path().join("pre"), &b)] {
            ok(&["run", s(src), "--com", "--out", s(out), "--backend", backend, "--tile-size", "1000"]);
        }
        assert_eq!(std::fs::read(a.join("result.raw")).unwrap(), std::fs::read(b.join("result.raw")).unwrap());
        let com: Value = serde_json::from_str(&std::fs::read_to_string(a.join("com.json")).unwrap()).unwrap();
        assert_eq!(com["com_x"].as_array().unwrap().len(), 30);
    }
}

#[test]
fn bench_reports_every_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    golden_fixture(dir.path());
    let report = dir.path().join("report.json");
    let stdout = ok(&[
        "--format", "machine", "bench", s(dir.path()), "--ring", "7.5,7.5,2,6", "--workers", "1,2,4",
        "--repeats", "2", "--report", s(&report),
    ]);
    let r: Value = serde_json::from_str(&stdout).unwrap();
    let workers: Vec<u64> = r["rows"].as_array().unwrap().iter().map(|row| row["workers"].as_u64().unwrap()).collect();
    assert_eq!(workers, vec![1, 2, 4]);
    for row in r["rows"].as_array().unwrap() {
        assert_eq!(row["wall_s"].as_array().unwrap().len(), 2);
        assert!(row["backend"].as_str().unwrap().starts_with("auto:"));
    }
    assert_eq!(r["cache_state"], "warm");
    let written: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(written, r);

    let text = ok(&["bench", s(dir.path()), "--sum", "--workers", "1", "--repeats", "1", "--backend", "buffered"]);
    assert!(text.contains("buffered"), "{text}");
}

#[test]
fn synth_and_other_analyses() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_frames(
        &dir.path().join("base"),
        Dtype::Uint16Le,
        &[2, 3],
        &[4, 4],
        (0..6).map(|f| (0..16).map(|p| (f * 16 + p) as f64).collect()).collect(),
        64,
    );
    assert_eq!(fx.dataset.descriptor.partitions.len(), 3);
    ok(&["synth", s(&dir.path().join("base")), "--repeats", "3", "--out", s(&dir.path().join("syn"))]);
    let syn = Dataset::open(dir.path().join("syn").join(SIDECAR_NAME)).unwrap();
    assert_eq!(syn.descriptor.scan_shape, vec![6, 3]);

    let out = dir.path().join("pick");
    ok(&["run", s(&dir.path().join("syn")), "--pick", "4,1", "--out", s(&out)]);
    // frame 13 of the tiled data is base frame 13 mod 6 = 1
    assert_eq!(read_f64(&out.join("result.raw")), (16..32).map(f64::from).collect::<Vec<_>>());

    let out = dir.path().join("sum");
    ok(&["run", s(&dir.path().join("syn")), "--sum", "--out", s(&out), "--png", s(&dir.path().join("sum.png"))]);
    let sum = read_f64(&out.join("result.raw"));
    assert_eq!(sum[0], 3.0 * (0..6).map(|f| f as f64 * 16.0).sum::<f64>());
    assert_eq!(image::open(dir.path().join("sum.png")).unwrap().to_luma8().dimensions(), (4, 4));

    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"type":"mask_apply","masks":[{"shape":"ones"},{"shape":"point","x":1,"y":2}]}"#).unwrap();
    let out = dir.path().join("masks");
    ok(&["run", s(&dir.path().join("base")), "--spec", &format!("@{}", s(&spec)), "--out", s(&out)]);
    let v = read_f64(&out.join("result.raw"));
    assert_eq!(&v[..2], &[(0..16).sum::<i32>() as f64, 9.0]);
}

#[test]
fn failures_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    golden_fixture(dir.path());
    let out = virt4d(&["run", s(&dir.path().join("missing")), "--sum", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: opening"));

    let out = virt4d(&["--format", "machine", "run", s(dir.path()), "--ring", "5,5,4,1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("exceeds outer radius"), "{err}");

    // conflicting analyses are a usage error
    let out = virt4d(&["run", s(dir.path()), "--sum", "--com", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = virt4d(&["run", s(dir.path()), "--sum", "--backend", "floppy", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    // deleting a partition fails the run and names it
    std::fs::remove_file(dir.path().join("part-00002.raw")).unwrap();
    let out = virt4d(&["run", s(dir.path()), "--sum", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("partition 2"));
}

#[test]
fn serve_respects_data_root() {
    let dir = tempfile::tempdir().unwrap();
    golden_fixture(&dir.path().join("root/ds"));
    golden_fixture(&dir.path().join("elsewhere"));
    let mut child = Command::new(EXE)
        .args(["--format", "machine", "serve", "--port", "0", "--workers", "1"])
        .env("VIRT4D_DATA_ROOT", dir.path().join("root"))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = serde_json::from_str::<Value>(&line).unwrap()["listening"].as_str().unwrap().to_string();

    let rt = tokio::runtime::Runtime::new().unwrap();
    let statuses = rt.block_on(async {
        let http = reqwest::Client::new();
        let mut codes = Vec::new();
        for p in [dir.path().join("root/ds"), dir.path().join("elsewhere")] {
            let r = http
                .post(format!("{url}/api/datasets/open"))
                .json(&serde_json::json!({ "path": p }))
                .send()
                .await
                .unwrap();
            codes.push(r.status().as_u16());
        }
        codes
    });
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(statuses, vec![200, 403]);
}
