//! End-to-end runs of the `musicrep` binary: the desk pipeline script at
//! reduced scale, provenance sidecars, determinism and failure reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use musicrep::catalog::{synth_track, SynthConfig};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_musicrep");

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Overrides shrinking the desk config to a few seconds of work.
const SMALL: &[&str] = &[
    "synth.n_tracks=40",
    "synth.duration_range=[4.0, 6.0]",
    "model.encoder.widths=[8, 16]",
    "model.encoder.strides=[4, 2]",
    "model.projector.hidden_width=32",
    "model.projector.output_dim=16",
    "pretrain.batch_size=8",
    "pretrain.schedule.warmup_steps=3",
    "pretrain.schedule.total_steps=30",
    "pretrain.checkpoint_every=10",
    "probe.total_steps=200",
    "probe.warmup_steps=20",
];

fn overrides() -> Vec<String> {
    SMALL.iter().flat_map(|o| ["--override".to_string(), o.to_string()]).collect()
}

fn pipeline(out: &Path) {
    let status = Command::new("sh")
        .arg(root().join("scripts/desk_pipeline.sh"))
        .arg(out)
        .args(overrides())
        .env("MUSICREP", BIN)
        .env("CONFIG", root().join("configs/desk.toml"))
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success(), "pipeline failed");
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn desk_pipeline_runs_end_to_end_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&a);

    for artifact in [
        "synth/manifest.jsonl",
        "features/manifest.jsonl",
        "stats/label_counts.csv",
        "stats/labels_per_item.csv",
        "pretrain/checkpoint_0000010.mck",
        "pretrain/checkpoint_0000030.mck",
        "pretrain/last.mck",
        "pretrain/loss.csv",
        "embed/embeddings.mae",
        "probe/probe.json",
        "probe/report.json",
        "eval/metrics.json",
        "report/results.csv",
        "report/results.md",
    ] {
        let path = a.join(artifact);
        assert!(path.exists(), "missing {artifact}");
        let meta = json(&PathBuf::from(format!("{}.meta.json", path.display())));
        assert_eq!(meta["seed"], 17, "{artifact}");
        assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64, "{artifact}");
        assert_eq!(meta["tool_version"], env!("CARGO_PKG_VERSION"));
    }
    assert_eq!(fs::read_to_string(a.join("pretrain/loss.csv")).unwrap().lines().count(), 31);

    let report = json(&a.join("probe/report.json"));
    let metrics = json(&a.join("eval/metrics.json"));
    assert_eq!(report["task"], "pitch");
    assert_eq!(report["model_tag"], "synth-ularge");
    assert_eq!(report["accuracy"], metrics["accuracy"]);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let csv = fs::read_to_string(a.join("report/results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("task,metric,value,model_tag"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with("pitch,accuracy,") && r.ends_with(",synth-ularge")));

    // Same config hash and seed: rerun into the same directory from scratch.
    let kept = ["probe/report.json", "eval/metrics.json", "embed/embeddings.mae", "pretrain/last.mck"];
    let first: Vec<Vec<u8>> = kept.iter().map(|k| fs::read(a.join(k)).unwrap()).collect();
    fs::rename(&a, &b).unwrap();
    pipeline(&a);
    for (artifact, bytes) in kept.iter().zip(&first) {
        assert_eq!(&fs::read(a.join(artifact)).unwrap(), bytes, "{artifact}");
    }
    assert_eq!(
        json(&a.join("probe/report.json.meta.json"))["config_hash"],
        json(&b.join("probe/report.json.meta.json"))["config_hash"]
    );
}

#[test]
fn stats_reproduces_synthetic_label_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let config = root().join("configs/desk.toml");
    let run = |args: &[&str]| {
        let st = Command::new(BIN)
            .args(args)
            .arg("--config")
            .arg(&config)
            .args(["--override", "synth.n_tracks=60", "--override", "synth.duration_range=[3.5, 4.0]"])
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(st.success());
    };
    let synth_out = out.join("synth");
    run(&["synth", "--seed", "5", "--out", synth_out.to_str().unwrap()]);
    let manifest = format!("data.manifest={}", synth_out.join("manifest.jsonl").display());
    run(&["stats", "--seed", "5", "--out", out.join("stats").to_str().unwrap(), "--override", &manifest]);

    let cfg = SynthConfig {
        n_tracks: 60,
        duration_range: [3.5, 4.0],
        seed: 5,
        ..SynthConfig::default()
    };
    let mut expected: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..60 {
        let t = synth_track(&cfg, i).unwrap();
        *expected.entry(format!("pitch:{}", t.pitch)).or_default() += 1;
        *expected.entry(format!("timbre:{}", t.timbre)).or_default() += 1;
    }
    let csv = fs::read_to_string(out.join("stats/label_counts.csv")).unwrap();
    let mut got = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let count: usize = f[2].parse().unwrap();
        assert!((f[3].parse::<f64>().unwrap() - count as f64 / 60.0).abs() < 1e-12);
        got.insert(f[1].to_string(), count);
    }
    assert_eq!(got, expected);
    let per_item = fs::read_to_string(out.join("stats/labels_per_item.csv")).unwrap();
    assert_eq!(per_item, "labels_per_item,items\n0,0\n1,0\n2,60\n");
}

#[test]
fn failures_exit_nonzero_and_mark_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("embed");
    let output = Command::new(BIN)
        .args(["embed", "--config"])
        .arg(root().join("configs/desk.toml"))
        .arg("--out")
        .arg(&out)
        .args(["--override", "data.manifest=/nonexistent/manifest.jsonl"])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error: "));
    assert!(fs::read_to_string(out.join("FAILED")).unwrap().contains("manifest"));
    assert!(!out.join("embeddings.mae").exists());

    let bad_key = Command::new(BIN)
        .args(["stats", "--config"])
        .arg(root().join("configs/desk.toml"))
        .arg("--out")
        .arg(dir.path().join("x"))
        .args(["--override", "probe.no_such_key=1"])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(!bad_key.status.success());
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("no_such_key"));

    let missing_config = Command::new(BIN).args(["stats"]).output().unwrap();
    assert!(!missing_config.status.success());
}
