use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_celltile");

fn celltile(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = celltile(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    celltile(dir, args).status.code().unwrap()
}

/// A 1200x1000 slide with 300 nuclei as `s.tif` and `s.jsonl`.
fn slide(seed: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["synth", "--width", "1200", "--height", "1000", "--nuclei", "300", "--out", "s.tif", "--annotations", "s.jsonl", "--seed", seed],
    );
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn synth_is_seeded() {
    let a = slide("5");
    let b = slide("5");
    let c = slide("6");
    assert_eq!(read(a.path(), "s.jsonl"), read(b.path(), "s.jsonl"));
    assert_eq!(read(a.path(), "s.tif"), read(b.path(), "s.tif"));
    assert_ne!(read(a.path(), "s.jsonl"), read(c.path(), "s.jsonl"));
}

#[test]
fn oracle_detect_then_eval_is_perfect() {
    let d = slide("1");
    let p = d.path();
    let summary = json(&ok(p, &["detect", "s.tif", "--annotations", "s.jsonl", "--tile-size", "512", "--out", "d.jsonl"]));
    assert_eq!(summary["detections"], 300);
    let manifest = json(&String::from_utf8(read(p, "d.jsonl.manifest.json")).unwrap());
    assert_eq!(manifest["detection_count"], 300);
    assert_eq!(manifest["slide"]["sha256"].as_str().unwrap().len(), 64);
    let report = json(&ok(p, &["eval", "--predictions", "d.jsonl", "--annotations", "s.jsonl", "--mpp", "0.25"]));
    assert_eq!(report["detection"]["f1"], 1.0);
    assert_eq!(report["macro_f1"], 1.0);
    let table = ok(p, &["eval", "--predictions", "d.jsonl", "--annotations", "s.jsonl", "--mpp", "0.25", "--out", "r.json"]);
    assert!(table.contains("Detection") && table.contains("Neoplastic"));
    assert_eq!(json(&String::from_utf8(read(p, "r.json")).unwrap()), report);
}

#[test]
fn worker_count_gives_identical_files() {
    let d = slide("2");
    let p = d.path();
    for fmt in ["jsonl", "csv", "geojson"] {
        for w in ["1", "4"] {
            let out = format!("w{w}.{fmt}");
            ok(p, &["detect", "s.tif", "--backend", "jitter", "--annotations", "s.jsonl", "--tile-size", "512", "--workers", w, "--seed", "7", "--out", &out]);
        }
        assert_eq!(read(p, &format!("w1.{fmt}")), read(p, &format!("w4.{fmt}")), "{fmt}");
    }
}

#[test]
fn seed_controls_jitter() {
    let d = slide("3");
    let p = d.path();
    for (name, seed) in [("a.jsonl", "1"), ("b.jsonl", "1"), ("c.jsonl", "2")] {
        ok(p, &["detect", "s.tif", "--backend", "jitter", "--annotations", "s.jsonl", "--seed", seed, "--out", name]);
    }
    assert_eq!(read(p, "a.jsonl"), read(p, "b.jsonl"));
    assert_ne!(read(p, "a.jsonl"), read(p, "c.jsonl"));
}

#[test]
fn external_adapter_matches_oracle() {
    let d = slide("4");
    let p = d.path();
    ok(p, &["detect", "s.tif", "--annotations", "s.jsonl", "--tile-size", "512", "--out", "oracle.jsonl"]);
    ok(
        p,
        &["detect", "s.tif", "--backend", "external", "--tile-size", "512", "--workers", "2", "--out", "ext.jsonl", "--", BIN, "adapter-stub", "--annotations", "s.jsonl", "--max-batch", "3"],
    );
    assert_eq!(read(p, "oracle.jsonl"), read(p, "ext.jsonl"));
    let index = String::from_utf8(read(p, "ext.jsonl.windows.jsonl")).unwrap();
    // 3x3 tiles of 9 windows each
    assert_eq!(index.lines().count(), 81);
}

#[test]
fn adapter_failure_exits_2_with_partial_file() {
    let d = slide("5");
    let p = d.path();
    let out = celltile(p, &["detect", "s.tif", "--backend", "external", "--out", "x.jsonl", "--", "false"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(p.join("x.partial.jsonl").exists());
    assert!(!p.join("x.jsonl").exists());
}

#[test]
fn exit_codes() {
    let d = slide("6");
    let p = d.path();
    assert_eq!(code(p, &["detect", "missing.tif", "--annotations", "s.jsonl", "--out", "x.jsonl"]), 3);
    assert_eq!(code(p, &["detect", "s.tif", "--annotations", "missing.jsonl", "--out", "x.jsonl"]), 3);
    assert_eq!(code(p, &["detect", "--no-such-flag"]), 1);
    assert_eq!(code(p, &["frobnicate"]), 1);
    assert_eq!(code(p, &["detect", "s.tif", "--annotations", "s.jsonl", "--overlap", "63", "--out", "x.jsonl"]), 1);
    assert_eq!(code(p, &["eval", "--predictions", "s.jsonl", "--annotations", "s.jsonl"]), 1);
    assert_eq!(code(p, &["--help"]), 0);
}

#[test]
fn config_file_with_flag_override() {
    let d = slide("7");
    let p = d.path();
    std::fs::write(
        p.join("run.toml"),
        "tile_size = 512\nworker_count = 2\n[detector]\nannotations = \"s.jsonl\"\n[output]\ndetections = \"cfg.jsonl\"\n",
    )
    .unwrap();
    ok(p, &["--config", "run.toml", "detect", "s.tif"]);
    let m = json(&String::from_utf8(read(p, "cfg.jsonl.manifest.json")).unwrap());
    assert_eq!(m["config"]["tile_size"], 512);
    ok(p, &["detect", "s.tif", "--config", "run.toml", "--tile-size", "768", "--out", "flag.jsonl"]);
    let m = json(&String::from_utf8(read(p, "flag.jsonl.manifest.json")).unwrap());
    assert_eq!(m["config"]["tile_size"], 768);
    assert_eq!(m["config"]["worker_count"], 2);
    assert_eq!(read(p, "cfg.jsonl"), read(p, "flag.jsonl"));
    std::fs::write(p.join("bad.toml"), "tile_sise = 512\n").unwrap();
    assert_eq!(code(p, &["--config", "bad.toml", "detect", "s.tif", "--out", "x.jsonl"]), 1);
}

#[test]
fn mask_and_tiles() {
    let d = slide("8");
    let p = d.path();
    let stats = json(&ok(p, &["mask", "s.tif", "--out", "m.png"]));
    assert!(p.join("m.png").exists());
    assert!(stats["coverage"].as_f64().unwrap() > 0.9);
    ok(p, &["tiles", "s.tif", "--tile-size", "512", "--out", "tiles.json"]);
    let grid = json(&String::from_utf8(read(p, "tiles.json")).unwrap());
    assert_eq!(grid["tile_size"], 512);
    assert_eq!(grid["origins"].as_array().unwrap().len(), 9);
    assert_eq!(grid["x_axis"], serde_json::json!([0, 448, 688]));
    assert_eq!(grid["y_axis"], serde_json::json!([0, 448, 488]));
}

#[test]
fn sweep_prefers_a_threshold_inside_the_grid() {
    let d = slide("9");
    let p = d.path();
    ok(p, &["detect", "s.tif", "--backend", "jitter", "--annotations", "s.jsonl", "--out", "j.jsonl"]);
    let r = json(&ok(p, &["sweep-threshold", "--predictions", "j.jsonl", "--annotations", "s.jsonl", "--mpp", "0.25", "--step", "0.1"]));
    let tau = r["best_tau"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tau));
    assert_eq!(r["curve"].as_array().unwrap().len(), 11);
    assert!(r["best_score"].as_f64().unwrap() > 0.5);
}

#[test]
fn bench_writes_split_timings() {
    let d = slide("10");
    let p = d.path();
    let fit = json(&ok(p, &["bench", "s.tif", "--synthetic", "768", "--tile-size", "512", "--out", "b.csv"]));
    assert!(fit["total"]["slope"].is_number());
    let csv = String::from_utf8(read(p, "b.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "slide,area_mm2,preprocess_s,inference_s,postprocess_s,total_s,throughput_mm2_per_s,detections"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("s.tif,") && rows[0].ends_with(",300"));
    assert!(rows[1].starts_with("synthetic-768,"));
}
