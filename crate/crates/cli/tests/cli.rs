use std::path::Path;
use std::process::{Command, Output};

use eom_core::planner::{CandidateStep, CandidateTrajectory};
use eom_core::{CriticalRegion, DatasetSpec, GeneratorConfig, Horizon, MetricsConfig, NetConfig, RunConfig};

fn eom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eom")).current_dir(dir).args(args).output().expect("spawn eom")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = eom(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn gen_scenes_writes_one_file_per_scene_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-scenes", "--n", "10", "--seed", "7", "--out", "a", "--desk"]);
    ok(d, &["gen-scenes", "--n", "10", "--seed", "7", "--out", "b", "--desk"]);
    let names = files(&d.join("a"));
    assert_eq!(names.len(), 10);
    assert!(names.iter().all(|n| n.ends_with(".json")));
    for n in &names {
        assert_eq!(std::fs::read(d.join("a").join(n)).unwrap(), std::fs::read(d.join("b").join(n)).unwrap());
    }
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(eom(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(eom(d, &["gen-scenes", "--n", "ten", "--out", "x"]).status.code(), Some(1));
    assert_eq!(eom(d, &["gen-scenes", "--n", "0", "--out", "x"]).status.code(), Some(1));
    assert_eq!(eom(d, &["baseline", "--scenes", "s", "--out", "o", "--model", "warp"]).status.code(), Some(1));
    assert_eq!(eom(d, &["eval", "--gt-dir", "g", "--desk"]).status.code(), Some(1));
    assert_eq!(eom(d, &["--help"]).status.code(), Some(0));
    assert_eq!(eom(d, &["train", "--help"]).status.code(), Some(0));
    // missing input directory is a data error
    assert_eq!(eom(d, &["gt", "--scenes", "nope", "--out", "g", "--desk"]).status.code(), Some(2));
}

#[test]
fn pipeline_reports_finite_baseline_and_exact_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-scenes", "--n", "6", "--seed", "3", "--out", "scenes", "--desk"]);
    ok(d, &["gt", "--scenes", "scenes", "--out", "gt", "--desk"]);
    ok(d, &["baseline", "--scenes", "scenes", "--out", "cv", "--model", "cv", "--desk"]);
    let stdout = ok(d, &["--json", "eval", "--pred-dir", "cv", "--gt-dir", "gt", "--desk", "--out", "report"]);
    let rows: serde_json::Value = serde_json::from_str(stdout.trim()).expect("stdout is JSON only");
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["missing_rate"].as_f64().unwrap().is_finite());
    assert_eq!(rows[1]["predictor"], "ground-truth-oracle");
    assert_eq!(rows[1]["missing_rate"].as_f64(), Some(0.0));
    let csv = std::fs::read_to_string(d.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(d.join("report/report.json").exists());

    // same seed, same predictions
    ok(d, &["baseline", "--scenes", "scenes", "--out", "cv2", "--model", "cv", "--desk", "--inject-lambda", "2", "--seed", "5"]);
    ok(d, &["baseline", "--scenes", "scenes", "--out", "cv3", "--model", "cv", "--desk", "--inject-lambda", "2", "--seed", "5"]);
    for n in files(&d.join("cv2")) {
        assert_eq!(std::fs::read(d.join("cv2").join(&n)).unwrap(), std::fs::read(d.join("cv3").join(&n)).unwrap());
    }

    ok(d, &["rasterize", "--scenes", "scenes", "--out", "rasters", "--desk"]);
    assert_eq!(files(&d.join("rasters")).len(), 12);
    let first = files(&d.join("gt")).into_iter().find(|n| n.ends_with(".eom.grid")).unwrap();
    ok(d, &["viz", "--grid", &format!("gt/{first}"), "--out", "eom.pgm"]);
    assert!(std::fs::read(d.join("eom.pgm")).unwrap().starts_with(b"P5\n100 100\n255\n"));
}

#[test]
fn mismatched_scene_ids_are_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-scenes", "--n", "3", "--seed", "1", "--out", "s1", "--desk"]);
    ok(d, &["gen-scenes", "--n", "3", "--seed", "2", "--out", "s2", "--desk"]);
    ok(d, &["gt", "--scenes", "s1", "--out", "gt", "--desk"]);
    ok(d, &["baseline", "--scenes", "s2", "--out", "pred", "--model", "ca", "--desk"]);
    let out = eom(d, &["eval", "--pred-dir", "pred", "--gt-dir", "gt", "--desk"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("synth-2-00000"), "{err}");
}

#[test]
fn filter_reports_safe_and_unsafe_candidates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut grid = eom_core::Grid::filled(10, 10, 30.0f32);
    grid.set(5, 5, 2.0);
    eom_core::io::write_grid(&grid, &d.join("p.grid")).unwrap();
    let step = |dt, r, c| CandidateStep { dt, footprint: vec![[r, c]] };
    let cands = vec![
        CandidateTrajectory { id: "left".into(), steps: vec![step(1, 9, 1), step(2, 8, 1)] },
        CandidateTrajectory { id: "through".into(), steps: vec![step(1, 6, 5), step(3, 5, 5)] },
    ];
    eom_core::io::write_json(&cands, &d.join("c.json")).unwrap();
    let out = ok(d, &["filter", "--eom", "p.grid", "--trajs", "c.json", "--margin", "0", "--json"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["safe"], serde_json::json!(["left"]));
    assert_eq!(v["unsafe"][0]["id"], "through");
    assert_eq!(v["unsafe"][0]["conflict"]["dt"], 3);
    // out-of-grid footprints are data errors
    let bad = vec![CandidateTrajectory { id: "off".into(), steps: vec![step(1, 40, 1)] }];
    eom_core::io::write_json(&bad, &d.join("bad.json")).unwrap();
    assert_eq!(eom(d, &["filter", "--eom", "p.grid", "--trajs", "bad.json"]).status.code(), Some(2));
}

#[test]
fn train_then_evaluate_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut gen = GeneratorConfig::default();
    gen.region = CriticalRegion::new(-8, 7, -4, 11, 2.0).unwrap();
    gen.horizon = Horizon::new(10, 10, 10).unwrap();
    let config = RunConfig {
        dataset: DatasetSpec { generator: gen, train_scenes: 4, val_scenes: 2, seed: 3, history_hz: 2 },
        net: NetConfig { base_channels: 2, dilation_rates: vec![2], output_scale: 10.0, ..NetConfig::default() },
        batch_size: 2,
        epochs: 2,
        metrics: MetricsConfig { horizon: 10, aggressiveness_constant: 11.0, ..MetricsConfig::default() },
        ..RunConfig::desk()
    };
    eom_core::io::write_json(&config, &d.join("config.json")).unwrap();
    ok(d, &["train", "--config", "config.json", "--out", "run", "--no-hard"]);
    for f in ["config.json", "log.csv", "report.csv", "report.json", "checkpoints/epoch_1", "checkpoints/epoch_2"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(d.join("run/log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,L_rec,L_h,L_s,L_u,total"));
    assert!(log.lines().skip(1).all(|l| l.split(',').nth(3) == Some("0")));

    let geo = [
        "--resolution-m-per-px", "2", "--side-m", "16", "--behind-m", "8", "--ahead-m", "24",
        "--history-frames", "10", "--future-frames", "10",
    ];
    fn with<'a>(base: &[&'a str], geo: &[&'a str]) -> Vec<&'a str> {
        base.iter().chain(geo).copied().collect()
    }
    ok(d, &with(&["gen-scenes", "--n", "3", "--seed", "9", "--out", "s"], &geo));
    ok(d, &with(&["gt", "--scenes", "s", "--out", "g"], &geo));
    let args = with(&[
        "--json", "eval", "--checkpoint", "run/checkpoints/epoch_2", "--scenes", "s", "--gt-dir", "g",
        "--aggressiveness-constant", "11",
    ], &geo);
    let a = ok(d, &args);
    let b = ok(d, &args);
    assert_eq!(a, b);
    let rows: serde_json::Value = serde_json::from_str(a.trim()).unwrap();
    assert!(rows[0]["missing_rate"].as_f64().unwrap().is_finite());
}
