use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pm_gmrf::io::read_dataset;
use pm_gmrf::synth::{simulate, SimConfig};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pm-gmrf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Desk panels are far below the default retention thresholds.
const KEEP_ALL: [&str; 4] = ["--set", "min_per_day=1", "--set", "min_per_station=1"];

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small simulated panel on disk.
fn panel(dir: &Path, stations: usize, days: usize) -> PathBuf {
    let out = dir.join("sim");
    ok(&[
        "simulate",
        "--output",
        s(&out),
        "--set",
        &format!("sim_stations={stations}"),
        "--set",
        &format!("sim_days={days}"),
        "--seed",
        "7",
    ]);
    out.join("data.csv")
}

#[test]
fn simulate_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let data = panel(dir.path(), 25, 4);
    let back = read_dataset(fs::File::open(&data).unwrap()).unwrap();
    let (original, _) = simulate(&SimConfig {
        n_stations: 25,
        n_days: 4,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(back, original);
    let m = manifest(&dir.path().join("sim"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 7);
    assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["config"]["sim_stations"], 25);
    assert!(m["versions"]["pm-gmrf"].is_string());
}

#[test]
fn predict_reuses_the_saved_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = panel(dir.path(), 25, 3);
    let out = dir.path().join("run");
    let common = [
        &["--input", s(&data), "--output", s(&out), "--set", "mesh_max_edge=20"][..],
        &KEEP_ALL,
    ]
    .concat();
    let missing = run(&[&["predict"][..], &common[..]].concat());
    assert!(!missing.status.success());
    assert_eq!(manifest(&out)["error"]["kind"], "ConfigError");

    ok(&[&["fit"][..], &common[..]].concat());
    let fits: Vec<Vec<u8>> = ["fit_lmm.json", "fit_gmrf.json"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    ok(&[&["predict"][..], &common[..]].concat());
    let m = manifest(&out);
    assert_eq!(
        m["outputs"],
        serde_json::json!(["predictions_lmm.csv", "predictions_gmrf.csv"])
    );
    for (f, before) in ["fit_lmm.json", "fit_gmrf.json"].iter().zip(&fits) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), before);
    }
    let preds = fs::read_to_string(out.join("predictions_gmrf.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 25 * 3);
    assert!(preds.starts_with("station_id,x,y,day,yhat,fixed,day_part,spatial_part\n"));

    ok(&[&["export-precision", "--day", "2"][..], &common[..]].concat());
    let mtx = fs::read_to_string(out.join("precision_gmrf_day2.mtx")).unwrap();
    assert!(mtx.starts_with("%%MatrixMarket"));
    assert!(out.join("precision_lmm_day2_labels.csv").is_file());
    ok(&[
        &["export-surface", "--set", "raster_nx=6", "--set", "raster_ny=5"][..],
        &common[..],
    ]
    .concat());
    let surface = fs::read_to_string(out.join("surface_lmm_day1.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 30);
}

#[test]
fn cv_table_has_one_row_per_model_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = panel(dir.path(), 30, 3);
    let tables: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            ok(&[
                &[
                    "cv",
                    "--input",
                    s(&data),
                    "--output",
                    s(&out),
                    "--set",
                    "schemes=kfold",
                    "--set",
                    "mesh_max_edge=20",
                ][..],
                &KEEP_ALL,
            ]
            .concat());
            fs::read_to_string(out.join("cv_table.csv")).unwrap()
                + &fs::read_to_string(out.join("cv_folds.csv")).unwrap()
        })
        .collect();
    assert_eq!(tables[0], tables[1]);
    let lines: Vec<&str> = tables[0].lines().collect();
    assert_eq!(lines[0], "model,10-fold RMSE,10-fold R2");
    assert!(lines[1].starts_with("lmm,"));
    assert!(lines[2].starts_with("gmrf,"));
    for cell in lines[1].split(',').skip(1) {
        assert_eq!(cell.split('.').nth(1).map(str::len), Some(2), "{cell}");
    }
}

#[test]
fn sweep_emits_tidy_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&[
        "simulate",
        "--output",
        s(&out),
        "--set",
        "sim_stations=60",
        "--set",
        "sim_days=2",
        "--set",
        "sim_domain_km=1000",
    ]);
    let sweep = dir.path().join("sweep");
    ok(&[
        &[
            "sweep",
            "--input",
            s(&out.join("data.csv")),
            "--output",
            s(&sweep),
            "--set",
            "p=20",
            "--set",
            "h_list=0,50,100",
            "--set",
            "n_iter=2",
            "--set",
            "mesh_max_edge=200",
        ][..],
        &KEEP_ALL,
    ]
    .concat());
    let text = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "h,model,iter,rmse");
    assert_eq!(lines.len(), 1 + 3 * 2 * 2);
    assert!(lines[1].starts_with("0,lmm,0,"));
    let summary = fs::read_to_string(sweep.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
}

#[test]
fn failures_are_single_json_lines_with_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "station_id,x_km,y_km,day,pm25\nA,1,2,1,10\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["fit", "--input", s(&bad), "--output", s(&out)]);
    assert!(!o.status.success());
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let err: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["error"], "SchemaError");
    assert!(err["message"].as_str().unwrap().contains("aod"));
    let m = manifest(&out);
    assert_eq!(m["status"], "error");
    assert_eq!(m["error"]["kind"], "SchemaError");

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("output = {}\nk = 1\n", s(&dir.path().join("cfgout")))).unwrap();
    let o = run(&["cv", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(manifest(&dir.path().join("cfgout"))["error"]["kind"], "ConfigError");

    let o = run(&["nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(String::from_utf8(o.stderr).unwrap().trim()).unwrap();
    assert_eq!(err["error"], "UsageError");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("o");
    fs::write(
        &cfg,
        format!("output = {}\nsim_stations = 12\nsim_days = 2\nseed = 3\n", s(&out)),
    )
    .unwrap();
    ok(&["simulate", "--config", s(&cfg), "--seed", "4", "--set", "sim_days=3"]);
    let m = manifest(&out);
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["sim_days"], 3);
    assert_eq!(m["config"]["sim_stations"], 12);
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in [
        "simulate",
        "fit",
        "predict",
        "cv",
        "sweep",
        "export-precision",
        "export-surface",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
