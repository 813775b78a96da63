use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use radar_hqnn::experiment::SceneFile;
use radar_hqnn::scene::{Actor, Scene, SceneKind, Vec3};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radar-hqnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn po_plate_selftest_passes() {
    let o = bin(&["selftest", "po-plate"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rel err"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["train", "--seed", "abc"]).status.code(), Some(1));
    assert_eq!(bin(&["train", "--variant", "resnet"]).status.code(), Some(1));
    assert_eq!(bin(&["simulate", "--frames-per-cell", "0"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["eval", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.csv"));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "epochs = 0\n").unwrap();
    assert_eq!(bin(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    fs::write(&cfg, "epochs = [\n").unwrap();
    assert_eq!(bin(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let common = [
        "--out",
        &out,
        "--frames-per-cell",
        "6",
        "--epochs",
        "1",
        "--variant",
        "compact-cnn,hqnn",
        "--seeds",
        "1,2",
        "--snrs",
        "-20,10",
        "--mode",
        "analytic",
    ];
    for cmd in ["simulate", "train", "eval", "report"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        let o = bin(&args);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let report = fs::read_to_string(dir.path().join("eval/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "variant,domain,snr_db,seed,acc,ba,macro_f1,rec_pop");
    // 2 variants x 2 seeds x (clean + 2 snrs)
    assert_eq!(lines.len(), 1 + 12);
    let summary = fs::read_to_string(dir.path().join("report/summary.txt")).unwrap();
    assert!(summary.contains("Gaps:\nnone"));
    assert!(dir.path().join("report/plot_hqnn_ba.dat").exists());
    assert!(dir.path().join("models/hqnn_s1_f1.00.runtime.txt").exists());
}

#[test]
fn scene_file_renders() {
    let dir = tempfile::tempdir().unwrap();
    let walker = Actor::straight_walk(Vec3::new(3.0, 1.0, 0.0), Vec3::new(5.0, 1.0, 0.0), 1.0, 0.0, 0.0);
    let sf = SceneFile {
        scene: Scene::preset(SceneKind::Corridor).with_actors(vec![walker]),
        frames: 2,
        start_time: 0.0,
    };
    let path = dir.path().join("scene.toml");
    fs::write(&path, sf.to_toml().unwrap()).unwrap();
    let o = bin(&["simulate", "--out", &out_arg(dir.path()), "--scene", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("scene/frames/001.rdm").exists());
    assert!(dir.path().join("scene/manifest.csv").exists());
}
