use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gf4d::io::{load_checkpoint, read_flo4};

fn gf4d(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gf4d"))
        .args(args)
        .current_dir(cwd)
        .env("GF4D_THREADS", "1")
        .output()
        .expect("spawn gf4d")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(cwd: &Path, name: &str, frames: usize) {
    let f = format!("frames={frames}");
    ok(&gf4d(
        &["synth", name, "--set", &f, "--set", "width=32", "--set", "height=32", "--set", "gaussians=4"],
        cwd,
    ));
}

const TINY: [&str; 6] = ["--set", "static_iters=6", "--set", "coarse_iters=6", "--set", "refine_iters=4"];

#[test]
fn synth_refuses_non_empty_dir_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("ws")).unwrap();
    fs::write(tmp.path().join("ws/keep.txt"), "x").unwrap();
    let out = gf4d(&["synth", "ws", "--set", "frames=2"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    let out = gf4d(&["synth", "ws", "--force", "--set", "frames=2", "--set", "width=32", "--set", "height=32"], tmp.path());
    ok(&out);
    assert!(tmp.path().join("ws/keep.txt").exists());
    assert!(tmp.path().join("ws/inputs/sequence.txt").exists());
}

#[test]
fn single_frame_scene_has_no_flows() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "ws", 1);
    let inputs = tmp.path().join("ws/inputs");
    assert!(inputs.join("frames").exists());
    assert!(!inputs.join("flows_fwd").exists());
    assert!(!inputs.join("flows_bwd").exists());
}

#[test]
fn manifest_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", 3);
    synth(tmp.path(), "b", 3);
    let a = fs::read_to_string(tmp.path().join("a/manifest.txt")).unwrap();
    let b = fs::read_to_string(tmp.path().join("b/manifest.txt")).unwrap();
    assert_eq!(a, b);
    assert!(a.lines().any(|l| l.ends_with("inputs/cameras.txt")));
    for line in a.lines() {
        let (hash, _) = line.split_once("  ").unwrap();
        assert_eq!(hash.len(), 64);
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "ws", 2);
    let out = gf4d(&["train", "ws", "--set", "no_such_key=1"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = gf4d(&["train", "ws", "--set", "static_iters=many"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("static_iters"));
    let out = gf4d(&["train", "ws", "--bogus-flag"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn held_lock_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "ws", 2);
    fs::write(tmp.path().join("ws/.gf4d.lock"), "1").unwrap();
    let out = gf4d(&["train", "ws"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gf4d(&["train", "nowhere"], tmp.path());
    assert_eq!(code(&out), 3);
    assert!(!tmp.path().join("nowhere").exists());
    synth(tmp.path(), "ws", 2);
    let out = gf4d(&["train", "ws", "--stage", "coarse"], tmp.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("static.gf4d"));
    let out = gf4d(&["render", "ws", "--view", "1", "--time", "1"], tmp.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn non_finite_loss_aborts_with_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "ws", 2);
    let out = gf4d(&["train", "ws", "--stage", "static", "--set", "weight_rgb=inf"], tmp.path());
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical abort"));
    load_checkpoint(&tmp.path().join("ws/checkpoints/abort.gf4d")).unwrap();
}

#[test]
fn effective_config_is_logged() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "ws", 2);
    fs::write(tmp.path().join("cfg.txt"), "static_iters=3\nseed=9\n").unwrap();
    let out = gf4d(&["train", "ws", "--stage", "static", "--config", "cfg.txt", "--set", "static_iters=2"], tmp.path());
    ok(&out);
    let log = fs::read_to_string(tmp.path().join("ws/logs/train.log")).unwrap();
    assert!(log.contains("# static_iters=2"));
    assert!(log.contains("# seed=9"));
    assert_eq!(log.lines().filter(|l| l.starts_with("iter=")).count(), 2);
}

#[test]
fn resume_matches_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", 3);
    synth(tmp.path(), "b", 3);
    let mut straight = vec!["train", "a", "--stage", "all", "--steps", "4", "--tau", "2", "--interval", "2"];
    straight.extend(TINY);
    ok(&gf4d(&straight, tmp.path()));
    let mut halted = vec!["train", "b", "--stage", "all", "--steps", "4", "--tau", "2", "--interval", "2"];
    halted.extend(TINY);
    halted.extend(["--halt-after", "4", "--checkpoint-every", "3"]);
    for _ in 0..5 {
        ok(&gf4d(&halted, tmp.path()));
    }
    for stage in ["static", "coarse", "refine"] {
        let a = fs::read(tmp.path().join(format!("a/checkpoints/{stage}.gf4d"))).unwrap();
        let b = fs::read(tmp.path().join(format!("b/checkpoints/{stage}.gf4d"))).unwrap();
        assert!(a == b, "{stage} checkpoints differ");
    }
    let a = fs::read_to_string(tmp.path().join("a/manifest.txt")).unwrap();
    let b = fs::read_to_string(tmp.path().join("b/manifest.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn render_eval_and_regenerate_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "ws", 3);
    let mut args = vec!["train", "ws", "--stage", "all", "--steps", "4", "--tau", "2", "--interval", "2"];
    args.extend(TINY);
    ok(&gf4d(&args, tmp.path()));
    let ws = tmp.path().join("ws");

    ok(&gf4d(&["render", "ws", "--view", "2", "--time", "2", "--flow-to", "2"], tmp.path()));
    for suffix in [".png", "_mask.png", "_depth.pfm", "_normal.pfm", "_flow_to002.flo4"] {
        assert!(ws.join(format!("renders/frame002_view2{suffix}")).exists(), "{suffix}");
    }
    let flow = read_flo4(&ws.join("renders/frame002_view2_flow_to002.flo4")).unwrap();
    assert!(flow.data.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));

    let out = gf4d(&["render", "ws", "--view", "9", "--time", "1"], tmp.path());
    assert_eq!(code(&out), 2);
    let out = gf4d(&["render", "ws", "--view", "1", "--time", "4"], tmp.path());
    assert_ne!(code(&out), 0);

    ok(&gf4d(&["eval", "ws"], tmp.path()));
    let report = fs::read_to_string(ws.join("logs/eval.txt")).unwrap();
    let rows: Vec<&str> = report.lines().filter(|l| l.starts_with("view=") && !l.contains("mean")).collect();
    assert_eq!(rows.len(), 6 * 3);
    assert!(rows.iter().filter(|l| l.contains("frame=3 ")).all(|l| l.ends_with("epe=-")));
    assert!(report.lines().any(|l| l.starts_with("view=all frame=mean")));

    let log = fs::read_to_string(ws.join("logs/regenerate.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("valid_fraction=")).count(), 6 * 3);
    assert_eq!(fs::read_dir(ws.join("features")).unwrap().count(), 6 * 3);
    let manifest = fs::read_to_string(ws.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l.contains("regenerated/")));
}
