use std::path::Path;
use std::process::{Command, Output};

use uvatar::body_model::PoseShapeParams;
use uvatar::io::{load_model, write_json};

fn uvatar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvatar"))
        .current_dir(dir)
        .env_remove("E3GEN_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = uvatar(dir, args);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Writes a toy model with two small subjects, an init directory and a
/// short fit.
fn toy_pipeline(dir: &Path) {
    ok(dir, &["--out", "toy", "toy-model", "--subjects", "2", "--views", "3", "--heldout", "1", "--size", "24"]);
    ok(dir, &["--out", "init", "init", "--model", "toy/model.e3bm", "--plane-resolution", "16", "--volume-resolution", "12"]);
    ok(dir, &["--out", "fitted", "fit", "--init", "init", "--dataset", "toy/dataset", "--iterations", "5"]);
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = uvatar(dir.path(), &["render", "--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--normals"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&uvatar(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&uvatar(dir.path(), &["fit"])), 1);
    assert_eq!(code(&uvatar(dir.path(), &["--threads", "0", "bench"])), 1);
    assert_eq!(code(&uvatar(dir.path(), &["init"])), 1);
}

#[test]
fn toy_pipeline_renders_and_edits() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    toy_pipeline(dir);
    // Iterations are shared round-robin across subjects; each trace has a header.
    let mut rows = 0;
    for id in ["subject_00", "subject_01"] {
        assert!(dir.join(format!("fitted/planes/{id}.e3gp")).is_file());
        let trace = std::fs::read_to_string(dir.join(format!("fitted/traces/{id}.csv"))).unwrap();
        rows += trace.lines().count() - 1;
    }
    assert_eq!(rows, 5);

    let out = ok(
        dir,
        &[
            "--json", "--out", "r", "render", "--init", "init", "--plane", "fitted/planes/subject_00.e3gp", "--decoders",
            "fitted/decoders.e3ck", "--size", "32", "--normals",
        ],
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["images"].as_array().unwrap().len(), 2);
    for name in ["r/color_000.png", "r/normals_000.png"] {
        let bytes = std::fs::read(dir.join(name)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }

    let out = ok(
        dir,
        &[
            "--json", "--out", "e", "edit", "transfer", "--init", "init", "--src", "fitted/planes/subject_00.e3gp", "--dst",
            "fitted/planes/subject_01.e3gp", "--region", "face",
        ],
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["changed_values"].as_u64().unwrap() > 0);
    assert!(dir.join("e/edited.e3gp").is_file());
    let out = uvatar(
        dir,
        &["edit", "transfer", "--init", "init", "--src", "init/plane.e3gp", "--dst", "init/plane.e3gp", "--region", "tail"],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn animate_writes_one_frame_per_pose() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--out", "toy", "toy-model"]);
    ok(dir, &["--out", "init", "init", "--model", "toy/model.e3bm", "--plane-resolution", "16", "--volume-resolution", "12"]);
    let model = load_model(&dir.join("toy/model.e3bm")).unwrap();
    let rest = PoseShapeParams::zeros(&model);
    let mut bent = rest.clone();
    bent.theta[3] = 0.5;
    write_json(&dir.join("poses.json"), &vec![rest, bent]).unwrap();
    ok(dir, &["--out", "a", "animate", "--init", "init", "--poses", "poses.json", "--size", "24"]);
    let a = std::fs::read(dir.join("a/frame_0000.png")).unwrap();
    let b = std::fs::read(dir.join("a/frame_0001.png")).unwrap();
    assert_ne!(a, b);
    assert!(!dir.join("a/frame_0002.png").exists());
    let out = uvatar(dir, &["--out", "a", "animate", "--init", "init", "--poses", "missing.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diffusion_train_then_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    toy_pipeline(dir);
    ok(dir, &["--out", "d", "diffusion", "train", "--init", "init", "--dataset", "toy/dataset", "--iterations", "3"]);
    let trace = std::fs::read_to_string(dir.join("d/denoise_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    ok(dir, &["--out", "d", "diffusion", "sample", "--denoiser", "d/denoiser.e3ck", "--count", "2", "--steps", "3", "--resolution", "16"]);
    let a = std::fs::read(dir.join("d/samples/sample_000.e3gp")).unwrap();
    let b = std::fs::read(dir.join("d/samples/sample_001.e3gp")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn corrupt_plane_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--out", "toy", "toy-model"]);
    ok(dir, &["--out", "init", "init", "--model", "toy/model.e3bm", "--plane-resolution", "16", "--volume-resolution", "12"]);
    std::fs::write(dir.join("bad.e3gp"), b"not a plane").unwrap();
    let out = uvatar(dir, &["--out", "r", "render", "--init", "init", "--plane", "bad.e3gp", "--size", "16"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn bench_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--threads", "1", "--out", "b", "bench", "--gaussians", "500", "--resolution", "32", "--frames", "2"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("b/bench.json")).unwrap()).unwrap();
    assert_eq!(report["gaussians"], 500);
    assert_eq!(report["threads"], 1);
    assert_eq!(uvatar(dir, &["bench", "--frames", "0", "--gaussians", "10", "--resolution", "8"]).status.code(), Some(1));
}
