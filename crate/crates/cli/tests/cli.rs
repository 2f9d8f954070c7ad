use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mono3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mono3d")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(
        &p,
        r#"{
  "image_height": 32,
  "image_width": 96,
  "focal": 60.0,
  "epochs": 2,
  "num_images": 2,
  "batch_size": 2,
  "warmup_epochs": 1,
  "decay_epochs": [],
  "seed": 4
}"#,
    )
    .unwrap();
    p
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = mono3d(&["gradcheck", "--seeds", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("passed"));
    let report = fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert!(report.contains("end_to_end") && report.contains("conv2d"));
    assert!(out.join("config.json").exists());
}

#[test]
fn injected_fault_fails_the_check_and_names_the_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = mono3d(&["gradcheck", "--seeds", "1", "--inject-fault", "softmax", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("softmax"), "{}", stderr(&o));
    let o = mono3d(&["gradcheck", "--inject-fault", "nope", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mono3d(&["synth", "--variant", "b9"])), 2);
    assert_eq!(code(&mono3d(&["frobnicate"])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epoch": 3}"#).unwrap();
    let o = mono3d(&["synth", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.json"), "{}", stderr(&o));
    let o = mono3d(&["synth", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);
    let o = mono3d(&["synth", "--score-threshold", "1.5", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = mono3d(&["infer", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn flags_override_the_config_file_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data");
    let o = mono3d(&["synth", "--config", s(&cfg), "--seed", "11", "--k", "7", "--thresholds", "relaxed", "--no-attention", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 11);
    assert_eq!(echo["k"], 7);
    assert_eq!(echo["thresholds"], "relaxed");
    assert_eq!(echo["attention_enabled"], false);
    assert_eq!(echo["image_width"], 96);
    assert_eq!(echo["command"], "synth");
    assert_eq!(echo["lr"], 1.25e-3);
}

#[test]
fn ground_truth_as_predictions_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scene.json");
    fs::write(&cfg, r#"{"image_height": 128, "image_width": 384, "focal": 400.0, "z_min": 8.0, "z_max": 20.0}"#).unwrap();
    let data = dir.path().join("data");
    let o = mono3d(&["synth", "--config", s(&cfg), "--images", "4", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(data.join("image_2")).unwrap().count(), 4);
    let out = dir.path().join("eval");
    let o = mono3d(&["eval", "--pred", s(&data.join("label_2")), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = fs::read_to_string(out.join("eval_records.txt")).unwrap();
    let car_mod = records
        .lines()
        .find(|l| l.contains("set=official") && l.contains("class=Car") && l.contains("difficulty=moderate") && l.contains("metric=3d"))
        .expect("car moderate 3d record");
    assert!(car_mod.contains("ap=100.0000"), "{car_mod}");
    assert!(records.contains("set=relaxed"));
    assert!(fs::read_to_string(out.join("eval.txt")).unwrap().contains("100.00"));
}

#[test]
fn eval_without_ground_truth_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = mono3d(&["eval", "--pred", s(dir.path()), "--data", s(&dir.path().join("nowhere")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn train_infer_and_checkpoint_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mono3d(&["train-toy", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let csv = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.split(',').count() == 19));
    assert!(a.join("checkpoint.json").exists());
    assert!(a.join("train/label_2").is_dir());

    let ckpt = a.join("checkpoint.bin");
    let inf = dir.path().join("inf");
    let o = mono3d(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&inf)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(inf.join("pred")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(inf.join("overlay")).unwrap().count(), 2);

    let o = mono3d(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--image", s(&a.join("train/image_2/000000.ppm")), "--calib", s(&a.join("train/calib/000000.txt")), "--out", s(&dir.path().join("one"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("one/pred/000000.txt").exists());

    let o = mono3d(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--variant", "b1", "--out", s(&inf)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("desk") && err.contains("b1"), "{err}");

    let zero = dir.path().join("zero.bin");
    fs::write(&zero, vec![0u8; fs::metadata(&ckpt).unwrap().len() as usize]).unwrap();
    fs::copy(a.join("checkpoint.json"), dir.path().join("zero.json")).unwrap();
    let o = mono3d(&["infer", "--config", s(&cfg), "--checkpoint", s(&zero), "--out", s(&dir.path().join("z"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("0 detections in 2 frames"), "{}", stdout(&o));
}
