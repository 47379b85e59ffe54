use std::path::Path;
use std::process::{Command, Output};

use a2mamba::model::{build_model, ModelConfig};
use a2mamba::params::checkpoint_paths;

fn a2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2"))
        .args(args)
        .env("A2_THREADS", "1")
        .output()
        .expect("spawn a2")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_gradcheck_filter_is_a_usage_error() {
    let o = a2(&["gradcheck", "--filter", "nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonexistent"));
}

#[test]
fn gradcheck_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grad.csv");
    let o = a2(&[
        "gradcheck",
        "--filter",
        "softmax",
        "--trials",
        "2",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("op,shape,max_rel_err"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "softmax");
    assert!(row[2].parse::<f64>().unwrap() <= 1e-4);
}

#[test]
fn erf_image_matches_the_input_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("erf");
    let o = a2(&[
        "erf",
        "--config",
        "toy",
        "--samples",
        "1",
        "--res",
        "96",
        "--out",
        path(&prefix),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(dir.path().join("erf.pgm")).unwrap();
    let header = b"P5\n96 96\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 96 * 96);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("support"));
    assert!(stdout.contains("reach bound"));
}

#[test]
fn erf_rejects_resolutions_off_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = a2(&[
        "erf",
        "--config",
        "toy",
        "--res",
        "48",
        "--out",
        path(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32"));
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("model");
    let model = build_model(&ModelConfig::toy(), 0).unwrap();
    model.store.save(&prefix).unwrap();

    let ok = a2(&[
        "erf",
        "--config",
        "toy",
        "--ckpt",
        path(&prefix),
        "--samples",
        "1",
        "--out",
        path(&dir.path().join("good")),
    ]);
    assert!(ok.status.success(), "{}", stderr(&ok));

    let (data, _) = checkpoint_paths(&prefix);
    let bytes = std::fs::read(&data).unwrap();
    std::fs::write(&data, &bytes[..bytes.len() / 2]).unwrap();
    let bad = a2(&[
        "erf",
        "--config",
        "toy",
        "--ckpt",
        path(&prefix),
        "--samples",
        "1",
        "--out",
        path(&dir.path().join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(
        stderr(&bad).contains("A2T1 format error"),
        "{}",
        stderr(&bad)
    );
}

#[test]
fn train_refuses_configs_the_task_cannot_feed() {
    let dir = tempfile::tempdir().unwrap();
    let o = a2(&[
        "train",
        "--config",
        "nano",
        "--steps",
        "1",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("10 classes"));

    let o = a2(&[
        "train",
        "--config",
        "no-such-preset",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_appends_a_versioned_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = a2(&[
        "bench",
        "--config",
        "toy",
        "--res",
        "32,64",
        "--reps",
        "1",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "a2bench,v1");
    assert_eq!(lines.len(), 2 + 4);
    assert!(lines[2..].iter().all(|l| l.ends_with(",ok")));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mass slope"));
}
