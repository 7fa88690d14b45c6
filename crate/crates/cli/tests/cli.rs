use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dragopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dragopt")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&dragopt(&["--help"])), 0);
    assert_eq!(code(&dragopt(&[])), 1);
    assert_eq!(code(&dragopt(&["gen-dataset", "--out", "x"])), 1);
    assert_eq!(code(&dragopt(&["train", "--data", "d", "--mode", "both", "--out", "m"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&dragopt(&["report", "--campaign", s(&tmp.path().join("none"))])), 1);

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "resolution = lots\n").unwrap();
    let out = tmp.path().join("d");
    assert_eq!(code(&dragopt(&["gen-dataset", "--config", s(&cfg), "--out", s(&out), "--n", "12", "--seed", "1"])), 1);
}

#[test]
fn dataset_training_and_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nresolution = 12\nepochs = 2\nbatch_size = 8\nworkers = 2\n").unwrap();
    let data = tmp.path().join("data");
    let o = dragopt(&["gen-dataset", "--config", s(&cfg), "--out", s(&data), "--n", "12", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(data.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 14);

    let ckpt = tmp.path().join("joint.ckpt");
    let o = dragopt(&["train", "--config", s(&cfg), "--data", s(&data), "--mode", "joint", "--out", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.exists());
    let metrics = fs::read_to_string(tmp.path().join("joint.ckpt.metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // Re-evaluating the stored contours reproduces the manifest.
    let table = tmp.path().join("eval.tsv");
    let o = dragopt(&["evaluate", "--config", s(&cfg), "--contours", s(&data.join("contours")), "--out", s(&table)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated: Vec<f64> = fs::read_to_string(&table)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    let stored: Vec<f64> = manifest.lines().skip(2).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(evaluated.len(), 12);
    for (e, s) in evaluated.iter().zip(&stored) {
        assert!((e - s).abs() <= 1e-10 * s.abs(), "{e} vs {s}");
    }
}
