use std::fs;
use std::path::Path;

use dragopt::flowsim::simulate;
use dragopt::pipeline::{generate_dataset, Dataset, PipelineConfig, Split};
use dragopt::shapegen::read_contour;
use proptest::prelude::*;

const N: usize = 12;
const SEED: u64 = 5;

fn small(workers: usize) -> PipelineConfig {
    PipelineConfig { resolution: 12.0, workers, ..PipelineConfig::default() }
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("manifest.tsv")).unwrap()
}

#[test]
fn generation_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    generate_dataset(&small(1), &a, N, SEED).unwrap();
    generate_dataset(&small(3), &b, N, SEED).unwrap();
    let reference = manifest(&a);
    assert_eq!(reference, manifest(&b), "worker count changed the manifest");
    for f in ["images/000007.bin", "contours/000011.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }

    // Simulated crash: five complete rows and a torn sixth.
    fs::create_dir_all(&c).unwrap();
    let lines: Vec<&str> = reference.lines().collect();
    let mut partial = lines[..7].join("\n");
    partial.push('\n');
    partial.push_str(&lines[7][..lines[7].len() / 2]);
    fs::write(c.join("manifest.tsv"), partial).unwrap();
    generate_dataset(&small(2), &c, N, SEED).unwrap();
    assert_eq!(manifest(&c), reference);

    // Rerunning a complete dataset is a no-op.
    generate_dataset(&small(1), &a, N, SEED).unwrap();
    assert_eq!(manifest(&a), reference);
}

#[test]
fn stored_rows_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(2), tmp.path(), N, SEED).unwrap();
    ds.verify().unwrap();
    assert_eq!(ds.rows.iter().filter(|r| r.split == Split::Train).count(), 10);

    // Stored drag reproduces from the stored contour.
    let setup = ds.header.flow_setup();
    for r in ds.rows.iter().filter(|r| r.usable()).take(3) {
        let contour = read_contour(&ds.dir.join(&r.contour)).unwrap();
        let (rec, _) = simulate(r.id as u64, &contour, &setup).unwrap();
        assert!((rec.cd - r.cd).abs() <= 1e-10 * r.cd.abs(), "row {}: {} vs {}", r.id, rec.cd, r.cd);
    }

    // Label statistics use training rows only.
    let train: Vec<f64> = ds.train_rows().iter().map(|r| r.cd).collect();
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    assert!((ds.stats.mean - mean).abs() < 1e-12);
    assert_eq!(ds.stats.count, train.len());
    let z = ds.labels(&ds.train_rows());
    assert!(z.iter().sum::<f64>().abs() < 1e-9);
    assert_eq!(ds.best_train_cd(), train.iter().copied().fold(f64::INFINITY, f64::min));

    // Other settings must not resume into an existing manifest.
    let other = PipelineConfig { resolution: 16.0, ..small(1) };
    let err = generate_dataset(&other, tmp.path(), N, SEED).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    let err = generate_dataset(&small(1), tmp.path(), N, SEED + 1).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");

    fs::remove_file(ds.dir.join(&ds.rows[4].image)).unwrap();
    assert!(Dataset::load(tmp.path()).unwrap().verify().is_err());
}

proptest! {
    #[test]
    fn config_text_round_trips(
        resolution in 8.0f64..200.0,
        nu in 1e-3f64..1.0,
        epochs in 1usize..1000,
        lr in 1e-6f64..1e-1,
        seed in any::<u64>(),
        starts in 1usize..5000,
        xi in 0.0f64..1.0,
    ) {
        let cfg = PipelineConfig { resolution, nu, epochs, learning_rate: lr, seed, starts, xi, ..PipelineConfig::default() };
        prop_assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
