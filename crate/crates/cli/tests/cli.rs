use std::path::{Path, PathBuf};
use std::process::Command;

use ctshift::imaging::read_pgm;
use ctshift::metrics::{read_report, Method, CSV_HEADER};
use ctshift::pipeline::PatientClass;
use ctshift::synthgen::SuiteSplit;
use ctshift_cli::commands::{CASCADE_FILE, MODEL_A_FILE, MODEL_B_FILE, PRETEXT_FILE};
use ctshift_cli::{
    cmd_experiment, cmd_generate, cmd_ingest, cmd_report, cmd_train_base, DatasetManifest,
    ExperimentId, RunConfig,
};

/// A small, fast configuration: 16-pixel slices, few patients, short training.
fn small_config(out: &Path, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
    .with_overrides(&[
        "suite.image_side=16".into(),
        r#"suite.train_counts={"Healthy":4,"Covid":6,"Cap":4}"#.into(),
        r#"suite.val_counts={"Healthy":2,"Covid":2,"Cap":2}"#.into(),
        r#"suite.test1_counts={"Healthy":3,"Covid":3,"Cap":2}"#.into(),
        r#"suite.test2_counts={"Healthy":4,"Covid":4,"Cap":0}"#.into(),
        r#"suite.test3_counts={"Healthy":3,"Covid":3,"Cap":2}"#.into(),
        "pipeline.pretext_train.epochs=2".into(),
        "pipeline.slice_train.epochs=3".into(),
    ])
    .unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ctshift"));
    c.env("RUST_LOG", "warn");
    c
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_valid_reproducible_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = small_config(a.path(), 5);
    let cfg_b = small_config(b.path(), 5);
    cmd_generate(&cfg_a).unwrap();
    cmd_generate(&cfg_b).unwrap();

    let fa = files_under(a.path());
    let fb = files_under(b.path());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(
            x.strip_prefix(a.path()).unwrap(),
            y.strip_prefix(b.path()).unwrap()
        );
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }

    for split in SuiteSplit::ALL {
        let path = cfg_a.manifest_path(split);
        let m = DatasetManifest::load(&path).unwrap();
        assert!(!m.patients.is_empty());
        let first = path.parent().unwrap().join(&m.patients[0].slice_files[0]);
        assert_eq!(read_pgm(&first).unwrap().height(), 16);
    }
    let test2 = DatasetManifest::load(&cfg_a.manifest_path(SuiteSplit::Test2)).unwrap();
    assert!(test2
        .patients
        .iter()
        .all(|p| p.label != Some(PatientClass::Cap)));
}

#[test]
fn train_base_and_experiments_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    cmd_generate(&cfg).unwrap();
    let meta = cmd_train_base(&cfg).unwrap();
    assert!(meta.mult_healthy.factor > 0.0 && meta.mult_healthy.factor <= 1.0);
    assert!(meta.mult_b.factor > 0.0 && meta.mult_b.factor <= 1.0);

    let mut names: Vec<String> = std::fs::read_dir(cfg.models_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut expected = vec![CASCADE_FILE, MODEL_A_FILE, MODEL_B_FILE, PRETEXT_FILE];
    expected.sort();
    assert_eq!(names, expected);

    let exp2 = cmd_experiment(ExperimentId::Exp2, &cfg).unwrap();
    assert_eq!(exp2.method, Method::Baseline);
    assert_eq!(exp2.test_set, "test2");
    assert_eq!(exp2.confusion.total() as usize, exp2.n_patients);

    let exp1 = cmd_experiment(ExperimentId::Exp1, &cfg).unwrap();
    let exp4 = cmd_experiment(ExperimentId::Exp4, &cfg).unwrap();
    assert_eq!(exp4.method, Method::OnlineUnsupervised);
    assert_eq!(exp4.per_quarter_accuracy.as_ref().unwrap().len(), 4);
    assert_eq!(exp4.harvest_log.as_ref().unwrap().len(), 4);
    // quarter 0 of 8 patients is the first 2, scored by the base cascade
    assert_eq!(exp1.predictions[..2], exp4.predictions[..2]);
    assert!(cfg.reports_dir().join("exp4_events.jsonl").is_file());
    assert!(cfg.models_dir().join("exp4").join(MODEL_A_FILE).is_file());

    let on_disk = read_report(&cfg.reports_dir().join("exp4.json")).unwrap();
    assert_eq!(on_disk, exp4);

    let paths: Vec<PathBuf> = ["exp1", "exp2", "exp4"]
        .iter()
        .map(|s| cfg.reports_dir().join(format!("{s}.json")))
        .collect();
    let csv = dir.path().join("t.csv");
    let table = cmd_report(&paths, Some(&csv)).unwrap();
    assert_eq!(table.lines().count(), 4);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        assert_eq!(line.split(',').count(), CSV_HEADER.len());
    }
}

#[test]
fn report_names_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let e = cmd_report(std::slice::from_ref(&missing), None).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("nope.json"));
}

#[test]
fn ingest_builds_labeled_manifest_and_skips_empty_patients() {
    let src = tempfile::tempdir().unwrap();
    let gen = tempfile::tempdir().unwrap();
    let cfg = small_config(gen.path(), 1);
    cmd_generate(&cfg).unwrap();
    let m = DatasetManifest::load(&cfg.manifest_path(SuiteSplit::Test1)).unwrap();
    let base = cfg
        .manifest_path(SuiteSplit::Test1)
        .parent()
        .unwrap()
        .to_path_buf();
    for p in &m.patients {
        let class = format!("{:?}", p.label.unwrap()).to_lowercase();
        let dst = src.path().join(class).join(&p.id);
        std::fs::create_dir_all(&dst).unwrap();
        for f in &p.slice_files {
            std::fs::copy(base.join(f), dst.join(f.file_name().unwrap())).unwrap();
        }
    }
    std::fs::create_dir_all(src.path().join("healthy").join("empty-patient")).unwrap();

    let out = src.path().join("manifest.json");
    let ingested = cmd_ingest(src.path(), &out).unwrap();
    assert_eq!(ingested.patients.len(), m.patients.len());
    let reloaded = DatasetManifest::load(&out).unwrap();
    assert_eq!(reloaded, ingested);
    let mut want: Vec<_> = m.patients.iter().map(|p| (p.id.clone(), p.label)).collect();
    let mut got: Vec<_> = ingested
        .patients
        .iter()
        .map(|p| (p.id.clone(), p.label))
        .collect();
    want.sort();
    got.sort();
    assert_eq!(want, got);
}

#[test]
fn ingest_unlabeled_folders() {
    let src = tempfile::tempdir().unwrap();
    let pdir = src.path().join("p1");
    std::fs::create_dir_all(&pdir).unwrap();
    let img = ctshift::imaging::GrayImage::filled(8, 8, 0.5);
    ctshift::imaging::write_pgm(&img, &pdir.join("b.pgm")).unwrap();
    ctshift::imaging::write_pgm(&img, &pdir.join("a.pgm")).unwrap();
    std::fs::write(pdir.join("notes.txt"), "x").unwrap();
    let m = cmd_ingest(src.path(), &src.path().join("m.json")).unwrap();
    assert_eq!(m.patients.len(), 1);
    assert_eq!(m.patients[0].label, None);
    let names: Vec<_> = m.patients[0]
        .slice_files
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.pgm", "b.pgm"]);
}

#[test]
fn ingest_empty_directory_is_a_data_error() {
    let src = tempfile::tempdir().unwrap();
    let e = cmd_ingest(src.path(), &src.path().join("m.json")).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn exit_codes_from_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let s = bin()
        .args(["--out", out, "experiment", "Exp7"])
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(2));
    let s = bin()
        .args(["--out", out, "--set", "online.nope=1", "generate"])
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(2));
    let s = bin().args(["frobnicate"]).status().unwrap();
    assert_eq!(s.code(), Some(2));
    let s = bin().args(["--out", out, "train-base"]).status().unwrap();
    assert_eq!(s.code(), Some(3));
    let s = bin().args(["--out", out, "report"]).status().unwrap();
    assert_eq!(s.code(), Some(3));
}

#[test]
fn config_errors_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let s = bin()
        .args([
            "--out",
            out.to_str().unwrap(),
            "--set",
            "online.confidence_threshold=0.2",
            "generate",
        ])
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"seed": 4, "online": {"quarters": 3}}"#).unwrap();
    let output = bin()
        .args([
            "--config",
            path.to_str().unwrap(),
            "--set",
            "online.cumulative=false",
            "--seed",
            "8",
        ])
        .arg("show-config")
        .output()
        .unwrap();
    assert!(output.status.success());
    let cfg: RunConfig = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(cfg.seed, 8);
    assert_eq!(cfg.online.quarters, 3);
    assert!(!cfg.online.cumulative);

    std::fs::write(&path, r#"{"sed": 4}"#).unwrap();
    let s = bin()
        .args(["--config", path.to_str().unwrap(), "show-config"])
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(2));
}
