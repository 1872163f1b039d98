use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncdwf::dataset::SPLIT_FILES;
use ncdwf::report::{read_train_log, MANIFEST, PHASE1_CKPT, PHASE2_CKPT, PREDICTIONS, TRAIN_LOG};

const TINY: &str = r#"
[data]
classes = 4
per_class = 25
dim = 6
center_scale = 5.0

[split]
labeled = 2
unlabeled = 2

[model]
latent_dim = 8
extractor_hidden = [8]
head_hidden = []
variational_hidden = 8
kci_hidden = 8

[phase1]
epochs = 3
batch_size = 16

[phase2]
epochs = 2
batch_size = 16

[inversion]
per_class = 8

[eval]
monitor = false
"#;

struct Run {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: PathBuf,
}

fn setup(extra: &str) -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let config = tmp.path().join("run.toml");
    fs::write(&config, format!("{TINY}\n{extra}")).unwrap();
    Run { _tmp: tmp, dir, config }
}

fn ncdwf(run: &Run, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncdwf"))
        .args(args)
        .arg("--config")
        .arg(&run.config)
        .arg("--out")
        .arg(&run.dir)
        .env("NCDWF_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_writes_split_and_manifest_deterministically() {
    let run = setup("");
    ok(ncdwf(&run, &["generate"]));
    for f in SPLIT_FILES {
        assert!(run.dir.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(&run.dir.join(MANIFEST))).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 4);
    let first: Vec<Vec<u8>> = SPLIT_FILES.iter().map(|f| read(&run.dir.join(f))).collect();
    ok(ncdwf(&run, &["generate"]));
    let second: Vec<Vec<u8>> = SPLIT_FILES.iter().map(|f| read(&run.dir.join(f))).collect();
    assert_eq!(first, second);
}

#[test]
fn inconsistent_split_fails_validation_before_writing() {
    let run = setup("");
    fs::write(&run.config, TINY.replace("unlabeled = 2", "unlabeled = 3")).unwrap();
    let out = ncdwf(&run, &["generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!run.dir.exists());
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let run = setup("[phase2]\nlambda_typo = 1.0\n");
    assert_eq!(ncdwf(&run, &["generate"]).status.code(), Some(1));
}

#[test]
fn bad_flag_values_are_validation_errors() {
    let run = setup("");
    ok(ncdwf(&run, &["generate"]));
    assert_eq!(ncdwf(&run, &["train", "--phase", "3"]).status.code(), Some(1));
    assert_eq!(ncdwf(&run, &["train", "--ablate", "no-everything"]).status.code(), Some(1));
    assert_eq!(ncdwf(&run, &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let run = setup("");
    ok(ncdwf(&run, &["generate"]));
    fs::write(run.dir.join("garbage.ckpt"), "not a checkpoint\n").unwrap();
    let ckpt = run.dir.join("garbage.ckpt");
    let out = ncdwf(&run, &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn phase_one_with_zero_epochs_only_snapshots() {
    let run = setup("");
    ok(ncdwf(&run, &["generate"]));
    ok(ncdwf(&run, &["train", "--phase", "1", "--epochs", "0"]));
    let ckpt = ncdwf::checkpoint::Checkpoint::load(&run.dir.join(PHASE1_CKPT)).unwrap();
    let m = &ckpt.model;
    assert_eq!(m.frozen_extractor(), Some(&m.feature_extractor));
    assert_eq!(m.frozen_labeled_head(), Some(&m.labeled_head));
    assert!(m.class_means().is_some());
    // Untouched: identical to a fresh initialization under the same seed.
    let cfg = ncdwf::config::RunConfig::load("synth-10-5-5", Some(&run.config)).unwrap();
    let fresh = ncdwf::pipeline::init_model(&cfg, 6).unwrap();
    assert_eq!(fresh.feature_extractor, m.feature_extractor);
    assert_eq!(fresh.labeled_head, m.labeled_head);
    assert!(!run.dir.join(PHASE2_CKPT).exists());
}

#[test]
fn full_pipeline_train_eval_and_sweep() {
    let run = setup("");
    ok(ncdwf(&run, &["generate"]));
    ok(ncdwf(&run, &["train"]));
    assert!(run.dir.join(PHASE1_CKPT).exists() && run.dir.join(PHASE2_CKPT).exists());
    let log = read_train_log(&run.dir.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.iter().filter(|l| l.phase == 1).count(), 3);
    assert_eq!(log.iter().filter(|l| l.phase == 2).count(), 2);

    let out = ok(ncdwf(&run, &["eval"]));
    let ev: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ev["generalized"].as_array().unwrap().len(), 6);
    let reports: Vec<PathBuf> = fs::read_dir(&run.dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let n = p.file_name().unwrap().to_string_lossy();
            n.starts_with("report_") && n.ends_with(".json")
        })
        .collect();
    assert_eq!(reports.len(), 7);
    for p in &reports {
        let r: serde_json::Value = serde_json::from_slice(&read(p)).unwrap();
        let (l, u, a) = (r["lab_acc"].as_f64().unwrap(), r["unlab_acc"].as_f64().unwrap(), r["all_acc"].as_f64().unwrap());
        assert_eq!(a, (l + u) / 2.0);
    }
    let pred = String::from_utf8(read(&run.dir.join(PREDICTIONS))).unwrap();
    assert!(pred.starts_with("sample_id,true_label,route,pred_label,kci_score"));

    let before: Vec<Vec<u8>> = reports.iter().map(|p| read(p)).collect();
    ok(ncdwf(&run, &["eval"]));
    let after: Vec<Vec<u8>> = reports.iter().map(|p| read(p)).collect();
    assert_eq!(before, after);

    let out = ok(ncdwf(&run, &["sweep-tau", "--taus", "0.5,0.9"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("kci auc"));
    assert!(run.dir.join("report_tau_sweep.json").exists());
}

#[test]
fn no_plr_log_has_zero_replay_loss() {
    let run = setup("");
    ok(ncdwf(&run, &["generate"]));
    ok(ncdwf(&run, &["train", "--ablate", "no-plr"]));
    let log = read_train_log(&run.dir.join(TRAIN_LOG)).unwrap();
    let p2: Vec<_> = log.iter().filter(|l| l.phase == 2).collect();
    assert!(!p2.is_empty());
    assert!(p2.iter().all(|l| l.record.loss_replay == 0.0));

    let full = setup("");
    ok(ncdwf(&full, &["generate"]));
    ok(ncdwf(&full, &["train"]));
    let log = read_train_log(&full.dir.join(TRAIN_LOG)).unwrap();
    assert!(log.iter().filter(|l| l.phase == 2).all(|l| l.record.loss_replay > 0.0));
}

#[test]
fn training_twice_is_bit_identical() {
    let (a, b) = (setup(""), setup(""));
    for r in [&a, &b] {
        ok(ncdwf(r, &["generate"]));
        ok(ncdwf(r, &["train"]));
        ok(ncdwf(r, &["eval"]));
    }
    for f in [PHASE1_CKPT, PHASE2_CKPT, PREDICTIONS, "report_task_aware.json"] {
        assert_eq!(read(&a.dir.join(f)), read(&b.dir.join(f)), "{f}");
    }
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let run = setup("");
    ok(ncdwf(&run, &["generate"]));
    ok(ncdwf(&run, &["ablate"]));
    let report: serde_json::Value = serde_json::from_slice(&read(&run.dir.join("report_ablation.json"))).unwrap();
    let names: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no-plr", "no-mir", "no-fd"]);
}
