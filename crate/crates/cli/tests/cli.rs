use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
num_classes = 3
train_samples = 6
val_samples = 3
height = 32
width = 32
widths = 4,6,6
proto_dim = 4
protos_per_class = 3
warmup_steps = 3
joint_steps = 3
tune1_steps = 2
tune2_steps = 2
batch_size = 2
prune_knn = 4
prune_threshold = 1
eval_train_images = 3
";

fn protoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoseg"))
        .args(args)
        .env("PROTOSEG_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{text}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    text
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Setup {
    _dir: tempfile::TempDir,
    config: String,
    data: String,
    run: String,
}

fn setup(trained: bool) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.cfg");
    fs::write(&config, TINY).unwrap();
    let s = Setup {
        config: config.display().to_string(),
        data: dir.path().join("data").display().to_string(),
        run: dir.path().join("run").display().to_string(),
        _dir: dir,
    };
    ok(&protoseg(&["gen-data", "--config", &s.config, "--out", &s.data]));
    if trained {
        ok(&protoseg(&["train", "--config", &s.config, "--data", &s.data, "--out", &s.run]));
    }
    s
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap_or_default())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let s = setup(false);
    let other = s._dir.path().join("again");
    ok(&protoseg(&["gen-data", "--config", &s.config, "--out", other.to_str().unwrap()]));
    for split in ["train", "val"] {
        let a = tree(&Path::new(&s.data).join(split));
        let b = tree(&other.join(split));
        assert!(!a.is_empty());
        assert!(a == b, "{split} differs");
    }
    let again = protoseg(&["gen-data", "--config", &s.config, "--out", &s.data]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));
    ok(&protoseg(&["gen-data", "--config", &s.config, "--out", &s.data, "--force"]));
}

#[test]
fn resolved_config_is_printed_first() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let text = ok(&protoseg(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--set",
        "train_samples=2",
        "--set",
        "val_samples=1",
        "--seed",
        "9",
    ]));
    assert!(text.starts_with("# resolved configuration"));
    assert!(text.contains("train_samples = 2"));
    assert!(text.contains("seed = 9"));
    let saved = fs::read_to_string(data.join("config.txt")).unwrap();
    assert!(saved.contains("val_samples = 1"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "num_classes = 3\nlearning_speed = 4\n").unwrap();
    let out = protoseg(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_speed"));
    let out = protoseg(&["gen-data", "--set", "colour=3", "--out", dir.path().join("d").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn train_eval_explain_round_trip() {
    let s = setup(true);
    let run = Path::new(&s.run);
    for (i, stage) in ["warmup", "joint", "projection", "tune1", "prune", "tune2"].iter().enumerate() {
        assert!(run.join(format!("ckpt_{}_{stage}.pseg", i + 1)).is_file());
    }
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 7);
    assert!(report.starts_with("stage,active_prototypes,val_miou,train_loss"));

    let text = ok(&protoseg(&["eval", "--config", &s.config, "--data", &s.data, "--out", &s.run]));
    assert!(text.contains("miou,all,"));
    let csv = fs::read_to_string(run.join("metrics_val.csv")).unwrap();
    ok(&protoseg(&["eval", "--config", &s.config, "--data", &s.data, "--out", &s.run]));
    assert_eq!(csv, fs::read_to_string(run.join("metrics_val.csv")).unwrap());

    ok(&protoseg(&["explain", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--images", "0,2"]));
    let active = active_prototypes(run);
    for id in [0, 2] {
        let dir = run.join("explain").join(format!("val_{id}"));
        let files = fs::read_dir(&dir).unwrap().count();
        assert_eq!(files, active + 3, "pred, assign, manifest and one map per active prototype");
    }
    let out = protoseg(&["explain", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--prototype", "99"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("valid ids"));
    let out = protoseg(&["explain", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--images", "40"]);
    assert!(!out.status.success());
}

/// Active prototype count from the final report row.
fn active_prototypes(run: &Path) -> usize {
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    report.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let s = setup(false);
    let bad = s._dir.path().join("bad.pseg");
    fs::write(&bad, b"not a checkpoint at all").unwrap();
    let out = protoseg(&[
        "eval",
        "--config",
        &s.config,
        "--data",
        &s.data,
        "--out",
        &s.run,
        "--checkpoint",
        bad.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("PSEG1"), "{}", stderr(&out));
}

#[test]
fn single_stage_needs_its_predecessor() {
    let s = setup(false);
    let out = protoseg(&["train", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--stage", "joint"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("warmup"));
    ok(&protoseg(&["train", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--stage", "warmup"]));
    ok(&protoseg(&["train", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--stage", "joint"]));
    assert!(Path::new(&s.run).join("ckpt_2_joint.pseg").is_file());
    assert!(!Path::new(&s.run).join("ckpt_3_projection.pseg").exists());
    // resuming continues from the latest checkpoint
    let text = ok(&protoseg(&["train", "--config", &s.config, "--data", &s.data, "--out", &s.run]));
    assert!(text.contains("resuming after joint"));
    assert!(Path::new(&s.run).join("ckpt_6_tune2.pseg").is_file());
}

#[test]
fn resume_rejects_a_different_model() {
    let s = setup(false);
    ok(&protoseg(&["train", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--stage", "warmup"]));
    let out = protoseg(&[
        "train", "--config", &s.config, "--data", &s.data, "--out", &s.run, "--set", "proto_dim=5",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("different model configuration"));
}
