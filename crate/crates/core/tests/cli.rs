use std::path::Path;
use std::process::{Command, Output};

use wildfire::metrics::EvalResult;

const CONFIG: &str = r#"
[run]
seed = 0
task = "daily"
arch = "autoencoder"

[synth]
height = 64
width = 64
days = 60

[sampler]
tile_size = 16

[model]
filter_scheme = [4, 8]

[train]
epochs = 2
batch_size = 16
learning_rate = 0.001

[eval]
pgm_tiles = 2
"#;

fn wildfire(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wildfire"))
        .args(args)
        .arg("--out")
        .arg(dir.join("run"))
        .env("WF_LOG", "warn")
        .env_remove("WF_RUN_SEED")
        .output()
        .unwrap()
}

fn setup(extra: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("{CONFIG}{extra}")).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    (dir, cfg)
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_emits_every_artifact() {
    let (dir, cfg) = setup("");
    for verb in ["synth", "build-dataset", "train", "eval", "predict"] {
        ok(&wildfire(dir.path(), &[verb, "--config", &cfg]));
    }
    let run = dir.path().join("run");
    assert_eq!(std::fs::read_dir(run.join("scenes")).unwrap().count(), 60);
    for rel in [
        "dataset/train.wfds",
        "dataset/val.wfds",
        "dataset/test.wfds",
        "dataset/stats.json",
        "model/model.wfck",
        "model/model.json",
        "model/report.csv",
        "eval/metrics.csv",
        "eval/tile_00000_prob.pgm",
        "eval/tile_00001_label.pgm",
    ] {
        assert!(run.join(rel).is_file(), "missing {rel}");
    }
    let metrics = std::fs::read_to_string(run.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(EvalResult::CSV_HEADER));
    assert_eq!(metrics.lines().count(), 2);
    let report = std::fs::read_to_string(run.join("model/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(std::fs::read_dir(run.join("predict")).unwrap().count() > 0);
    let pgm = std::fs::read(run.join("eval/tile_00000_prob.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);

    // Rerunning a verb on the same inputs reproduces its outputs.
    let before = std::fs::read(run.join("model/model.wfck")).unwrap();
    ok(&wildfire(dir.path(), &["train", "--config", &cfg]));
    assert_eq!(std::fs::read(run.join("model/model.wfck")).unwrap(), before);
}

#[test]
fn sweep_writes_one_row_per_combination() {
    let (dir, cfg) = setup("\n[sweep]\npositive_weight = [1.0, 3.0]\n");
    ok(&wildfire(dir.path(), &["synth", "--config", &cfg]));
    ok(&wildfire(dir.path(), &["build-dataset", "--config", &cfg]));
    ok(&wildfire(dir.path(), &["sweep", "--config", &cfg]));
    let csv = std::fs::read_to_string(dir.path().join("run/sweep/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("autoencoder,0.001,16,1,4-8,"));
    assert!(rows[1].starts_with("autoencoder,0.001,16,3,4-8,"));
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let (dir, cfg) = setup("");
    let code = |args: &[&str]| wildfire(dir.path(), args).status.code();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearnin_rate = 1\n").unwrap();
    let out = wildfire(dir.path(), &["synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnin_rate"));

    assert_eq!(code(&["build-dataset", "--config", &cfg]), Some(3));

    ok(&wildfire(dir.path(), &["synth", "--config", &cfg]));
    ok(&wildfire(dir.path(), &["build-dataset", "--config", &cfg]));
    assert_eq!(code(&["train", "--config", &cfg, "--model", "ae-lstm"]), Some(4));
    assert_eq!(code(&["train", "--config", &cfg, "--task", "sequence"]), Some(4));

    let train = dir.path().join("run/dataset/train.wfds");
    std::fs::write(&train, b"WFDS\x02garbage").unwrap();
    assert_eq!(code(&["train", "--config", &cfg]), Some(5));

    assert_ne!(code(&["synth", "--config", &cfg, "--threshold", "3"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(2));
}

#[test]
fn perfect_oracle_scores_auc_one() {
    let labels: Vec<i8> = [1, 0, 0, -1, 1, 0, 1, -1, 0].to_vec();
    let scores: Vec<f64> = labels.iter().map(|&y| y.max(0) as f64).collect();
    let r = EvalResult::from_scores(&scores, &labels, 0.5).unwrap();
    assert_eq!(r.auc, 1.0);
    assert_eq!((r.precision, r.recall, r.iou), (1.0, 1.0, 1.0));
    assert_eq!(r.n_valid, 7);
}

#[test]
fn environment_overrides_config() {
    let (dir, cfg) = setup("");
    let out = Command::new(env!("CARGO_BIN_EXE_wildfire"))
        .args(["synth", "--config", &cfg, "--out"])
        .arg(dir.path().join("run"))
        .env("WF_SYNTH_DAYS", "3")
        .env("WF_LOG", "warn")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(std::fs::read_dir(dir.path().join("run/scenes")).unwrap().count(), 3);
}
