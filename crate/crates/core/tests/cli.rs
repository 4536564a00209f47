use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use s3n::dataset::{load_dataset, read_scores, DatasetManifest};
use s3n::eval::EvalReport;
use s3n::inject::AnomalyType;

fn s3n(args: &[&str]) -> Output {
    s3n_env(args, &[])
}

fn s3n_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_s3n"));
    cmd.args(args).env_remove("S3N_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run s3n")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn generate(dir: &Path, trajectories: usize, frames: usize, seed: u64) {
    let out = s3n(&[
        "generate",
        "--frames",
        &frames.to_string(),
        "--trajectories",
        &trajectories.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, 3, 40, 7);
    generate(&b, 3, 40, 7);
    let manifest = DatasetManifest::read(&a).unwrap();
    assert_eq!(manifest.trajectories.len(), 3);
    assert_eq!(manifest.trajectories[0].id, "traj-0000");
    assert!(manifest.trajectories.iter().all(|t| t.frames == 40 && !t.corrupted));
    assert_eq!(snapshot(&a), snapshot(&b));

    let c = tmp.path().join("c");
    generate(&c, 3, 40, 8);
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, 2, 20, 99);
    let out = s3n_env(
        &["generate", "--frames", "20", "--trajectories", "2", "--out", p(&b)],
        &[("S3N_SEED", "99")],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(snapshot(&a), snapshot(&b));

    let out = s3n_env(&["generate", "--out", p(&b)], &[("S3N_SEED", "abc")]);
    assert_eq!(code(&out), 64);
}

#[test]
fn config_file_sits_below_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"frames": 25, "trajectories": 2, "seed": 3, "generate": {"trajectories": 1}}"#).unwrap();

    let from_file = tmp.path().join("file");
    let out = s3n(&["--config", p(&config), "generate", "--out", p(&from_file)]);
    assert_eq!(code(&out), 0);
    let m = DatasetManifest::read(&from_file).unwrap();
    assert_eq!((m.trajectories.len(), m.trajectories[0].frames), (1, 25));

    let flagged = tmp.path().join("flag");
    let out = s3n(&["generate", "--config", p(&config), "--frames", "30", "--out", p(&flagged)]);
    assert_eq!(code(&out), 0);
    assert_eq!(DatasetManifest::read(&flagged).unwrap().trajectories[0].frames, 30);

    fs::write(&config, "[1, 2]").unwrap();
    assert_eq!(code(&s3n(&["--config", p(&config), "generate", "--out", p(&flagged)])), 64);
}

#[test]
fn usage_and_io_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&s3n(&["generate", "--frames", "1", "--out", p(tmp.path())])), 64);
    assert_eq!(code(&s3n(&["generate", "--frames", "ten"])), 64);
    assert_eq!(code(&s3n(&["frobnicate"])), 64);
    assert_eq!(code(&s3n(&["train"])), 64);
    assert_eq!(code(&s3n(&["--help"])), 0);
    assert_eq!(code(&s3n(&["--version"])), 0);

    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = s3n(&["generate", "--frames", "5", "--trajectories", "1", "--out", p(&blocker.join("sub"))]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&s3n(&["score", "--model", p(&tmp.path().join("none")), "--data", p(tmp.path()), "--out", "x.csv"])), 2);
}

#[test]
fn inject_corrupts_half_and_leaves_source_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, dst) = (tmp.path().join("src"), tmp.path().join("dst"));
    generate(&src, 10, 200, 1);
    let before = snapshot(&src);

    let out = s3n(&["inject", "--in", p(&src), "--out", p(&dst), "--seed", "4", "--types", "flicker", "--rate", "0.03"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(snapshot(&src), before);

    let (manifest, stored) = load_dataset(&dst).unwrap();
    assert_eq!(manifest.trajectories.iter().filter(|t| t.corrupted).count(), 5);
    let mut anomalies = 0;
    for s in &stored {
        match &s.labels {
            Some(labels) => {
                assert!(s.entry.corrupted);
                for l in labels.iter().filter(|l| l.anomalous) {
                    assert_eq!(l.anomaly_type, Some(AnomalyType::Flicker));
                    anomalies += 1;
                }
            }
            None => assert!(!s.entry.corrupted),
        }
    }
    assert!(anomalies > 0);

    assert_eq!(code(&s3n(&["inject", "--in", p(&src), "--out", p(&src)])), 64);
    assert_eq!(code(&s3n(&["inject", "--in", p(&src), "--out", p(&dst), "--types", "wobble"])), 64);
    // corrupting twice is refused
    assert_eq!(code(&s3n(&["inject", "--in", p(&dst), "--out", p(&tmp.path().join("again"))])), 3);
}

#[test]
fn pipeline_commands_and_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let (normal, corrupted) = (tmp.path().join("normal"), tmp.path().join("corrupted"));
    let model = tmp.path().join("m.s3nm");
    generate(&normal, 3, 60, 2);
    assert_eq!(code(&s3n(&["inject", "--in", p(&normal), "--out", p(&corrupted), "--seed", "5", "--rate", "0.05"])), 0);

    assert_eq!(code(&s3n(&["train", "--data", p(&corrupted), "--out", p(&model)])), 3);

    // defaults are echoed in the settings header
    let out = s3n(&["train", "--data", p(&normal), "--out", p(&model), "--dim", "8", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("batch_size=128 margin=0.2 learning_rate=0.0005 epochs=1 embed_dim=8"), "{text}");
    assert!(model.exists());
    let log = fs::read_to_string(model.with_extension("train.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss\n"));

    let scores = tmp.path().join("scores.csv");
    assert_eq!(code(&s3n(&["score", "--model", p(&model), "--data", p(&corrupted), "--out", p(&scores)])), 0);
    let rows = read_scores(&scores).unwrap();
    assert_eq!(rows.len(), 3 * 59);

    let report_dir = tmp.path().join("report");
    let out = s3n(&["--json", "eval", "--model", p(&model), "--data", p(&corrupted), "--out", p(&report_dir)]);
    assert_eq!(code(&out), 0);
    let result: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(result["exit_code"], 0);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert!(report.rank_sum.values().chain(report.auc.values()).all(|v| (0.0..=1.0).contains(v)));
    assert!(fs::read_to_string(report_dir.join("report.csv")).unwrap().starts_with("uds,"));

    let from_scores = tmp.path().join("from_scores");
    assert_eq!(code(&s3n(&["eval", "--scores", p(&scores), "--out", p(&from_scores)])), 0);
    assert_eq!(code(&s3n(&["eval", "--scores", p(&scores), "--model", p(&model), "--out", p(&from_scores)])), 64);

    // uncorrupted data: AUC map empty, with a warning
    let plain = tmp.path().join("plain");
    let out = s3n(&["eval", "--model", p(&model), "--data", p(&normal), "--out", p(&plain)]);
    assert_eq!(code(&out), 0);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(plain.join("report.json")).unwrap()).unwrap();
    assert!(report.auc.is_empty());
    assert!(!report.warnings.is_empty());

    // frame shape the model was not built for
    let small = tmp.path().join("small");
    let out = s3n(&["generate", "--frames", "10", "--trajectories", "1", "--height", "32", "--width", "32", "--out", p(&small)]);
    assert_eq!(code(&out), 0);
    assert_eq!(code(&s3n(&["score", "--model", p(&model), "--data", p(&small), "--out", p(&scores)])), 3);
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let out = s3n(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for layer in ["conv2d", "leaky_relu", "linear", "pairwise_sq_dist", "triplet_loss", "network"] {
        assert!(text.contains(layer), "{text}");
    }
    assert!(text.contains("max_rel_error="));

    let out = s3n(&["gradcheck", "--inject-fault", "conv-kernel"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL"));
}
