use std::path::Path;
use std::process::Command;

use fairrank::cli::run_with;
use fairrank::optimizer::FIELDS;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("fairrank").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(dir: &Path) -> String {
    let path = dir.join("data.csv");
    let (code, _, err) = run(&[
        "gen-data", "--queries", "12", "--items", "30", "--seed", "4", "--out", p(&path),
    ]);
    assert_eq!(code, 0, "{err}");
    p(&path).to_string()
}

#[test]
fn help_lists_every_training_key() {
    let (code, out, _) = run(&["train", "--help"]);
    assert_eq!(code, 0);
    for f in FIELDS {
        assert!(out.contains(&format!("--{}", f.name)), "missing --{}", f.name);
    }
}

#[test]
fn train_eval_and_strips_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run_dir = dir.path().join("run");
    let (code, out, err) = run(&[
        "train", "--data", &data, "--epochs", "2", "--C", "10", "--seed", "3", "--out", p(&run_dir),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("best step"));
    for f in ["model.ckpt", "best.ckpt", "trace.csv", "trace.meta.json", "config.txt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let saved = std::fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(saved.contains("C = 10") && saved.contains("seed = 3"), "{saved}");

    let model = run_dir.join("model.ckpt");
    let prefix = dir.path().join("report");
    let (code, out, err) = run(&[
        "eval", "--data", &data, "--model", p(&model), "--irrelevant", "20", "--k-list", "5,10",
        "--out", p(&prefix),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3);
    assert!(dir.path().join("report.csv").exists() && dir.path().join("report.json").exists());

    let strips = dir.path().join("strips");
    let (code, _, err) = run(&[
        "export-strips", "--data", &data, "--model", p(&model), "--queries", "4", "--K", "5",
        "--out", p(&strips),
    ]);
    assert_eq!(code, 0, "{err}");
    let ppm = std::fs::read(dir.path().join("strips.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "# test config\nepochs = 1\nC = 5\nK = 3\n").unwrap();
    let run_dir = dir.path().join("run");
    let (code, _, err) = run(&[
        "train", "--data", &data, "--config", p(&cfg), "--C", "7", "--out", p(&run_dir),
    ]);
    assert_eq!(code, 0, "{err}");
    let saved = std::fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(saved.contains("C = 7"), "{saved}");
    assert!(saved.contains("K = 3"), "{saved}");
    assert!(saved.contains("epochs = 1"), "{saved}");
}

#[test]
fn sweep_writes_one_row_per_weight_and_cutoff() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let prefix = dir.path().join("tradeoff");
    let (code, out, err) = run(&[
        "sweep", "--data", &data, "--epochs", "1", "--c-grid", "0,100", "--k-list", "5,10",
        "--irrelevant", "20", "--out", p(&prefix), "--parallel",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("C,K,ndcg_mean,ndcg_std,mae,mse,ndcg_skipped,fairness_skipped,status\n"));
    let csv = std::fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn usage_and_validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("run");
    for args in [
        vec!["train", "--data", data.as_str(), "--mode", "none", "--C", "1", "--out", p(&out)],
        vec!["train", "--data", data.as_str(), "--bogus", "1"],
        vec!["train", "--data", data.as_str(), "--gamma5", "banana"],
        vec!["train", "--data", data.as_str(), "--epsilon", "1.5", "--out", p(&out)],
        vec!["--strict-repro", "grad-check"],
        vec!["--strict-repro", "train", "--data", data.as_str()],
        vec!["eval", "--data", data.as_str()],
    ] {
        let (code, _, err) = run(&args);
        assert_eq!(code, 1, "{args:?}: {err}");
        assert!(err.contains("Usage:"), "{err}");
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let (code, _, err) = run(&["train", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code, 2, "{err}");

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "query_id,item_id,relevance,group\nq,a,oops,0\n").unwrap();
    let (code, _, err) = run(&["train", "--data", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn identical_arguments_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run_dir = dir.path().join(name);
        let (code, _, err) = run(&[
            "train", "--data", &data, "--epochs", "2", "--C", "100", "--seed", "8", "--out", p(&run_dir),
        ]);
        assert_eq!(code, 0, "{err}");
        let files: Vec<Vec<u8>> = ["model.ckpt", "best.ckpt", "trace.csv", "config.txt"]
            .iter()
            .map(|f| std::fs::read(run_dir.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn grad_check_reports_three_suites() {
    let (code, out, err) = run(&["--strict-repro", "grad-check", "--seed", "5"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn binary_propagates_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_fairrank");
    let status = Command::new(bin).arg("--help").output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    let status = Command::new(bin).args(["train", "--nope"]).output().unwrap().status;
    assert_eq!(status.code(), Some(1));
    let status = Command::new(bin)
        .args(["train", "--data", "/definitely/not/here.csv", "--out", "/tmp"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}
