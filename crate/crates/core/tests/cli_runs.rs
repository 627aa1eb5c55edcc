use std::path::Path;
use std::process::Command;

use metric_forge_core::cli::{dispatch, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK};
use metric_forge_core::evalkit::{self, RerankConfig};

fn run(args: &[&str], env_seed: Option<&str>) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("metric-forge").chain(args.iter().copied());
    let code = dispatch(argv, env_seed, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--set", "n_classes=5", "--set", "per_class=12", "--set", "total_epochs=6", "--set", "warmup_epochs=2"];

#[test]
fn gen_train_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut outputs = Vec::new();
    for round in 0..2 {
        let train = d.join(format!("train{round}.csv"));
        let test = d.join(format!("test{round}.csv"));
        let ckpt = d.join(format!("model{round}.ckpt"));
        let log = d.join(format!("log{round}.jsonl"));
        let report = d.join(format!("report{round}.json"));

        let mut args = SMALL.to_vec();
        args.extend(["gen", "--out", p(&train), "--holdout-out", p(&test)]);
        assert_eq!(run(&args, Some("3")).0, EXIT_OK);

        let mut args = SMALL.to_vec();
        args.extend(["--set", "p=5", "train", "--data", p(&train), "--checkpoint", p(&ckpt), "--log", p(&log)]);
        let (code, stdout, stderr) = run(&args, Some("3"));
        assert_eq!(code, EXIT_OK, "{stderr}");
        assert!(stdout.contains("m_loss"));
        assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 6);

        let args = ["--set", "k1=8", "--set", "k2=3", "eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--rerank", "--json", p(&report)];
        let (code, stdout, stderr) = run(&args, None);
        assert_eq!(code, EXIT_OK, "{stderr}");
        assert!(stdout.contains("baseline") && stdout.contains("reranked"));

        outputs.push([train, test, ckpt, log, report].map(|f| std::fs::read(f).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);

    let json: serde_json::Value = serde_json::from_slice(&outputs[0][4]).unwrap();
    assert!(json["reranked"]["map"].is_number());
}

#[test]
fn env_seed_and_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    assert_eq!(run(&["gen", "--out", p(&a)], Some("5")).0, EXIT_OK);
    assert_eq!(run(&["--set", "seed=5", "gen", "--out", p(&b)], Some("9")).0, EXIT_OK);
    assert_eq!(run(&["gen", "--out", p(&c)], Some("6")).0, EXIT_OK);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let (code, _, err) = run(&["--set", "radious=0.5", "gen", "--out", p(&out)], None);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("radious"), "{err}");

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "lambda = 2.0\n").unwrap();
    let (code, _, err) = run(&["--config", p(&cfg), "gen", "--out", p(&out)], None);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("lambda"), "{err}");

    let (code, _, _) = run(&["frobnicate"], None);
    assert_eq!(code, EXIT_CONFIG);
    let (code, _, err) = run(&["gen", "--out", p(&out)], Some("not-a-number"));
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("METRIC_FORGE_SEED"));
}

#[test]
fn missing_files_exit_one() {
    let (code, _, err) = run(&["train", "--data", "/nonexistent/x.csv", "--checkpoint", "/tmp/x", "--log", "/tmp/y"], None);
    assert_eq!(code, EXIT_CHECK_FAILED);
    assert!(err.contains("error"));
}

#[test]
fn help_lists_defaults() {
    let (code, out, _) = run(&["--help"], None);
    assert_eq!(code, EXIT_OK);
    for key in ["radius = 0.7", "temperature = 1.0", "lin_weight = 0.4", "k1 = 20", "base_lr = 0.01"] {
        assert!(out.contains(key), "{key} missing from help");
    }
}

#[test]
fn ablate_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    let json = dir.path().join("ablate.json");
    let mut args = SMALL.to_vec();
    args.extend(["gen", "--out", p(&train), "--holdout-out", p(&test)]);
    assert_eq!(run(&args, None).0, EXIT_OK);
    let mut args = SMALL.to_vec();
    args.extend(["--set", "p=5", "ablate", "--train", p(&train), "--test", p(&test), "--seeds", "2", "--json", p(&json)]);
    let (code, out, err) = run(&args, None);
    assert_eq!(code, EXIT_OK, "{err}");
    let table: Vec<&str> = out.lines().filter(|l| !l.starts_with('{') && !l.starts_with("loss")).collect();
    assert_eq!(table.len(), 6, "{out}");
    let json_lines = out.lines().filter(|l| l.starts_with('{')).count();
    assert_eq!(json_lines, 6);
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 6);
}

#[test]
fn rerank_rescores_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (train, test, ckpt, log, joint, out) = (
        d.join("train.csv"),
        d.join("test.csv"),
        d.join("m.ckpt"),
        d.join("log.jsonl"),
        d.join("joint.bin"),
        d.join("rr.bin"),
    );
    let mut args = SMALL.to_vec();
    args.extend(["gen", "--out", p(&train), "--holdout-out", p(&test)]);
    assert_eq!(run(&args, None).0, EXIT_OK);
    let mut args = SMALL.to_vec();
    args.extend(["--set", "p=5", "train", "--data", p(&train), "--checkpoint", p(&ckpt), "--log", p(&log)]);
    assert_eq!(run(&args, None).0, EXIT_OK);
    assert_eq!(run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--dump-joint", p(&joint)], None).0, EXIT_OK);

    let (code, _, err) = run(&["--set", "k1=6", "--set", "k2=2", "rerank", "--joint", p(&joint), "--n-query", "10", "--out", p(&out)], None);
    assert_eq!(code, EXIT_OK, "{err}");
    let matrix = evalkit::read_matrix(&joint).unwrap();
    let expected = evalkit::rerank_joint(matrix.view(), 10, &RerankConfig { k1: 6, k2: 2, lambda: 0.3 }).unwrap();
    assert_eq!(evalkit::read_matrix(&out).unwrap(), expected);
}

#[test]
fn binary_gradcheck_passes() {
    let status = Command::new(env!("CARGO_BIN_EXE_metric-forge"))
        .args(["gradcheck", "--seed", "7", "--trials", "100"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stdout).contains("PASS"));
}

#[test]
fn binary_reports_config_errors() {
    let status = Command::new(env!("CARGO_BIN_EXE_metric-forge"))
        .args(["--set", "bogus=1", "gradcheck"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("bogus"));
}
