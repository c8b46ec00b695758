use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn denn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_denn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run denn")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = denn(dir, args);
    assert!(
        out.status.success(),
        "denn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn toy() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.toml")
        .display()
        .to_string()
}

#[test]
fn full_pipeline_on_default_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = toy();
    let start = Instant::now();
    ok(d, &["gen-data", "--config", &cfg, "--out", "data"]);
    ok(d, &["train", "--config", &cfg, "--data", "data", "--out", "run"]);
    ok(d, &["build-store", "--config", &cfg, "--model", "run/model.json", "--train", "data/train.jsonl", "--out", "store.bin"]);
    ok(d, &["predict", "--config", &cfg, "--model", "run/model.json", "--store", "store.bin", "--test", "data/test.jsonl", "--out", "preds.jsonl"]);
    let table = ok(d, &["eval", "--predictions", "preds.jsonl", "--gold", "data/test.jsonl", "--train", "data/train.jsonl", "--groups", "4", "--out", "metrics.json"]);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert!(table.contains("micro") && table.contains("group"));

    for f in [
        "data/train.jsonl",
        "data/gen-data.manifest.json",
        "run/model.json",
        "run/trainer.json",
        "run/history.jsonl",
        "run/train.manifest.json",
        "store.bin",
        "predict.manifest.json",
        "metrics.json",
    ] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["micro"]["f1"].as_f64().unwrap() > 0.8);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("predict.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifacts"]["predictions"], "preds.jsonl");
    assert_eq!(manifest["config"]["inference"]["k"], 30);

    // Same inputs, same bytes.
    ok(d, &["predict", "--config", &cfg, "--model", "run/model.json", "--store", "store.bin", "--test", "data/test.jsonl", "--out", "preds2.jsonl"]);
    assert_eq!(std::fs::read(d.join("preds.jsonl")).unwrap(), std::fs::read(d.join("preds2.jsonl")).unwrap());
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--seed", "4", "--out", "data"]);
    let out = ok(d, &["eval", "--predictions", "data/test.jsonl", "--gold", "data/test.jsonl", "--out", "m.json"]);
    assert!(out.contains("100.00"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["micro"]["f1"], 1.0);
    assert_eq!(m["macro"]["f1"], 1.0);
}

#[test]
fn gradcheck_passes_with_default_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--random", "2"]);
    assert_eq!(out.matches("PASS").count(), 3, "{out}");
}

#[test]
fn errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let missing = denn(d, &["build-store", "--model", "nope.json", "--train", "nope.jsonl"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    std::fs::write(d.join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    assert_eq!(denn(d, &["--config", "bad.toml", "gen-data"]).status.code(), Some(6));

    std::fs::write(d.join("bad.jsonl"), "{\"num_classes\":2,\"vocab_size\":4}\nnot json\n").unwrap();
    assert_eq!(denn(d, &["eval", "--predictions", "bad.jsonl", "--gold", "bad.jsonl"]).status.code(), Some(5));

    std::fs::write(d.join("model.json"), "{\"format\":\"something-else\"}").unwrap();
    ok(d, &["gen-data", "--out", "data"]);
    assert_eq!(
        denn(d, &["build-store", "--model", "model.json", "--train", "data/train.jsonl"]).status.code(),
        Some(9)
    );

    ok(d, &["gen-data", "--config", "/dev/null", "--out", "other"]);
    std::fs::write(d.join("small.toml"), "[data]\nnum_classes = 5\n").unwrap();
    ok(d, &["gen-data", "--config", "small.toml", "--out", "small"]);
    assert_eq!(
        denn(d, &["eval", "--predictions", "small/test.jsonl", "--gold", "data/test.jsonl"]).status.code(),
        Some(7)
    );
    assert_eq!(denn(d, &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn ablate_emits_one_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("ab.toml"),
        "[data]\ntrain_size = 300\nvalid_size = 50\ntest_size = 50\n\
         [train]\nlearning_rate = 0.003\nmax_iters = 40\neval_every = 20\n\
         [ablate]\nvariants = [\"ucl\", \"dcl\"]\nks = [5]\ngammas = [0.7]\nfractions = [0.5, 1.0]\nnum_groups = 2\n",
    )
    .unwrap();
    ok(d, &["gen-data", "--config", "ab.toml", "--out", "data"]);
    let table = ok(d, &["ablate", "--config", "ab.toml", "--data", "data", "--out", "ab.json"]);
    for name in ["classifier_only", "knn_only", "denn", "ucl", "dcl", "store_fraction", "group/denn"] {
        assert!(table.contains(name), "{name} missing from\n{table}");
    }
    let rows: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(d.join("ab.json")).unwrap()).unwrap();
    // 3 modes + 2 variants + 1 k + 1 gamma + 2 fractions + 2 modes x 2 groups
    assert_eq!(rows.len(), 13);
}
