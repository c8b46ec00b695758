use std::fs;

use denn::dataset::{generate_synthetic, load_jsonl, save_jsonl, Dataset, DatasetConfig};
use denn::DennError;

fn small() -> Dataset {
    let cfg = DatasetConfig {
        train_size: 50,
        valid_size: 1,
        test_size: 1,
        ..Default::default()
    };
    generate_synthetic(&cfg).unwrap().train
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let ds = small();
    save_jsonl(&ds, &path).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back, ds);

    // Saving the loaded copy reproduces the file byte for byte.
    let again = dir.path().join("again.jsonl");
    save_jsonl(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn header_only_file_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    fs::write(&path, "{\"num_classes\":3,\"vocab_size\":10}\n").unwrap();
    let ds = load_jsonl(&path).unwrap();
    assert!(ds.is_empty());
    assert_eq!((ds.num_classes, ds.vocab_size), (3, 10));
}

#[test]
fn worked_example_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ex.jsonl");
    fs::write(
        &path,
        "{\"num_classes\":3,\"vocab_size\":10}\n\
         {\"id\":\"a\",\"features\":{\"2\":0.5,\"7\":0.25},\"labels\":[0,2]}\n\
         \n\
         {\"id\":\"b\",\"features\":{},\"labels\":[1]}\n",
    )
    .unwrap();
    let ds = load_jsonl(&path).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.samples[0].features(), &[(2, 0.5), (7, 0.25)]);
    assert_eq!(ds.samples[0].labels.positives(), vec![0, 2]);
    assert_eq!(ds.samples[1].labels.positives(), vec![1]);
}

fn parse_error_line(body: &str) -> usize {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, body).unwrap();
    match load_jsonl(&path) {
        Err(DennError::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn errors_name_the_line() {
    let header = "{\"num_classes\":3,\"vocab_size\":10}\n";
    let ok = "{\"id\":\"a\",\"features\":{\"1\":1.0},\"labels\":[0]}\n";
    assert_eq!(parse_error_line(&format!("{header}{ok}{{\"id\":\"b\",\"features\":{{}},\"labels\":[3]}}\n")), 3);
    assert_eq!(parse_error_line(&format!("{header}{ok}{ok}{{\"id\":\"b\",\"features\":{{\"10\":1.0}},\"labels\":[0]}}\n")), 4);
    assert_eq!(parse_error_line(&format!("{header}not json\n")), 2);
    assert_eq!(parse_error_line("{\"classes\":3}\n"), 1);
    assert_eq!(parse_error_line(""), 1);
}

#[test]
fn missing_file_is_io_error() {
    let err = load_jsonl(std::path::Path::new("/nonexistent/denn/train.jsonl")).unwrap_err();
    assert!(matches!(err, DennError::Io { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn generated_samples_always_have_a_label() {
    for seed in 1..4 {
        let cfg = DatasetConfig {
            seed,
            label_noise: 0.5,
            ..Default::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        for ds in [&s.train, &s.valid, &s.test] {
            assert!(ds.samples.iter().all(|x| x.labels.count() >= 1));
        }
    }
}
