use s3attn_harness::output::{emit_results, parse_results, render, Format, ResultTable, Value};
use s3attn_harness::{ExperimentConfig, HarnessError};

fn sample() -> ResultTable {
    let mut t = ResultTable::new(&["name", "count", "score", "ok", "seed"]);
    t.push(vec![
        "a,b".into(),
        3usize.into(),
        (1.0 / 7.0).into(),
        true.into(),
        0u64.into(),
    ])
    .unwrap();
    t.push(vec![
        "OOM".into(),
        Value::Int(-1),
        2.0.into(),
        false.into(),
        0u64.into(),
    ])
    .unwrap();
    t.push(vec![
        "tiny".into(),
        0usize.into(),
        1.23456789e-12.into(),
        true.into(),
        0u64.into(),
    ])
    .unwrap();
    t
}

#[test]
fn empty_table_writes_only_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    let cfg = ExperimentConfig::default();
    emit_results(&ResultTable::new(&["x", "seed"]), &cfg, Format::Csv, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "config_hash,x,seed\n");
}

#[test]
fn round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    for format in [Format::Csv, Format::Json] {
        let path = dir.path().join(format!("nested/t.{}", format.extension()));
        emit_results(&sample(), &cfg, format, &path).unwrap();
        let back = parse_results(&path, format).unwrap();
        assert_eq!(back, sample().rounded().with_hash(&cfg.hash()), "{format:?}");
        assert_eq!(back.get(0, "score"), Some(&Value::Float(0.142857)));
    }
}

#[test]
fn csv_rows_have_constant_width() {
    let text = render(&sample(), Format::Csv).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let width = reader.headers().unwrap().len();
    for rec in reader.records() {
        assert_eq!(rec.unwrap().len(), width);
    }
}

#[test]
fn tables_without_seed_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = ResultTable::new(&["x"]);
    let err = emit_results(&t, &ExperimentConfig::default(), Format::Csv, &dir.path().join("t.csv")).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert!(ResultTable::new(&["a", "seed"]).push(vec![1usize.into()]).is_err());
}

#[test]
fn io_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let path = blocker.join("t.csv");
    let err = emit_results(&sample(), &ExperimentConfig::default(), Format::Csv, &path).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains(&blocker.display().to_string()), "{err}");
    let missing = dir.path().join("missing.json");
    let err = parse_results(&missing, Format::Json).unwrap_err();
    assert!(err.to_string().contains("missing.json"), "{err}");
}

#[test]
fn hash_tracks_config_contents() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.set("lr", "0.01").unwrap();
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
}
