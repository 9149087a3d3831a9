use std::fs;
use std::path::Path;

use rec_cbm_core::rubric::{assign_splits, equicorrelation, generate_synthetic, load_dataset};
use rec_cbm_core::{Error, RubricSpec, Split};

fn write_spec(dir: &Path, k: usize, m: usize, s: usize) -> std::path::PathBuf {
    let path = dir.join("spec.json");
    RubricSpec::with_default_names(k, m, s)
        .unwrap()
        .save(&path)
        .unwrap();
    path
}

fn record(id: &str, concepts: &str, grade: i64) -> String {
    format!(
        r#"{{"id":"{id}","question":"q","response":"r","context":null,"concepts":{concepts},"grade":{grade}}}"#
    )
}

#[test]
fn mohler_shaped_file_loads_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 8, 3, 5);
    let lines: Vec<String> = (0..2273)
        .map(|i| {
            record(
                &format!("m{i}"),
                &format!("[{},0,1,2,3,0,1,2]", i % 4),
                (i % 6) as i64,
            )
        })
        .collect();
    let data = dir.path().join("data.jsonl");
    fs::write(&data, lines.join("\n")).unwrap();
    let ds = load_dataset(&data, &spec).unwrap();
    assert_eq!(ds.len(), 2273);
    assert_eq!(ds.instances[0].id, "m0");
    assert_eq!(ds.instances[2272].id, "m2272");
    assert_eq!(ds.instances[5].grade, 5);
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 2, 3, 4);
    let data = dir.path().join("data.jsonl");
    fs::write(&data, "\n\n").unwrap();
    assert!(load_dataset(&data, &spec).unwrap().is_empty());
}

#[test]
fn record_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 2, 3, 4);
    let data = dir.path().join("data.jsonl");
    let cases = [
        (record("b", "[4,0]", 1), "concept 0 label 4"),
        (record("b", "[1,2,3]", 1), "expected 2 concept labels"),
        (record("b", "[1,-1]", 1), "concept 1 label -1"),
        (record("b", "[1,1]", 5), "grade 5"),
        ("{not json".to_string(), "malformed record"),
    ];
    for (bad, needle) in cases {
        fs::write(&data, format!("{}\n\n{bad}\n", record("a", "[0,0]", 0))).unwrap();
        match load_dataset(&data, &spec) {
            Err(Error::Record { line, message }) => {
                assert_eq!(line, 3, "{message}");
                assert!(message.contains(needle), "{message} lacks {needle}");
            }
            other => panic!("expected a record error, got {other:?}"),
        }
    }
}

#[test]
fn duplicate_ids_and_missing_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 2, 3, 4);
    let data = dir.path().join("data.jsonl");
    fs::write(
        &data,
        format!("{}\n{}\n", record("a", "[0,0]", 0), record("a", "[1,1]", 1)),
    )
    .unwrap();
    assert!(matches!(load_dataset(&data, &spec), Err(Error::DuplicateId(id)) if id == "a"));
    assert!(matches!(
        load_dataset(dir.path().join("missing.jsonl"), &spec),
        Err(Error::Io { .. })
    ));
    fs::write(
        dir.path().join("bad.json"),
        r#"{"num_concepts":2,"max_concept_level":3,"max_grade":4,"concept_names":["a","a"]}"#,
    )
    .unwrap();
    assert!(matches!(
        load_dataset(&data, dir.path().join("bad.json")),
        Err(Error::InvalidSpec(_))
    ));
}

#[test]
fn splits_are_a_seeded_partition() {
    let spec = RubricSpec::with_default_names(2, 1, 2).unwrap();
    let data = generate_synthetic(&spec, 10, &equicorrelation(2, 0.0), 0.0, 3).unwrap();
    let a = assign_splits(data.clone(), [0.7, 0.2, 0.1], 42).unwrap();
    let b = assign_splits(data.clone(), [0.7, 0.2, 0.1], 42).unwrap();
    let c = assign_splits(data.clone(), [0.7, 0.2, 0.1], 43).unwrap();
    assert_eq!(a.split_sizes(), (7, 2, 1));
    assert_eq!(a.splits, b.splits);
    assert_ne!(a.splits, c.splits);
    let total: usize = [Split::Train, Split::Dev, Split::Test]
        .iter()
        .map(|&s| a.subset(s).len())
        .sum();
    assert_eq!(total, 10);
    assert!(assign_splits(data.clone(), [0.8, 0.3, -0.1], 1).is_err());
    assert!(assign_splits(data, [0.5, 0.2, 0.1], 1).is_err());
}

#[test]
fn synthetic_text_carries_level_tokens() {
    let spec = RubricSpec::with_default_names(3, 3, 4).unwrap();
    let data = generate_synthetic(&spec, 50, &equicorrelation(3, 0.5), 0.2, 8).unwrap();
    for inst in &data.instances {
        let words: Vec<&str> = inst.response.split(' ').collect();
        let expected_len: usize = inst.concept_labels.iter().map(|c| c + 1 + 4).sum();
        assert_eq!(words.len(), expected_len);
        for (k, &c) in inst.concept_labels.iter().enumerate() {
            let tag = format!("c{k}lvl{c}");
            assert_eq!(words.iter().filter(|w| **w == tag).count(), c + 1);
        }
    }
    let again = generate_synthetic(&spec, 50, &equicorrelation(3, 0.5), 0.2, 8).unwrap();
    assert_eq!(again, data);
}
