use spmdfuzz::gmsbench::{generate, score, validate_case, TABLE};
use spmdfuzz::sanrt::DetectorMode;

#[test]
fn every_case_agrees_with_the_reference_interpreter() {
    let errs: Vec<String> = generate(1).iter().filter_map(|c| validate_case(c).err()).collect();
    assert!(errs.is_empty(), "{}", errs.join("\n"));
}

#[test]
fn row_counts_match_the_table() {
    let cases = generate(2);
    assert_eq!(cases.len(), 100);
    for t in &TABLE {
        let n = cases.iter().filter(|c| c.desc.row() == t.key).count() as u32;
        assert_eq!(n, t.count, "{}", t.key.label());
    }
}

#[test]
fn detector_verdicts_match_derivation() {
    let cases = generate(3);
    for (mode, want) in [(DetectorMode::Redzone, 48), (DetectorMode::Exact, 93), (DetectorMode::Reference, 100)] {
        let m = score(mode, &cases);
        print!("{}", m.text());
        assert!(m.mismatches.is_empty(), "{:?}: {:?}", mode, m.mismatches);
        assert!(m.false_positives.is_empty(), "{:?}: {:?}", mode, m.false_positives);
        assert_eq!(m.detected, want, "{mode:?}");
        assert_eq!(m.expected, want, "{mode:?}");
    }
}

#[test]
fn emitted_corpus_layout() {
    let cases = generate(4);
    let dir = tempfile::tempdir().unwrap();
    spmdfuzz::gmsbench::emit(dir.path(), &cases).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = v["descriptor"]["id"].as_str().unwrap();
        for ext in ["kir", "patched.kir", "bin"] {
            assert!(dir.path().join("cases").join(format!("{id}.{ext}")).is_file(), "{id}.{ext}");
        }
    }
}
