//! End-to-end harness behaviour on a deliberately tiny corpus.

use std::path::Path;

use mdt_core::harness::{ExperimentConfig, Method, Pipeline, Stage};
use mdt_core::Error;

const TINY: &str = "\
[corpus]
words = 3
train_per_word = 6
test_per_word = 3
sequence_every = 3
train_snrs = clean, 10
test_snrs = clean, 10, 0

[hmm]
states_per_word = 4
passes_per_stage = 1
em_passes = 1

[svm]
epochs = 3
";

fn tiny(dir: &Path, extra: &str) -> Pipeline {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, format!("{TINY}\n[experiment]\noutput = out\n{extra}")).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    Pipeline::new(cfg).unwrap()
}

fn table_rows<'a>(text: &'a str, title: &str) -> Vec<(&'a str, Vec<&'a str>)> {
    text.split("\n\n")
        .find(|b| b.starts_with(title))
        .unwrap_or_else(|| panic!("no block `{title}`"))
        .lines()
        .skip(2)
        // labels are left-aligned in a 12-column field
        .map(|l| (l[..12].trim(), l[12..].split_whitespace().collect()))
        .collect()
}

#[test]
fn full_run_report_layout_and_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(dir.path(), "");
    let summary = p.run_all().unwrap();
    assert_eq!(summary.executed, Stage::ALL.to_vec());

    let text = std::fs::read_to_string(p.layout.report_txt()).unwrap();
    let rows = table_rows(&text, "word accuracy (%), all noise kinds");
    let labels: Vec<&str> = rows.iter().map(|r| r.0).collect();
    assert_eq!(labels, ["classical", "state dep.", "delta acc."]);
    let tenths = |s: &str| (s.parse::<f64>().unwrap() * 10.0).round() as i64;
    for c in 0..3 {
        assert_eq!(tenths(rows[2].1[c]), tenths(rows[1].1[c]) - tenths(rows[0].1[c]));
    }
    assert!(text.contains("2^23 = 8388608"));
    assert!(text.contains("estimator bank: 15 states x 23 bands = 345 slots"));
    assert!(text.contains("noise kind lowpass") && text.contains("noise kind amplitude_modulated"));

    // one row per (snr, method, metric) plus the header
    let csv = std::fs::read_to_string(p.layout.report_dir().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 3);
    let curves = std::fs::read_to_string(p.layout.report_dir().join("curves.dat")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2);
    assert!(curves.lines().skip(1).all(|l| l.split_whitespace().count() == 4));

    let r = p.load_report().unwrap();
    for si in 0..r.snrs.len() {
        let d = r.delta_tenths(si).unwrap();
        let (a, b) = (
            r.accuracy_tenths(si, Method::StateDependentOracle).unwrap(),
            r.accuracy_tenths(si, Method::ClassicalOracle).unwrap(),
        );
        assert_eq!(d, a - b);
    }
}

#[test]
fn single_method_report_has_no_delta_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(dir.path(), "methods = classical_oracle\n");
    p.run_all().unwrap();
    let text = std::fs::read_to_string(p.layout.report_txt()).unwrap();
    let labels: Vec<&str> = table_rows(&text, "word accuracy (%), all noise kinds").iter().map(|r| r.0).collect();
    assert_eq!(labels, ["classical"]);
    assert!(!text.contains("delta acc."));
}

#[test]
fn decode_before_training_names_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(dir.path(), "");
    p.run_stage(Stage::GenCorpus).unwrap();
    p.run_stage(Stage::Features).unwrap();
    let err = p.run_stage(Stage::Decode).unwrap_err();
    assert!(err.is_validation());
    let msg = err.to_string();
    assert!(msg.contains("decode") && msg.contains("model.hmm") && msg.contains("train-hmm"), "{msg}");
    assert!(matches!(&err, Error::Stage { source, .. } if matches!(**source, Error::MissingArtifact { .. })));
}

#[test]
fn config_change_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(dir.path(), "");
    p.run_all().unwrap();
    let before = std::fs::read(p.layout.report_txt()).unwrap();

    let again = p.run_all().unwrap();
    assert!(again.executed.is_empty());

    let mut cfg = p.cfg.clone();
    cfg.svm.lambda = 0.05;
    let q = Pipeline::new(cfg).unwrap();
    let s = q.run_all().unwrap();
    assert_eq!(
        s.executed,
        [Stage::TrainEstimators, Stage::Decode, Stage::Evaluate, Stage::Report]
    );
    assert_eq!(s.skipped.len(), 5);

    // switching back reruns the same stages and restores the report exactly
    let s = p.run_all().unwrap();
    assert_eq!(s.executed.len(), 4);
    assert_eq!(std::fs::read(p.layout.report_txt()).unwrap(), before);
}

#[test]
fn missing_primary_artifact_invalidates_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(dir.path(), "methods = classical_oracle\n");
    p.run_all().unwrap();
    std::fs::remove_file(p.layout.hmm()).unwrap();
    assert!(!p.is_current(Stage::TrainHmm));
    let s = p.run_all().unwrap();
    assert_eq!(s.executed.first(), Some(&Stage::TrainHmm));
}

#[test]
fn state_conditioned_decode_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(dir.path(), "methods = classical_oracle, state_dependent_oracle, state_conditioned_decode\n");
    p.run_all().unwrap();
    let text = std::fs::read_to_string(p.layout.report_txt()).unwrap();
    let labels: Vec<&str> = table_rows(&text, "word accuracy (%), all noise kinds").iter().map(|r| r.0).collect();
    assert_eq!(labels, ["classical", "state dep.", "state cond.", "delta acc."]);
}

#[test]
fn master_seed_changes_corpus_but_not_schema() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let p1 = tiny(d1.path(), "methods = classical_oracle\n");
    let p2 = tiny(d2.path(), "methods = classical_oracle\nseed = 9\n");
    for p in [&p1, &p2] {
        p.run_stage(Stage::GenCorpus).unwrap();
    }
    let m1 = p1.manifest().unwrap();
    let m2 = p2.manifest().unwrap();
    assert_eq!(m1.entries.len(), m2.entries.len());
    let (e1, e2) = (&m1.entries[0], &m2.entries[0]);
    assert_eq!(e1.id, e2.id);
    assert_ne!(m1.load_clean(e1).unwrap().samples, m2.load_clean(e2).unwrap().samples);
}
