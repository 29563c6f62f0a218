use std::fs;
use std::path::Path;

use optical_core::eval::{load_run, Qrels};
use optical_core::late_interaction::Provenance;
use optical_core::pipeline::{
    cmd_align_report, cmd_distill, cmd_eval, cmd_index, cmd_rerank, cmd_search, cmd_synth, cmd_train_teacher,
    default_eval_systems, run_all, ExperimentConfig, RerankMode, BM25_RUN,
};
use optical_core::Error;

fn small(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        r#"
        seed = 5
        [model]
        hidden = 8
        dim = 8
        [teacher]
        epochs = 3
        [distill]
        epochs = 1
        [synth]
        terms = 150
        background_terms = 30
        topics = 6
        docs = 80
        queries = 10
        train_queries = 60
        triples_per_query = 2
        bitext = 300
        "#,
    )
    .unwrap();
    cfg.paths.bundle = root.join("bundle");
    cfg.paths.work = root.join("work");
    cfg
}

#[test]
fn full_pipeline_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = run_all(&cfg).unwrap();
    assert_eq!(out.eval.systems.len(), 4);
    assert_eq!(out.eval.baseline, BM25_RUN);
    for s in &out.eval.systems {
        assert!((0.0..=1.0).contains(&s.map), "{s:?}");
        assert_eq!(s.p_vs_baseline.is_some(), s.system != BM25_RUN);
    }
    assert_eq!(out.align.before.total, 150);

    // every reranked doc came from the first-stage list of the same query
    let first = load_run(&cfg.paths.run_file(BM25_RUN), Provenance::FirstStage).unwrap();
    for mode in RerankMode::ALL {
        let run = load_run(&cfg.paths.run_file(mode.name()), Provenance::Reranked).unwrap();
        for (q, docs) in &run {
            let cands: Vec<&str> = first[q].iter().map(|d| d.doc_id.as_str()).collect();
            assert_eq!(docs.len(), cands.len().min(cfg.model.k_rerank));
            assert!(docs.iter().all(|d| cands.contains(&d.doc_id.as_str())));
        }
    }
    let qrels = Qrels::load(&cfg.paths.qrels()).unwrap();
    assert_eq!(qrels.judged_queries().len(), 10);
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_synth(&cfg).unwrap();
    cmd_index(&cfg).unwrap();
    cmd_search(&cfg, None, None).unwrap();
    cmd_train_teacher(&cfg).unwrap();
    cmd_distill(&cfg).unwrap();
    cmd_rerank(&cfg, RerankMode::Optical, None).unwrap();
    let snapshot = |p: &Path| fs::read(p).unwrap();
    let files = [
        cfg.paths.passages(),
        cfg.paths.run_file(BM25_RUN),
        cfg.paths.teacher(),
        cfg.paths.student(),
        cfg.paths.run_file("optical"),
    ];
    let before: Vec<Vec<u8>> = files.iter().map(|p| snapshot(p)).collect();
    cmd_index(&cfg).unwrap();
    cmd_search(&cfg, None, None).unwrap();
    cmd_train_teacher(&cfg).unwrap();
    cmd_distill(&cfg).unwrap();
    cmd_rerank(&cfg, RerankMode::Optical, None).unwrap();
    let after: Vec<Vec<u8>> = files.iter().map(|p| snapshot(p)).collect();
    assert_eq!(before, after);
}

#[test]
fn missing_inputs_are_reported_before_work_starts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert!(matches!(cmd_index(&cfg), Err(Error::MissingFile(_))));
    cmd_synth(&cfg).unwrap();
    assert!(matches!(cmd_search(&cfg, None, None), Err(Error::MissingFile(_))));
    assert!(matches!(cmd_distill(&cfg), Err(Error::MissingFile(_))));
    assert!(matches!(cmd_rerank(&cfg, RerankMode::Monolingual, None), Err(Error::MissingFile(_))));
    assert!(matches!(cmd_align_report(&cfg), Err(Error::MissingFile(_))));
    assert!(matches!(cmd_eval(&cfg, &default_eval_systems(&cfg), BM25_RUN), Err(Error::Empty(_))));
}

#[test]
fn bitext_limit_beyond_the_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cmd_synth(&cfg).unwrap();
    cmd_train_teacher(&cfg).unwrap();
    cfg.bitext_limit = Some(301);
    assert!(matches!(cmd_distill(&cfg), Err(Error::Config(_))));
    cfg.bitext_limit = Some(50);
    cmd_distill(&cfg).unwrap();
}

#[test]
fn separate_teacher_encoders_are_persisted_and_used() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.teacher.separate_encoders = true;
    cmd_synth(&cfg).unwrap();
    cmd_index(&cfg).unwrap();
    cmd_search(&cfg, None, None).unwrap();
    cmd_train_teacher(&cfg).unwrap();
    assert!(cfg.paths.teacher_document().is_file());
    cmd_rerank(&cfg, RerankMode::Monolingual, None).unwrap();

    // switching back to a shared encoder removes the stale document encoder
    cfg.teacher.separate_encoders = false;
    cmd_train_teacher(&cfg).unwrap();
    assert!(!cfg.paths.teacher_document().exists());
}

#[test]
fn eval_rejects_unknown_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_synth(&cfg).unwrap();
    cmd_index(&cfg).unwrap();
    cmd_search(&cfg, None, None).unwrap();
    let systems = default_eval_systems(&cfg);
    assert_eq!(systems.len(), 1);
    assert!(matches!(cmd_eval(&cfg, &systems, "nope"), Err(Error::Config(_))));
    let report = cmd_eval(&cfg, &systems, BM25_RUN).unwrap();
    assert!(report.map(BM25_RUN).unwrap() > 0.0);
}
