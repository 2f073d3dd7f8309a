mod common;

use common::{small_corpus, snapshot, write_corpus, Group, SynthProblem};
use vfocus_core::pipeline::{evaluate_run, run_pipeline, BackendProvider, Env, EvalSettings, Stage};
use vfocus_core::refinement::RefinementLog;
use vfocus_core::store::{ingest_dataset, load_json, RunStore};
use vfocus_core::{Error, RankingResult, RunConfig, SimulatorKind};

fn start(corpus: &common::Corpus, run: &std::path::Path) -> (RunStore, Env) {
    let store = RunStore::create(run).unwrap();
    store.save_problems(&ingest_dataset(&corpus.manifest).unwrap()).unwrap();
    (store, Env::new(corpus.config.clone()).unwrap())
}

#[test]
fn mock_run_is_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    let mut snaps = Vec::new();
    for name in ["run1", "run2"] {
        let (store, env) = start(&corpus, &tmp.path().join(name));
        let summary = run_pipeline(&store, &env, Stage::Refine).unwrap();
        assert_eq!(summary.completed, ["alpha", "beta", "gamma"]);
        assert!(!summary.is_partial());
        for stage in Stage::ALL {
            assert!(store.problem_dir("beta").join(stage.artifact()).is_file(), "{stage}");
        }
        evaluate_run(&store, &env, &EvalSettings::default()).unwrap();
        snaps.push(snapshot(store.root()));
    }
    assert_eq!(snaps[0], snaps[1]);
    assert!(snaps[0].keys().any(|p| p.ends_with("reports/table.csv")));
}

#[test]
fn deleting_ranking_reruns_only_rank_and_refine() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    let first = run_pipeline(&store, &env, Stage::Refine).unwrap();
    assert_eq!(first.executed["alpha"], Stage::ALL);

    let again = run_pipeline(&store, &env, Stage::Refine).unwrap();
    assert!(again.executed.values().all(Vec::is_empty));

    let before: RefinementLog = load_json(&store.artifact("alpha", "refinement.json")).unwrap();
    std::fs::remove_file(store.artifact("alpha", "ranking.json")).unwrap();
    let resumed = run_pipeline(&store, &env, Stage::Refine).unwrap();
    assert_eq!(resumed.executed["alpha"], [Stage::Rank, Stage::Refine]);
    assert!(resumed.executed["beta"].is_empty());
    let after: RefinementLog = load_json(&store.artifact("alpha", "refinement.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn changing_filter_quantiles_invalidates_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    run_pipeline(&store, &env, Stage::Refine).unwrap();
    let mut config = corpus.config.clone();
    config.filter.l_max_quantile = 0.9;
    let env = Env::new(config).unwrap();
    let summary = run_pipeline(&store, &env, Stage::Refine).unwrap();
    assert_eq!(summary.executed["gamma"], [Stage::Filter, Stage::Rank, Stage::Refine]);
}

#[test]
fn stopping_early_then_continuing() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    let s = run_pipeline(&store, &env, Stage::Filter).unwrap();
    assert_eq!(s.executed["alpha"], [Stage::Sample, Stage::Filter]);
    assert!(!store.artifact("alpha", "ranking.json").exists());
    let s = run_pipeline(&store, &env, Stage::Rank).unwrap();
    assert_eq!(s.executed["alpha"], [Stage::Testbench, Stage::Simulate, Stage::Rank]);
}

#[test]
fn refinement_results_are_persisted() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    run_pipeline(&store, &env, Stage::Refine).unwrap();

    // gamma: one cluster holds everything, so only intra refinement runs.
    let log: RefinementLog = load_json(&store.artifact("gamma", "refinement.json")).unwrap();
    assert!(log.early_exit);
    assert!(log.inter.is_none());
    assert_eq!(log.refined_ids, ["gamma-ri0"]);

    // beta is behavioral and has two top clusters: intra on both, one
    // reconcile prompt.
    let log: RefinementLog = load_json(&store.artifact("beta", "refinement.json")).unwrap();
    assert!(!log.early_exit);
    assert_eq!(log.refined_ids, ["beta-ri0", "beta-ri1", "beta-re0"]);
    for id in &log.refined_ids {
        assert!(store.candidates_dir("beta").join(format!("{id}.json")).is_file());
        store.load_trace("beta", id).unwrap();
    }
    let ranking: RankingResult = load_json(&store.artifact("beta", "ranking.json")).unwrap();
    assert!(log.final_ranking.n_ranked > ranking.n_ranked);
}

#[test]
fn invalid_candidates_are_kept_but_never_ranked() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    run_pipeline(&store, &env, Stage::Rank).unwrap();
    let ids = store.candidate_index("alpha").unwrap();
    assert_eq!(ids.len(), 11);
    let cands = store.load_candidates("alpha", &ids).unwrap();
    let invalid: Vec<_> = cands.iter().filter(|c| !c.is_valid()).collect();
    assert_eq!(invalid.len(), 1);
    assert_eq!(invalid[0].attempts_used, 5);
    let ranking: RankingResult = load_json(&store.artifact("alpha", "ranking.json")).unwrap();
    assert!(!ranking.scores.contains_key(&invalid[0].id));
}

#[test]
fn missing_fixture_quarantines_one_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    std::fs::remove_file(corpus.config.backend.fixture_dir.as_ref().unwrap().join("beta.json")).unwrap();
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    let summary = run_pipeline(&store, &env, Stage::Refine).unwrap();
    assert!(summary.is_partial());
    assert_eq!(summary.quarantined["beta"].stage, "sample");
    assert_eq!(summary.completed, ["alpha", "gamma"]);
    assert!(store.quarantined("beta").unwrap().is_some());

    let eval = evaluate_run(&store, &env, &EvalSettings::default()).unwrap();
    assert!(eval.excluded["beta"].starts_with("quarantined"));
}

#[test]
fn missing_simulator_fails_before_sampling() {
    let mut config = RunConfig::default();
    config.simulator.kind = SimulatorKind::Command;
    config.simulator.compile_template = "definitely-not-a-simulator-xyz -o {out} {sources}".into();
    let err = Env::with_backends(config, BackendProvider::Disabled).err().unwrap();
    assert!(matches!(err, Error::Environment(_)), "{err}");
}

#[test]
fn evaluation_reports_methods_per_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&tmp.path().join("corpus"), &small_corpus());
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    run_pipeline(&store, &env, Stage::Refine).unwrap();
    let settings = EvalSettings {
        sweep_sizes: vec![5, 11, 50],
        ..EvalSettings::default()
    };
    let out = evaluate_run(&store, &env, &settings).unwrap();
    let row = |method: &str, dataset: &str| {
        out.table
            .iter()
            .find(|r| r.method == method && r.dataset == dataset)
            .unwrap_or_else(|| panic!("{method} {dataset}"))
            .pass_at_1
    };
    // alpha: correct majority; beta: correct minority; gamma: all correct.
    assert!((row("vrank", "verilogeval-human") - 2.0 / 3.0).abs() < 1e-12);
    let baseline = (6.0 / 11.0 + 2.0 / 11.0 + 1.0) / 3.0;
    assert!((row("baseline", "verilogeval-human") - baseline).abs() < 1e-12);
    // Refinement is scripted to fix beta.
    assert!((row("vfocus", "verilogeval-human") - 1.0).abs() < 1e-12);
    assert!(out.table.iter().any(|r| r.dataset.contains("SEQ(1)")));
    assert!(out.sweep.iter().all(|r| r.size != 50));
    let csv = std::fs::read_to_string(store.reports_dir().join("table.csv")).unwrap();
    assert!(csv.starts_with("model,dataset,method,pass@1,delta_vs_baseline"));

    // Verdicts are cached; a second evaluation does not rewrite them.
    let cache = store.artifact("alpha", "verify.json");
    let stamp = std::fs::metadata(&cache).unwrap().modified().unwrap();
    evaluate_run(&store, &env, &settings).unwrap();
    assert_eq!(std::fs::metadata(&cache).unwrap().modified().unwrap(), stamp);
}

#[test]
fn problems_without_reference_bench_are_excluded() {
    let tmp = tempfile::tempdir().unwrap();
    let problems = vec![SynthProblem::new("solo", vec![Group::new(&["1"], 3, true)])];
    let corpus = write_corpus(&tmp.path().join("corpus"), &problems);
    std::fs::remove_file(corpus.dir.join("ref_solo.v")).unwrap();
    let (store, env) = start(&corpus, &tmp.path().join("run"));
    run_pipeline(&store, &env, Stage::Refine).unwrap();
    let out = evaluate_run(&store, &env, &EvalSettings::default()).unwrap();
    assert_eq!(out.excluded["solo"], "no reference testbench");
    assert!(out.report.reports.is_empty());
}
