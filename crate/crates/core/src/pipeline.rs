//! Stage orchestration over a run directory.
//!
//! Each stage's output is keyed by a fingerprint of its parameters and the
//! fingerprints of the stages it reads. A stage is skipped when its artifact
//! exists with a matching fingerprint and none of its inputs were rebuilt in
//! the same invocation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{Backend, OpenAiBackend, ReplayBackend};
use crate::density::{filter_by_density, FilterReport};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_methods, length_vs_pass_report, sample_size_sweep, table_rows, verify, EvalOptions,
    EvaluationReport, LengthPassRow, ProblemEvalInput, SweepRow, TableRow,
};
use crate::prompts::{PromptSet, TemplateKind};
use crate::ranking::rank;
use crate::refinement::{refine_and_reselect, RefineContext, RefinementLog};
use crate::retry::RetryPolicy;
use crate::sampler::{sample_candidates_with, SlotContext};
use crate::sim::{build_simulator, generate_testbench, simulate, simulate_many, BenchKind, SimJob, Simulator};
use crate::store::{fingerprint, load_json, save_json, save_text, ProblemEntry, Quarantine, RunStore};
use crate::types::{
    BackendKind, Candidate, Problem, RankingResult, RunConfig, SimulatorKind, Testbench, TestbenchProvenance,
    Trace, WhitespaceTokenizer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sample,
    Filter,
    Testbench,
    Simulate,
    Rank,
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Sample,
        Stage::Filter,
        Stage::Testbench,
        Stage::Simulate,
        Stage::Rank,
        Stage::Refine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Filter => "filter",
            Stage::Testbench => "testbench",
            Stage::Simulate => "simulate",
            Stage::Rank => "rank",
            Stage::Refine => "refine",
        }
    }

    /// File whose presence marks the stage as done, relative to the problem
    /// directory.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Sample => "candidates/index.json",
            Stage::Filter => "filter.json",
            Stage::Testbench => "testbench.json",
            Stage::Simulate => "traces/index.json",
            Stage::Rank => "ranking.json",
            Stage::Refine => "refinement.json",
        }
    }

    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Sample => &[],
            Stage::Filter | Stage::Testbench => &[Stage::Sample],
            Stage::Simulate => &[Stage::Sample, Stage::Testbench],
            Stage::Rank => &[Stage::Filter, Stage::Simulate],
            Stage::Refine => &[Stage::Rank, Stage::Testbench],
        }
    }

    /// Stages that read this one's output, directly or not.
    fn dependents(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        for s in Stage::ALL {
            if s.inputs().iter().any(|i| *i == self || out.contains(i)) {
                out.push(s);
            }
        }
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

/// Hands out a backend per problem: one shared client for live endpoints,
/// a fresh replay queue per problem for fixtures.
pub enum BackendProvider {
    Shared(Arc<dyn Backend>),
    Replay { dir: PathBuf, exposes_reasoning: bool },
    /// For commands that must never reach a model.
    Disabled,
}

impl BackendProvider {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        match config.backend.kind {
            BackendKind::Openai => {
                let retry = RetryPolicy::new(config.retry_limit, config.retry_base_delay_ms);
                Ok(BackendProvider::Shared(Arc::new(OpenAiBackend::new(&config.backend, retry)?)))
            }
            BackendKind::Replay => {
                let dir = config
                    .backend
                    .fixture_dir
                    .clone()
                    .ok_or_else(|| Error::config("replay backend needs backend.fixture_dir"))?;
                if !dir.is_dir() {
                    return Err(Error::config(format!("fixture dir {} does not exist", dir.display())));
                }
                Ok(BackendProvider::Replay {
                    dir,
                    exposes_reasoning: config.backend.exposes_reasoning,
                })
            }
        }
    }

    /// A problem without a fixture file gets an empty queue, so it only
    /// fails if a stage actually needs the model.
    pub fn for_problem(&self, problem_id: &str) -> Result<Arc<dyn Backend>> {
        match self {
            BackendProvider::Shared(b) => Ok(Arc::clone(b)),
            BackendProvider::Replay { dir, exposes_reasoning } => {
                let path = dir.join(format!("{problem_id}.json"));
                let backend = if path.is_file() {
                    ReplayBackend::from_file(&path)?
                } else {
                    ReplayBackend::new([])
                };
                Ok(Arc::new(backend.with_exposes_reasoning(*exposes_reasoning)))
            }
            BackendProvider::Disabled => Ok(Arc::new(ReplayBackend::new([]))),
        }
    }

    fn identity(&self, config: &RunConfig, problem_id: &str) -> serde_json::Value {
        let b = &config.backend;
        let fixture = match self {
            BackendProvider::Replay { dir, .. } => file_digest(&dir.join(format!("{problem_id}.json"))),
            _ => None,
        };
        json!({
            "kind": b.kind,
            "endpoint": b.endpoint,
            "model": b.model,
            "temperature": b.temperature,
            "exposes_reasoning": b.exposes_reasoning,
            "fixture": fixture,
        })
    }
}

fn file_digest(path: &Path) -> Option<String> {
    std::fs::read(path)
        .ok()
        .map(|bytes| fingerprint(&json!(String::from_utf8_lossy(&bytes))))
}

/// Everything a run needs besides the run directory.
pub struct Env {
    pub config: RunConfig,
    pub prompts: PromptSet,
    pub sim: Box<dyn Simulator>,
    pub backends: BackendProvider,
}

impl Env {
    /// Validates the config and checks the simulator is usable before any
    /// model call is made.
    pub fn new(config: RunConfig) -> Result<Self> {
        let backends = BackendProvider::from_config(&config)?;
        Self::with_backends(config, backends)
    }

    pub fn with_backends(config: RunConfig, backends: BackendProvider) -> Result<Self> {
        config.validate()?;
        let prompts = match &config.prompt_dir {
            Some(dir) => PromptSet::load(dir)?,
            None => PromptSet::builtin(),
        };
        let sim = build_simulator(&config.simulator)?;
        sim.preflight()?;
        Ok(Env {
            config,
            prompts,
            sim,
            backends,
        })
    }

    fn sim_identity(&self) -> serde_json::Value {
        let s = &self.config.simulator;
        let sidecar = match s.kind {
            SimulatorKind::Mock => s.mock_sidecar.as_deref().and_then(file_digest),
            SimulatorKind::Command => None,
        };
        json!({
            "kind": s.kind,
            "compile": s.compile_template,
            "run": s.run_template,
            "sidecar": sidecar,
            "timeout_ms": self.config.sim_timeout_ms,
        })
    }

    fn stage_params(&self, stage: Stage, entry: &ProblemEntry) -> serde_json::Value {
        let c = &self.config;
        let id = &entry.problem.id;
        let prompts = |kinds: &[TemplateKind]| self.prompts.digest_source(kinds);
        match stage {
            Stage::Sample => json!({
                "problem": entry.problem,
                "n_samples": c.n_samples,
                "retry_limit": c.retry_limit,
                "backend": self.backends.identity(c, id),
                "sim": self.sim_identity(),
                "prompts": prompts(&[TemplateKind::Sampling]),
            }),
            Stage::Filter => json!({ "filter": c.filter }),
            Stage::Testbench => json!({
                "user_bench": entry.testbench.as_deref().and_then(file_digest),
                "min_test_cases": c.min_test_cases,
                "retry_limit": c.retry_limit,
                "backend": self.backends.identity(c, id),
                "sim": self.sim_identity(),
                "prompts": prompts(&[TemplateKind::Testbench]),
            }),
            Stage::Simulate => json!({ "sim": self.sim_identity() }),
            Stage::Rank => json!({ "selection": c.selection, "seed": c.seed }),
            Stage::Refine => json!({
                "early_exit_fraction": c.early_exit_fraction,
                "top_clusters": c.top_clusters_for_refinement,
                "retry_limit": c.retry_limit,
                "backend": self.backends.identity(c, id),
                "sim": self.sim_identity(),
                "prompts": prompts(&[
                    TemplateKind::RefineIntra,
                    TemplateKind::RefineInterScenario,
                    TemplateKind::RefineInterReconcile,
                ]),
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub completed: Vec<String>,
    pub quarantined: BTreeMap<String, Quarantine>,
    /// Stages that actually ran (were not resumed from disk), per problem.
    pub executed: BTreeMap<String, Vec<Stage>>,
}

impl PipelineSummary {
    pub fn is_partial(&self) -> bool {
        !self.quarantined.is_empty()
    }
}

/// Stages executed, or the stage that failed and why.
type ProblemRun = std::result::Result<Vec<Stage>, (Stage, Error)>;

/// Runs every stage up to and including `through` for each stored problem.
pub fn run_pipeline(store: &RunStore, env: &Env, through: Stage) -> Result<PipelineSummary> {
    save_json(&store.root().join("config.json"), &env.config)?;
    let problems = store.load_problems()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(env.config.workers.max(1))
        .build()
        .map_err(|e| Error::Environment(format!("thread pool: {e}")))?;
    let results: Vec<(String, ProblemRun)> = pool.install(|| {
        problems
            .par_iter()
            .map(|entry| (entry.problem.id.clone(), run_problem(store, env, entry, through)))
            .collect()
    });

    let mut summary = PipelineSummary::default();
    for (id, result) in results {
        match result {
            Ok(stages) => {
                store.clear_quarantine(&id)?;
                summary.completed.push(id.clone());
                summary.executed.insert(id, stages);
            }
            Err((stage, err)) => {
                log::error!("{id}: quarantined at {stage}: {err}");
                let q = Quarantine {
                    stage: stage.name().to_string(),
                    error: err.to_string(),
                };
                store.quarantine(&id, &q)?;
                summary.quarantined.insert(id, q);
            }
        }
    }
    Ok(summary)
}

fn run_problem(
    store: &RunStore,
    env: &Env,
    entry: &ProblemEntry,
    through: Stage,
) -> ProblemRun {
    let id = entry.problem.id.as_str();
    let mut stored = store.stage_fingerprints(id).map_err(|e| (Stage::Sample, e))?;
    let mut current: BTreeMap<Stage, String> = BTreeMap::new();
    let mut executed = Vec::new();
    let mut backend = None;

    for stage in Stage::ALL.into_iter().filter(|s| *s <= through) {
        let inputs: BTreeMap<&str, &String> = stage
            .inputs()
            .iter()
            .filter_map(|s| current.get(s).map(|fp| (s.name(), fp)))
            .collect();
        let fp = fingerprint(&json!({
            "stage": stage.name(),
            "inputs": inputs,
            "params": env.stage_params(stage, entry),
        }));
        let fresh = stored.get(stage.name()) == Some(&fp)
            && store.problem_dir(id).join(stage.artifact()).is_file()
            && !stage.inputs().iter().any(|s| executed.contains(s));
        if fresh {
            log::debug!("{id}: {stage} up to date");
        } else {
            log::info!("{id}: running {stage}");
            let mut run = || -> Result<()> {
                if backend.is_none() {
                    backend = Some(env.backends.for_problem(id)?);
                }
                let ctx = StageCtx {
                    store,
                    env,
                    entry,
                    backend: backend.as_deref().expect("set above"),
                };
                ctx.run(stage)?;
                stored.insert(stage.name().to_string(), fp.clone());
                for d in stage.dependents() {
                    stored.remove(d.name());
                }
                store.save_stage_fingerprints(id, &stored)
            };
            run().map_err(|e| (stage, e))?;
            executed.push(stage);
        }
        current.insert(stage, fp);
    }
    Ok(executed)
}

struct StageCtx<'a> {
    store: &'a RunStore,
    env: &'a Env,
    entry: &'a ProblemEntry,
    backend: &'a dyn Backend,
}

impl StageCtx<'_> {
    fn problem(&self) -> &Problem {
        &self.entry.problem
    }

    fn id(&self) -> &str {
        &self.entry.problem.id
    }

    fn slots(&self) -> SlotContext<'_> {
        SlotContext {
            backend: self.backend,
            sim: self.env.sim.as_ref(),
            tokenizer: &WhitespaceTokenizer,
            retry: RetryPolicy::new(self.env.config.retry_limit, self.env.config.retry_base_delay_ms),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.env.config.sim_timeout_ms)
    }

    fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Sample => self.sample(),
            Stage::Filter => self.filter(),
            Stage::Testbench => self.testbench(),
            Stage::Simulate => self.simulate(),
            Stage::Rank => self.rank(),
            Stage::Refine => self.refine(),
        }
    }

    fn sample(&self) -> Result<()> {
        let dir = self.store.candidates_dir(self.id());
        remove_dir(&dir)?;
        let slots = sample_candidates_with(
            self.problem(),
            self.env.config.n_samples,
            &self.slots(),
            &self.env.prompts,
            &self.env.config,
            &|s| self.store.save_candidate(&s.candidate, Some(&s.raw)),
        )?;
        let ids: Vec<String> = slots.into_iter().map(|s| s.candidate.id).collect();
        self.store.save_candidate_index(self.id(), &ids)
    }

    fn initial_candidates(&self) -> Result<Vec<Candidate>> {
        let ids = self.store.candidate_index(self.id())?;
        self.store.load_candidates(self.id(), &ids)
    }

    fn filter(&self) -> Result<()> {
        let (_, report) = filter_by_density(&self.initial_candidates()?, &self.env.config.filter)?;
        save_json(&self.store.artifact(self.id(), Stage::Filter.artifact()), &report)
    }

    fn testbench(&self) -> Result<()> {
        let cands = self.initial_candidates()?;
        let probe = cands
            .iter()
            .find(|c| c.is_valid())
            .ok_or_else(|| Error::NoOkCandidates(self.id().to_string()))?;
        let workdir = self.store.sim_dir(self.id()).join("testbench");
        remove_dir(&workdir)?;
        let bench = match &self.entry.testbench {
            Some(path) => {
                let code = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let job = SimJob {
                    problem_id: self.id(),
                    candidate_id: &probe.id,
                    code: &probe.code,
                    bench: &code,
                    kind: BenchKind::Generated,
                    timeout: self.timeout(),
                    workdir: &workdir,
                };
                let probe_trace = simulate(self.env.sim.as_ref(), &job)?.trace;
                if !probe_trace.is_ok() {
                    log::warn!("{}: supplied testbench failed on probe `{}`", self.id(), probe.id);
                }
                Testbench {
                    problem_id: self.id().to_string(),
                    code,
                    num_test_cases: probe_trace.records.len(),
                    provenance: TestbenchProvenance::UserSupplied,
                }
            }
            None => generate_testbench(
                self.problem(),
                probe,
                self.backend,
                self.env.sim.as_ref(),
                &self.env.prompts,
                &self.env.config,
                &workdir,
            )?,
        };
        save_text(&self.store.artifact(self.id(), "testbench.v"), &bench.code)?;
        save_json(&self.store.artifact(self.id(), Stage::Testbench.artifact()), &bench)
    }

    fn load_testbench(&self) -> Result<Testbench> {
        load_json(&self.store.artifact(self.id(), Stage::Testbench.artifact()))
    }

    fn simulate(&self) -> Result<()> {
        let bench = self.load_testbench()?;
        let valid: Vec<Candidate> = self.initial_candidates()?.into_iter().filter(Candidate::is_valid).collect();
        let sim_dir = self.store.sim_dir(self.id());
        let dirs: Vec<PathBuf> = valid.iter().map(|c| sim_dir.join(&c.id)).collect();
        let jobs: Vec<SimJob<'_>> = valid
            .iter()
            .zip(&dirs)
            .map(|(c, dir)| SimJob {
                problem_id: self.id(),
                candidate_id: &c.id,
                code: &c.code,
                bench: &bench.code,
                kind: BenchKind::Generated,
                timeout: self.timeout(),
                workdir: dir,
            })
            .collect();
        let outcomes = simulate_many(self.env.sim.as_ref(), &jobs, self.env.config.simulator.workers)?;
        let traces_dir = self.store.traces_dir(self.id());
        remove_dir(&traces_dir)?;
        for o in &outcomes {
            self.store.save_trace(self.id(), &o.trace)?;
        }
        let ids: Vec<&str> = valid.iter().map(|c| c.id.as_str()).collect();
        save_json(&traces_dir.join("index.json"), &ids)
    }

    fn traces(&self, ids: &[String]) -> Result<HashMap<String, Trace>> {
        ids.iter()
            .map(|id| Ok((id.clone(), self.store.load_trace(self.id(), id)?)))
            .collect()
    }

    fn survivors(&self) -> Result<Vec<Candidate>> {
        let report: FilterReport = load_json(&self.store.artifact(self.id(), Stage::Filter.artifact()))?;
        self.store.load_candidates(self.id(), &report.survivors)
    }

    fn rank(&self) -> Result<()> {
        let pool = self.survivors()?;
        let ids: Vec<String> = pool.iter().map(|c| c.id.clone()).collect();
        let result = rank(&pool, &self.traces(&ids)?, self.env.config.selection, self.env.config.seed)?;
        save_json(&self.store.artifact(self.id(), Stage::Rank.artifact()), &result)
    }

    fn refine(&self) -> Result<()> {
        let ranking: RankingResult = load_json(&self.store.artifact(self.id(), Stage::Rank.artifact()))?;
        let pool = self.survivors()?;
        let ids: Vec<String> = pool.iter().map(|c| c.id.clone()).collect();
        let traces = self.traces(&ids)?;
        let testbench = self.load_testbench()?;
        let slots = self.slots();
        let sim_dir = self.store.sim_dir(self.id());
        let ctx = RefineContext {
            problem: self.problem(),
            candidates: &pool,
            traces: &traces,
            testbench: &testbench,
            slots: &slots,
            sim: self.env.sim.as_ref(),
            prompts: &self.env.prompts,
            config: &self.env.config,
            sim_dir: &sim_dir,
        };
        let out = refine_and_reselect(&ranking, &ctx)?;
        for s in &out.refined {
            self.store.save_candidate(&s.candidate, Some(&s.raw))?;
        }
        for t in &out.refined_traces {
            self.store.save_trace(self.id(), t)?;
        }
        save_json(&self.store.artifact(self.id(), Stage::Refine.artifact()), &out.log)
    }
}

fn remove_dir(dir: &Path) -> Result<()> {
    match std::fs::remove_dir_all(dir) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(dir, e)),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub repeats: usize,
    /// Candidate counts for the sample-size sweep; empty skips it.
    pub sweep_sizes: Vec<usize>,
    /// Label for the model column; defaults to the configured model.
    pub model: Option<String>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![1, 2, 3],
            repeats: 5,
            sweep_sizes: Vec::new(),
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvaluationReport,
    pub table: Vec<TableRow>,
    /// Problem id → reason it was left out.
    pub excluded: BTreeMap<String, String>,
    pub length_vs_pass: Vec<LengthPassRow>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CachedVerdict {
    key: String,
    passed: bool,
}

/// Verifies every candidate of a finished run against the reference benches
/// and writes the reports under `<run>/reports/`.
pub fn evaluate_run(store: &RunStore, env: &Env, settings: &EvalSettings) -> Result<EvalOutcome> {
    let failure = Regex::new(&env.config.simulator.failure_pattern)
        .map_err(|e| Error::config(format!("simulator.failure_pattern: {e}")))?;
    let mut inputs = Vec::new();
    let mut excluded = BTreeMap::new();
    for entry in store.load_problems()? {
        let id = entry.problem.id.clone();
        match eval_input(store, env, &entry, &failure)? {
            Ok(input) => inputs.push(input),
            Err(reason) => {
                log::warn!("{id}: excluded from evaluation: {reason}");
                excluded.insert(id, reason);
            }
        }
    }

    let opts = EvalOptions {
        repeats: settings.repeats,
        selection: env.config.selection,
        seed: env.config.seed,
    };
    let report = evaluate_methods(&inputs, &settings.ks, opts)?;
    let model = settings.model.clone().unwrap_or_else(|| env.config.backend.model.clone());
    let table = table_rows(&report, &model, &env.config.dataset);
    let length_vs_pass = length_vs_pass_report(&inputs, &model);
    let sweep = if settings.sweep_sizes.is_empty() {
        Vec::new()
    } else {
        sample_size_sweep(&inputs, &settings.sweep_sizes, &env.config.filter, opts)?
    };

    let dir = store.reports_dir();
    save_json(&dir.join("passk.json"), &report)?;
    save_json(&dir.join("excluded.json"), &excluded)?;
    write_csv(&dir.join("table.csv"), &table)?;
    write_csv(&dir.join("aggregates.csv"), &report.aggregates)?;
    write_csv(&dir.join("length_vs_pass.csv"), &length_vs_pass)?;
    if !sweep.is_empty() {
        write_csv(&dir.join("sweep.csv"), &sweep)?;
    }
    Ok(EvalOutcome {
        report,
        table,
        excluded,
        length_vs_pass,
        sweep,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Internal(format!("csv {}: {e}", path.display())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Internal(format!("csv {}: {e}", path.display())))?;
    save_text(path, &String::from_utf8_lossy(&bytes))
}

/// `Ok(Err(reason))` when the problem cannot be evaluated.
fn eval_input(
    store: &RunStore,
    env: &Env,
    entry: &ProblemEntry,
    failure: &Regex,
) -> Result<std::result::Result<ProblemEvalInput, String>> {
    let id = entry.problem.id.as_str();
    if let Some(q) = store.quarantined(id)? {
        return Ok(Err(format!("quarantined at {}: {}", q.stage, q.error)));
    }
    let reference = match (&entry.reference_testbench, entry.eval_excluded) {
        (Some(path), false) => match std::fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) => return Ok(Err(format!("reference testbench {}: {e}", path.display()))),
        },
        _ => return Ok(Err("no reference testbench".into())),
    };
    let problem_dir = store.problem_dir(id);
    for stage in [Stage::Sample, Stage::Simulate] {
        if !problem_dir.join(stage.artifact()).is_file() {
            return Ok(Err(format!("stage {stage} has not run")));
        }
    }

    let candidates = store.load_candidates(id, &store.candidate_index(id)?)?;
    let filter: Option<FilterReport> = load_optional(&store.artifact(id, Stage::Filter.artifact()))?;
    let refinement: Option<RefinementLog> = load_optional(&store.artifact(id, Stage::Refine.artifact()))?;
    let refined = match &refinement {
        Some(log) => store.load_candidates(id, &log.refined_ids)?,
        None => Vec::new(),
    };
    let mut trace_ids: Vec<String> = load_json(&store.traces_dir(id).join("index.json"))?;
    trace_ids.extend(refined.iter().map(|c| c.id.clone()));
    let traces = trace_ids
        .iter()
        .map(|t| Ok((t.clone(), store.load_trace(id, t)?)))
        .collect::<Result<HashMap<_, _>>>()?;

    let verdicts = verdicts(store, env, id, &reference, failure, candidates.iter().chain(&refined))?;
    Ok(Ok(ProblemEvalInput {
        problem: Some(entry.problem.clone()),
        candidates,
        refined,
        traces,
        filtered_ids: filter.map(|f| f.survivors),
        final_pool: refinement.map(|r| r.final_ranking.scores.keys().cloned().collect()),
        verdicts,
    }))
}

fn load_optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.is_file() {
        load_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Reference-bench outcomes, reusing `verify.json` entries whose inputs are
/// unchanged.
fn verdicts<'a>(
    store: &RunStore,
    env: &Env,
    problem_id: &str,
    reference: &str,
    failure: &Regex,
    candidates: impl Iterator<Item = &'a Candidate>,
) -> Result<BTreeMap<String, bool>> {
    let cache_path = store.artifact(problem_id, "verify.json");
    let mut cache: BTreeMap<String, CachedVerdict> = load_optional(&cache_path)?.unwrap_or_default();
    let sim_id = env.sim_identity();
    let keyed: Vec<(&Candidate, String)> = candidates
        .map(|c| {
            let key = fingerprint(&json!({
                "code": c.code,
                "validity": c.validity,
                "reference": reference,
                "sim": sim_id,
                "failure": env.config.simulator.failure_pattern,
            }));
            (c, key)
        })
        .collect();
    let stale: Vec<&(&Candidate, String)> = keyed
        .iter()
        .filter(|(c, key)| cache.get(&c.id).map(|v| &v.key) != Some(key))
        .collect();
    let verify_dir = store.sim_dir(problem_id).join("verify");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(env.config.simulator.workers.max(1))
        .build()
        .map_err(|e| Error::Environment(format!("thread pool: {e}")))?;
    let fresh: Vec<(String, CachedVerdict)> = pool.install(|| {
        stale
            .par_iter()
            .map(|(c, key)| {
                let passed = verify(
                    env.sim.as_ref(),
                    c,
                    reference,
                    failure,
                    Duration::from_millis(env.config.sim_timeout_ms),
                    &verify_dir.join(&c.id),
                )?;
                Ok((c.id.clone(), CachedVerdict { key: key.clone(), passed }))
            })
            .collect::<Result<_>>()
    })?;
    if !fresh.is_empty() {
        cache.extend(fresh);
        save_json(&cache_path, &cache)?;
    }
    Ok(keyed.iter().map(|(c, _)| (c.id.clone(), cache[&c.id].passed)).collect())
}

/// One line per problem describing how far it got.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemStatus {
    pub problem_id: String,
    pub done: Vec<Stage>,
    pub quarantine: Option<Quarantine>,
    pub selected: Option<String>,
}

pub fn run_status(store: &RunStore) -> Result<Vec<ProblemStatus>> {
    store
        .load_problems()?
        .into_iter()
        .map(|entry| {
            let id = entry.problem.id;
            let dir = store.problem_dir(&id);
            let done = Stage::ALL
                .into_iter()
                .filter(|s| dir.join(s.artifact()).is_file())
                .collect();
            let refinement: Option<RefinementLog> = load_optional(&store.artifact(&id, Stage::Refine.artifact()))?;
            let ranking: Option<RankingResult> = load_optional(&store.artifact(&id, Stage::Rank.artifact()))?;
            let selected = refinement
                .map(|r| r.final_ranking.selected)
                .or(ranking.map(|r| r.selected));
            Ok(ProblemStatus {
                quarantine: store.quarantined(&id)?,
                problem_id: id,
                done,
                selected,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dependents_follow_the_data_flow() {
        assert_eq!(Stage::Rank.dependents(), vec![Stage::Refine]);
        assert_eq!(
            Stage::Testbench.dependents(),
            vec![Stage::Simulate, Stage::Rank, Stage::Refine]
        );
        assert_eq!(Stage::Filter.dependents(), vec![Stage::Rank, Stage::Refine]);
        assert_eq!(Stage::Sample.dependents().len(), 5);
    }

    #[test]
    fn stage_names_parse_back() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }
}
