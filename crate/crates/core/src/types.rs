//! Domain model shared by every stage: problems, candidates, traces,
//! clusters, ranking results and the run configuration.
//!
//! Everything here is a plain value object. The only behavior is
//! construction-time validation and the canonical trace serialization
//! used as the clustering key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prefix every testbench print line must start with.
pub const TRACE_MARKER: &str = "[VFOCUS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitKind {
    Combinational,
    Sequential,
}

impl CircuitKind {
    pub fn short_label(self) -> &'static str {
        match self {
            CircuitKind::Combinational => "CMB",
            CircuitKind::Sequential => "SEQ",
        }
    }
}

/// Declared per problem; selects how inter-cluster disagreements are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClass {
    /// Waveform tables, k-maps and similar: the model can reason about a
    /// single diverging input directly.
    SimpleDescription,
    Behavioral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub spec_text: String,
    pub module_interface: String,
    pub circuit_kind: CircuitKind,
    pub task_class: TaskClass,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        if !is_filesystem_safe(&self.id) {
            return Err(Error::contract(format!(
                "problem id `{}` must be non-empty and use only [A-Za-z0-9_.-]",
                self.id
            )));
        }
        if self.spec_text.trim().is_empty() {
            return Err(Error::contract(format!("problem `{}` has empty spec_text", self.id)));
        }
        Ok(())
    }
}

pub(crate) fn is_filesystem_safe(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    SyntacticallyInvalid,
    MissingReasoning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    RefinedIntra,
    RefinedInter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub problem_id: String,
    pub code: String,
    pub reasoning_trace: String,
    /// Token length of `reasoning_trace`.
    pub reasoning_len: usize,
    pub attempts_used: u32,
    pub validity: Validity,
    pub provenance: Provenance,
}

impl Candidate {
    pub fn is_valid(&self) -> bool {
        self.validity == Validity::Valid
    }

    pub fn validate(&self, retry_limit: u32) -> Result<()> {
        if (self.reasoning_len == 0) != self.reasoning_trace.is_empty() {
            return Err(Error::contract(format!(
                "candidate `{}`: reasoning_len must be 0 exactly when the reasoning trace is empty",
                self.id
            )));
        }
        if self.attempts_used == 0 || self.attempts_used > retry_limit {
            return Err(Error::contract(format!(
                "candidate `{}`: attempts_used {} outside [1, {}]",
                self.id, self.attempts_used, retry_limit
            )));
        }
        Ok(())
    }
}

/// Measures reasoning length. Only needs to be monotone and consistent
/// across the candidates of one problem.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub l_min_quantile: f64,
    pub l_max_quantile: f64,
    pub min_survivors: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            l_min_quantile: 0.10,
            l_max_quantile: 0.75,
            min_survivors: 3,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let FilterConfig {
            l_min_quantile: lo,
            l_max_quantile: hi,
            min_survivors,
        } = *self;
        if !(0.0..1.0).contains(&lo) {
            return Err(Error::config(format!("l_min_quantile {lo} not in [0,1)")));
        }
        if !(hi > 0.0 && hi <= 1.0) {
            return Err(Error::config(format!("l_max_quantile {hi} not in (0,1]")));
        }
        if lo >= hi {
            return Err(Error::config(format!(
                "l_min_quantile {lo} must be below l_max_quantile {hi}"
            )));
        }
        if min_survivors == 0 {
            return Err(Error::config("min_survivors must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestbenchProvenance {
    LlmGenerated,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Testbench {
    pub problem_id: String,
    pub code: String,
    pub num_test_cases: usize,
    pub provenance: TestbenchProvenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Ok,
    CompileError,
    RuntimeError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCaseRecord {
    pub tc: u64,
    pub signals: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub candidate_id: String,
    pub status: TraceStatus,
    pub records: Vec<TestCaseRecord>,
}

impl Trace {
    pub fn ok(candidate_id: impl Into<String>, records: Vec<TestCaseRecord>) -> Self {
        Trace {
            candidate_id: candidate_id.into(),
            status: TraceStatus::Ok,
            records,
        }
    }

    pub fn failed(candidate_id: impl Into<String>, status: TraceStatus) -> Self {
        debug_assert_ne!(status, TraceStatus::Ok);
        Trace {
            candidate_id: candidate_id.into(),
            status,
            records: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == TraceStatus::Ok
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_ok() && !self.records.is_empty() {
            return Err(Error::contract(format!(
                "trace for `{}` has records but status {:?}",
                self.candidate_id, self.status
            )));
        }
        if self.records.windows(2).any(|w| w[0].tc >= w[1].tc) {
            return Err(Error::contract(format!(
                "trace for `{}` has non-increasing test-case ids",
                self.candidate_id
            )));
        }
        Ok(())
    }

    /// Record count header followed by the marker lines. Two ok traces
    /// compare equal exactly when these strings are equal.
    pub fn canonical_form(&self) -> String {
        let mut out = format!("records={}\n", self.records.len());
        out.push_str(&render_records(&self.records));
        out
    }
}

/// Renders records in the testbench marker grammar, one line per test case.
pub fn render_records(records: &[TestCaseRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let _ = write!(out, "{TRACE_MARKER} tc={}", rec.tc);
        for (name, value) in &rec.signals {
            let _ = write!(out, " {name}={value}");
        }
        out.push('\n');
    }
    out
}

/// Stable clustering key: SHA-256 over the canonical serialization.
pub fn canonical_trace_key(trace: &Trace) -> Result<String> {
    if !trace.is_ok() {
        return Err(Error::contract(format!(
            "canonical key requested for non-ok trace of `{}` ({:?})",
            trace.candidate_id, trace.status
        )));
    }
    Ok(hex::encode(Sha256::digest(trace.canonical_form().as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub trace_key: String,
    pub member_ids: Vec<String>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub scores: BTreeMap<String, i64>,
    pub clusters: Vec<Cluster>,
    pub selected: String,
    pub n_ranked: usize,
}

impl RankingResult {
    pub fn largest_cluster_size(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.size)
    }

    pub fn cluster_of(&self, candidate_id: &str) -> Option<&Cluster> {
        self.clusters
            .iter()
            .find(|c| c.member_ids.iter().any(|m| m == candidate_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub tc: u64,
    pub signal: String,
    pub values: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperaturePolicy {
    ModelDefault,
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat-completions endpoint.
    Openai,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub temperature: TemperaturePolicy,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Directory of `<problem_id>.json` replay fixtures.
    pub fixture_dir: Option<PathBuf>,
    /// False for providers that hide their reasoning text.
    pub exposes_reasoning: bool,
    pub max_in_flight: usize,
    pub min_interval_ms: u64,
    pub request_timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Openai,
            endpoint: "https://api.openai.com/v1".into(),
            model: "deepseek-reasoner".into(),
            temperature: TemperaturePolicy::ModelDefault,
            api_key_env: "OPENAI_API_KEY".into(),
            fixture_dir: None,
            exposes_reasoning: true,
            max_in_flight: 4,
            min_interval_ms: 0,
            request_timeout_ms: 600_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Command,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub kind: SimulatorKind,
    /// `{sources}` expands to every source file, `{out}` to the build product.
    pub compile_template: String,
    pub run_template: String,
    pub mock_sidecar: Option<PathBuf>,
    /// Regex; a match in reference-bench output marks the candidate as failing.
    pub failure_pattern: String,
    pub workers: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            kind: SimulatorKind::Command,
            compile_template: "iverilog -g2012 -o {out} {sources}".into(),
            run_template: "vvp -n {out}".into(),
            mock_sidecar: None,
            failure_pattern: r"Mismatches: [1-9][0-9]* in".into(),
            workers: 4,
        }
    }
}

/// How the winner is drawn from the top cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    MinId,
    SeededRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_samples: usize,
    pub retry_limit: u32,
    pub retry_base_delay_ms: u64,
    pub filter: FilterConfig,
    pub early_exit_fraction: f64,
    pub top_clusters_for_refinement: usize,
    pub sim_timeout_ms: u64,
    pub min_test_cases: usize,
    pub selection: SelectionMode,
    pub seed: u64,
    /// Problems processed concurrently.
    pub workers: usize,
    /// Directory overriding the built-in prompt templates.
    pub prompt_dir: Option<PathBuf>,
    /// Label used in report tables.
    pub dataset: String,
    pub backend: BackendConfig,
    pub simulator: SimulatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_samples: 50,
            retry_limit: 5,
            retry_base_delay_ms: 2000,
            filter: FilterConfig::default(),
            early_exit_fraction: 0.90,
            top_clusters_for_refinement: 2,
            sim_timeout_ms: 30_000,
            min_test_cases: 8,
            selection: SelectionMode::MinId,
            seed: 0,
            workers: 4,
            prompt_dir: None,
            dataset: "verilogeval-human".into(),
            backend: BackendConfig::default(),
            simulator: SimulatorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        if self.retry_limit == 0 {
            return Err(Error::config("retry_limit must be at least 1"));
        }
        if !(self.early_exit_fraction > 0.0 && self.early_exit_fraction <= 1.0) {
            return Err(Error::config(format!(
                "early_exit_fraction {} not in (0,1]",
                self.early_exit_fraction
            )));
        }
        if self.workers == 0 || self.simulator.workers == 0 || self.backend.max_in_flight == 0 {
            return Err(Error::config("worker and in-flight limits must be at least 1"));
        }
        self.filter.validate()
    }
}
