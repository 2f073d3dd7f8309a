//! Compiling and simulating candidates against testbenches.
//!
//! Behavior is observed only through marker lines printed by the testbench:
//!
//! ```text
//! [VFOCUS] tc=<decimal> <ident>=<token> <ident>=<token> ...
//! ```
//!
//! with single spaces. Everything else on stdout is ignored.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{extract_code_block, Backend, CompletionRequest, RequestTag};
use crate::error::{Error, Result};
use crate::prompts::{PromptSet, TemplateKind};
use crate::retry::RetryPolicy;
use crate::types::{
    render_records, Candidate, Problem, RunConfig, SimulatorConfig, SimulatorKind, Testbench,
    TestbenchProvenance, TestCaseRecord, Trace, TraceStatus, Validity, TRACE_MARKER,
};

/// Parses simulator stdout into per-test-case records.
///
/// Lines starting with the marker must follow the grammar exactly; a later
/// assignment to the same signal within a test case overrides an earlier one.
pub fn parse_trace(stdout: &str) -> Result<Vec<TestCaseRecord>> {
    let mut by_tc: BTreeMap<u64, BTreeMap<String, String>> = BTreeMap::new();
    for (idx, line) in stdout.lines().enumerate() {
        let line = line.trim_end();
        let Some(rest) = line.strip_prefix(TRACE_MARKER) else {
            continue;
        };
        let err = |message: String| Error::TraceParse {
            line: idx + 1,
            message,
        };
        let rest = rest
            .strip_prefix(' ')
            .ok_or_else(|| err("expected a single space after the marker".into()))?;
        let mut fields = rest.split(' ');
        let tc_field = fields.next().unwrap_or_default();
        let tc = tc_field
            .strip_prefix("tc=")
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse::<u64>().ok())
            .ok_or_else(|| err(format!("expected `tc=<decimal>`, found `{tc_field}`")))?;
        let signals = by_tc.entry(tc).or_default();
        let mut n_signals = 0;
        for field in fields {
            if field.is_empty() {
                return Err(err("fields must be separated by single spaces".into()));
            }
            let (name, value) = field
                .split_once('=')
                .ok_or_else(|| err(format!("expected `<ident>=<token>`, found `{field}`")))?;
            if !is_signal_ident(name) {
                return Err(err(format!("invalid signal name `{name}`")));
            }
            if value.is_empty() || value.contains('=') {
                return Err(err(format!("invalid value token in `{field}`")));
            }
            signals.insert(name.to_string(), canonical_value(value));
            n_signals += 1;
        }
        if n_signals == 0 {
            return Err(err("marker line carries no signals".into()));
        }
    }
    Ok(by_tc
        .into_iter()
        .map(|(tc, signals)| TestCaseRecord { tc, signals })
        .collect())
}

/// Renders records back into marker lines.
pub fn render_trace(records: &[TestCaseRecord]) -> String {
    render_records(records)
}

fn is_signal_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '[' | ']'))
        && s != "tc"
}

/// Hex digits are lowercased; `x`/`z` digits (either case) and width are kept.
/// Tokens that are not hex-like pass through verbatim.
pub fn canonical_value(token: &str) -> String {
    let hex_like = token
        .chars()
        .all(|c| c.is_ascii_hexdigit() || matches!(c, 'x' | 'X' | 'z' | 'Z' | '_'));
    if hex_like {
        token
            .chars()
            .map(|c| if matches!(c, 'A'..='F') { c.to_ascii_lowercase() } else { c })
            .collect()
    } else {
        token.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKind {
    /// Print-only bench; output is parsed into a trace.
    Generated,
    /// The benchmark's checking bench, used only for final verification.
    Reference,
}

#[derive(Debug, Clone)]
pub struct SimJob<'a> {
    pub problem_id: &'a str,
    pub candidate_id: &'a str,
    pub code: &'a str,
    pub bench: &'a str,
    pub kind: BenchKind,
    pub timeout: Duration,
    /// Private scratch directory for this job; created if missing.
    pub workdir: &'a Path,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub status: TraceStatus,
    pub stdout: String,
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxCheck {
    pub validity: Validity,
    pub diagnostics: String,
}

pub trait Simulator: Send + Sync {
    /// Fails with [`Error::Environment`] when the toolchain is unusable.
    fn preflight(&self) -> Result<()>;

    /// Compile-only check of a single source.
    fn compile_only(&self, code: &str, workdir: &Path) -> Result<SyntaxCheck>;

    fn execute(&self, job: &SimJob<'_>) -> Result<Execution>;
}

/// Runs a compile-only check in a throwaway directory.
pub fn check_syntax(sim: &dyn Simulator, code: &str) -> Result<SyntaxCheck> {
    if code.trim().is_empty() {
        return Ok(SyntaxCheck {
            validity: Validity::SyntacticallyInvalid,
            diagnostics: "empty source".into(),
        });
    }
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    sim.compile_only(code, dir.path())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimOutcome {
    pub trace: Trace,
    pub diagnostics: String,
}

/// Simulates one candidate against a print-only bench and parses its trace.
/// Stdout and diagnostics are kept in the job's workdir for audit.
pub fn simulate(sim: &dyn Simulator, job: &SimJob<'_>) -> Result<SimOutcome> {
    std::fs::create_dir_all(job.workdir).map_err(|e| Error::io(job.workdir, e))?;
    let exec = sim.execute(job)?;
    write_file(&job.workdir.join("stdout.txt"), &exec.stdout)?;
    let (trace, diagnostics) = match exec.status {
        TraceStatus::Ok => match parse_trace(&exec.stdout) {
            Ok(records) => (Trace::ok(job.candidate_id, records), exec.diagnostics),
            Err(e) => (
                Trace::failed(job.candidate_id, TraceStatus::RuntimeError),
                format!("{}malformed trace output: {e}", with_newline(&exec.diagnostics)),
            ),
        },
        status => (Trace::failed(job.candidate_id, status), exec.diagnostics),
    };
    if !diagnostics.is_empty() {
        write_file(&job.workdir.join("diagnostics.txt"), &diagnostics)?;
    }
    Ok(SimOutcome { trace, diagnostics })
}

fn with_newline(s: &str) -> String {
    if s.is_empty() || s.ends_with('\n') {
        s.to_string()
    } else {
        format!("{s}\n")
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn build_simulator(config: &SimulatorConfig) -> Result<Box<dyn Simulator>> {
    Ok(match config.kind {
        SimulatorKind::Command => Box::new(CommandSimulator::new(config)?),
        SimulatorKind::Mock => {
            let path = config
                .mock_sidecar
                .as_deref()
                .ok_or_else(|| Error::config("mock simulator needs `mock_sidecar`"))?;
            Box::new(MockSimulator::from_file(path)?)
        }
    })
}

/// Drives an external simulator through two command templates.
#[derive(Debug, Clone)]
pub struct CommandSimulator {
    compile: Vec<String>,
    run: Vec<String>,
}

const OUTPUT_CAP: usize = 16 << 20;

impl CommandSimulator {
    pub fn new(config: &SimulatorConfig) -> Result<Self> {
        let split = |t: &str, name: &str| -> Result<Vec<String>> {
            let parts: Vec<String> = t.split_whitespace().map(str::to_string).collect();
            if parts.is_empty() {
                return Err(Error::config(format!("{name} template is empty")));
            }
            Ok(parts)
        };
        let compile = split(&config.compile_template, "compile")?;
        let run = split(&config.run_template, "run")?;
        if !compile.iter().any(|p| p.contains("{sources}")) || !compile.iter().any(|p| p.contains("{out}")) {
            return Err(Error::config("compile template must mention {sources} and {out}"));
        }
        if !run.iter().any(|p| p.contains("{out}")) {
            return Err(Error::config("run template must mention {out}"));
        }
        Ok(CommandSimulator { compile, run })
    }

    fn expand(template: &[String], sources: &[PathBuf], out: &Path) -> Vec<String> {
        let out = out.to_string_lossy();
        let mut args = Vec::new();
        for part in template {
            if part == "{sources}" {
                args.extend(sources.iter().map(|s| s.to_string_lossy().into_owned()));
            } else {
                args.push(part.replace("{out}", &out));
            }
        }
        args
    }

    fn compile(&self, sources: &[PathBuf], workdir: &Path, timeout: Duration) -> Result<Captured> {
        let args = Self::expand(&self.compile, sources, &workdir.join("sim.out"));
        run_with_timeout(&args, workdir, timeout)
    }
}

impl Simulator for CommandSimulator {
    fn preflight(&self) -> Result<()> {
        for program in [&self.compile[0], &self.run[0]] {
            if find_program(program).is_none() {
                return Err(Error::Environment(format!("simulator program `{program}` not found")));
            }
        }
        Ok(())
    }

    fn compile_only(&self, code: &str, workdir: &Path) -> Result<SyntaxCheck> {
        let src = workdir.join("design.v");
        write_file(&src, code)?;
        let c = self.compile(&[src], workdir, Duration::from_secs(60))?;
        let validity = if c.timed_out || !c.success {
            Validity::SyntacticallyInvalid
        } else {
            Validity::Valid
        };
        Ok(SyntaxCheck {
            validity,
            diagnostics: c.combined(),
        })
    }

    fn execute(&self, job: &SimJob<'_>) -> Result<Execution> {
        std::fs::create_dir_all(job.workdir).map_err(|e| Error::io(job.workdir, e))?;
        let design = job.workdir.join("design.v");
        let bench = job.workdir.join("tb.v");
        write_file(&design, job.code)?;
        write_file(&bench, job.bench)?;
        let started = Instant::now();
        let c = self.compile(&[bench, design], job.workdir, job.timeout)?;
        if c.timed_out {
            return Ok(Execution {
                status: TraceStatus::Timeout,
                stdout: String::new(),
                diagnostics: c.combined(),
            });
        }
        if !c.success {
            return Ok(Execution {
                status: TraceStatus::CompileError,
                stdout: String::new(),
                diagnostics: c.combined(),
            });
        }
        let remaining = job.timeout.saturating_sub(started.elapsed());
        let args = Self::expand(&self.run, &[], &job.workdir.join("sim.out"));
        let r = run_with_timeout(&args, job.workdir, remaining)?;
        let status = if r.timed_out {
            TraceStatus::Timeout
        } else if !r.success {
            TraceStatus::RuntimeError
        } else {
            TraceStatus::Ok
        };
        Ok(Execution {
            status,
            diagnostics: r.stderr.clone(),
            stdout: r.stdout,
        })
    }
}

fn find_program(program: &str) -> Option<PathBuf> {
    if program.contains('/') {
        let p = PathBuf::from(program);
        return p.is_file().then_some(p);
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|p| p.is_file())
    })
}

#[derive(Debug)]
struct Captured {
    success: bool,
    timed_out: bool,
    stdout: String,
    stderr: String,
}

impl Captured {
    fn combined(&self) -> String {
        format!("{}{}", self.stdout, self.stderr)
    }
}

fn drain(mut reader: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = OUTPUT_CAP.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        String::from_utf8_lossy(&kept).into_owned()
    })
}

/// Runs `args` in its own process group; on timeout the whole group is killed.
fn run_with_timeout(args: &[String], cwd: &Path, timeout: Duration) -> Result<Captured> {
    let mut cmd = Command::new(&args[0]);
    cmd.args(&args[1..])
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let mut child = cmd.spawn().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Environment(format!("simulator program `{}` not found", args[0]))
        } else {
            Error::io(&args[0], e)
        }
    })?;
    let out = drain(child.stdout.take().expect("piped stdout"));
    let err = drain(child.stderr.take().expect("piped stderr"));
    let deadline = Instant::now() + timeout;
    let (success, timed_out) = loop {
        match child.try_wait().map_err(|e| Error::io(&args[0], e))? {
            Some(status) => {
                // Reap stragglers the tool may have left in its group.
                kill_group(&child);
                break (status.success(), false);
            }
            None if Instant::now() >= deadline => {
                kill_group(&child);
                let _ = child.wait();
                break (false, true);
            }
            None => thread::sleep(Duration::from_millis(5)),
        }
    };
    Ok(Captured {
        success,
        timed_out,
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
    })
}

fn kill_group(child: &Child) {
    // SAFETY: plain signal delivery to the group we created with process_group(0).
    unsafe {
        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
    }
}

/// Scripted outcome for one candidate in a mock sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedTrace {
    pub status: TraceStatus,
    #[serde(default)]
    pub records: Vec<TestCaseRecord>,
}

/// Sidecar consumed by [`MockSimulator`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockSidecar {
    /// Candidate id to scripted trace on the generated bench.
    #[serde(default)]
    pub traces: BTreeMap<String, ScriptedTrace>,
    /// Problem id to the behavior a reference bench accepts.
    #[serde(default)]
    pub reference_traces: BTreeMap<String, Vec<TestCaseRecord>>,
    /// Candidate id to an explicit reference-bench verdict (wins over
    /// `reference_traces`).
    #[serde(default)]
    pub verdicts: BTreeMap<String, bool>,
}

/// Hermetic simulator driven by a sidecar file.
///
/// Code "compiles" when it is non-empty, has balanced `module`/`endmodule`
/// keywords and does not contain `SYNTAX_ERROR`. A generated bench that
/// never mentions the trace marker produces no marker output.
#[derive(Debug, Clone)]
pub struct MockSimulator {
    sidecar: MockSidecar,
    module_re: Regex,
    endmodule_re: Regex,
}

impl MockSimulator {
    pub fn new(mut sidecar: MockSidecar) -> Self {
        let canon = |records: &mut Vec<TestCaseRecord>| {
            for r in records.iter_mut() {
                for v in r.signals.values_mut() {
                    *v = canonical_value(v);
                }
            }
            records.sort_by_key(|r| r.tc);
        };
        sidecar.traces.values_mut().for_each(|t| canon(&mut t.records));
        sidecar.reference_traces.values_mut().for_each(canon);
        MockSimulator {
            sidecar,
            module_re: Regex::new(r"\bmodule\b").unwrap(),
            endmodule_re: Regex::new(r"\bendmodule\b").unwrap(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self::new(sidecar))
    }

    fn compiles(&self, code: &str) -> bool {
        let opens = self.module_re.find_iter(code).count();
        opens > 0 && opens == self.endmodule_re.find_iter(code).count() && !code.contains("SYNTAX_ERROR")
    }

    fn echo_bench_markers(bench: &str) -> String {
        let mut out = String::new();
        for line in bench.lines() {
            if let Some(pos) = line.find(TRACE_MARKER) {
                let rest = &line[pos..];
                let end = rest.find('"').unwrap_or(rest.len());
                out.push_str(rest[..end].trim_end());
                out.push('\n');
            }
        }
        out
    }

    fn reference_verdict(&self, job: &SimJob<'_>) -> Option<bool> {
        if let Some(v) = self.sidecar.verdicts.get(job.candidate_id) {
            return Some(*v);
        }
        let golden = self.sidecar.reference_traces.get(job.problem_id)?;
        let scripted = self.sidecar.traces.get(job.candidate_id)?;
        Some(scripted.status == TraceStatus::Ok && &scripted.records == golden)
    }
}

impl Simulator for MockSimulator {
    fn preflight(&self) -> Result<()> {
        Ok(())
    }

    fn compile_only(&self, code: &str, _workdir: &Path) -> Result<SyntaxCheck> {
        Ok(if self.compiles(code) {
            SyntaxCheck {
                validity: Validity::Valid,
                diagnostics: String::new(),
            }
        } else {
            SyntaxCheck {
                validity: Validity::SyntacticallyInvalid,
                diagnostics: "mock: unbalanced module/endmodule or SYNTAX_ERROR".into(),
            }
        })
    }

    fn execute(&self, job: &SimJob<'_>) -> Result<Execution> {
        let done = |status, stdout: String, diagnostics: &str| {
            Ok(Execution {
                status,
                stdout,
                diagnostics: diagnostics.to_string(),
            })
        };
        let bench_ok = job.kind == BenchKind::Reference || self.compiles(job.bench);
        if !self.compiles(job.code) || !bench_ok {
            return done(TraceStatus::CompileError, String::new(), "mock: compile failed");
        }
        match job.kind {
            BenchKind::Reference => match self.reference_verdict(job) {
                Some(pass) => done(
                    TraceStatus::Ok,
                    format!("Mismatches: {} in 1 samples\n", u8::from(!pass)),
                    "",
                ),
                None => done(TraceStatus::RuntimeError, String::new(), "mock: no scripted verdict"),
            },
            BenchKind::Generated => {
                if !job.bench.contains(TRACE_MARKER) {
                    return done(TraceStatus::Ok, "mock: simulation finished\n".into(), "");
                }
                match self.sidecar.traces.get(job.candidate_id) {
                    Some(s) if s.status == TraceStatus::Ok => {
                        done(TraceStatus::Ok, format!("VCD info: mock\n{}", render_trace(&s.records)), "")
                    }
                    Some(s) => done(s.status, String::new(), "mock: scripted failure"),
                    None => done(TraceStatus::Ok, Self::echo_bench_markers(job.bench), ""),
                }
            }
        }
    }
}

/// Asks the backend for a print-only testbench and accepts the first one
/// that compiles against `probe` and prints at least one marker line.
#[allow(clippy::too_many_arguments)]
pub fn generate_testbench(
    problem: &Problem,
    probe: &Candidate,
    backend: &dyn Backend,
    sim: &dyn Simulator,
    prompts: &PromptSet,
    config: &RunConfig,
    workdir: &Path,
) -> Result<Testbench> {
    let min_cases = config.min_test_cases.to_string();
    let (system_prompt, user_prompt) = prompts.render(
        TemplateKind::Testbench,
        &[
            ("spec_text", &problem.spec_text),
            ("module_interface", &problem.module_interface),
            ("min_test_cases", &min_cases),
            ("marker", TRACE_MARKER),
        ],
    )?;
    let request = CompletionRequest {
        system_prompt,
        user_prompt,
        temperature_policy: config.backend.temperature,
        tag: RequestTag::Testbench,
    };
    let retry = RetryPolicy::new(config.retry_limit, config.retry_base_delay_ms);
    for attempt in 1..=retry.limit {
        retry.wait_before(attempt);
        let response = backend.complete(&request)?;
        let Some(code) = extract_code_block(&response.final_text) else {
            log::info!("{}: testbench attempt {attempt}: no code block", problem.id);
            continue;
        };
        let dir = workdir.join(format!("attempt{attempt}"));
        let job = SimJob {
            problem_id: &problem.id,
            candidate_id: &probe.id,
            code: &probe.code,
            bench: &code,
            kind: BenchKind::Generated,
            timeout: Duration::from_millis(config.sim_timeout_ms),
            workdir: &dir,
        };
        let outcome = simulate(sim, &job)?;
        if outcome.trace.is_ok() && !outcome.trace.records.is_empty() {
            return Ok(Testbench {
                problem_id: problem.id.clone(),
                code,
                num_test_cases: outcome.trace.records.len(),
                provenance: TestbenchProvenance::LlmGenerated,
            });
        }
        log::info!(
            "{}: testbench attempt {attempt} rejected ({:?}, {} records)",
            problem.id,
            outcome.trace.status,
            outcome.trace.records.len()
        );
    }
    Err(Error::TestbenchUnavailable {
        problem: problem.id.clone(),
        attempts: retry.limit,
    })
}

/// Simulates many jobs on a bounded pool, keeping input order.
pub fn simulate_many(
    sim: &dyn Simulator,
    jobs: &[SimJob<'_>],
    workers: usize,
) -> Result<Vec<SimOutcome>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Environment(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|job| simulate(sim, job)).collect())
}

/// Convenience for building a `HashMap` lookup of traces by candidate id.
pub fn index_traces(traces: impl IntoIterator<Item = Trace>) -> HashMap<String, Trace> {
    traces.into_iter().map(|t| (t.candidate_id.clone(), t)).collect()
}
