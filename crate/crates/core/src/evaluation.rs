//! Verification against reference benches, pass@k, and method comparison.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::density::{filter_by_density, normalized_lengths};
use crate::error::{Error, Result};
use crate::ranking::rank;
use crate::sim::{BenchKind, SimJob, Simulator};
use crate::types::{Candidate, CircuitKind, FilterConfig, Problem, SelectionMode, Trace, TraceStatus};

/// Unbiased pass@k: the chance that a uniformly drawn k-subset of `n`
/// samples, `c` of them correct, contains at least one correct sample.
///
/// Evaluated as `1 - prod_{i=n-c+1}^{n} (1 - k/i)`, which never forms a
/// binomial coefficient and so cannot overflow.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::contract(format!("pass@k needs 1 <= k <= n (n={n}, k={k})")));
    }
    if c > n {
        return Err(Error::contract(format!("pass@k needs c <= n (n={n}, c={c})")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaselineRandom,
    Vrank,
    PreVrank,
    Vfocus,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::BaselineRandom, Method::Vrank, Method::PreVrank, Method::Vfocus];

    pub fn label(self) -> &'static str {
        match self {
            Method::BaselineRandom => "baseline",
            Method::Vrank => "vrank",
            Method::PreVrank => "pre_vrank",
            Method::Vfocus => "vfocus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassKReport {
    pub problem_id: String,
    pub n: usize,
    pub c: usize,
    pub pass_at: BTreeMap<usize, f64>,
    pub method: Method,
}

/// Runs a candidate against the benchmark's checking bench.
pub fn verify(
    sim: &dyn Simulator,
    candidate: &Candidate,
    reference_bench: &str,
    failure: &Regex,
    timeout: Duration,
    workdir: &Path,
) -> Result<bool> {
    if !candidate.is_valid() {
        return Ok(false);
    }
    let job = SimJob {
        problem_id: &candidate.problem_id,
        candidate_id: &candidate.id,
        code: &candidate.code,
        bench: reference_bench,
        kind: BenchKind::Reference,
        timeout,
        workdir,
    };
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let exec = sim.execute(&job)?;
    std::fs::write(workdir.join("verify.stdout.txt"), &exec.stdout).map_err(|e| Error::io(workdir, e))?;
    Ok(exec.status == TraceStatus::Ok && !failure.is_match(&exec.stdout))
}

/// What evaluation needs to know about one problem of a finished run.
#[derive(Debug, Clone, Default)]
pub struct ProblemEvalInput {
    pub problem: Option<Problem>,
    /// Initially sampled candidates (the baseline pool).
    pub candidates: Vec<Candidate>,
    pub refined: Vec<Candidate>,
    pub traces: HashMap<String, Trace>,
    /// Survivors of density filtering.
    pub filtered_ids: Option<Vec<String>>,
    /// Pool of the post-refinement ranking.
    pub final_pool: Option<Vec<String>>,
    /// Reference-bench outcome per candidate id.
    pub verdicts: BTreeMap<String, bool>,
}

impl ProblemEvalInput {
    fn problem_id(&self) -> &str {
        self.problem.as_ref().map_or("", |p| p.id.as_str())
    }

    fn passes(&self, id: &str) -> bool {
        self.verdicts.get(id).copied().unwrap_or(false)
    }

    fn correct_count(&self, pool: &[&Candidate]) -> usize {
        pool.iter().filter(|c| self.passes(&c.id)).count()
    }

    fn lookup<'a>(&'a self, ids: &[String]) -> Vec<&'a Candidate> {
        let all: HashMap<&str, &Candidate> = self
            .candidates
            .iter()
            .chain(&self.refined)
            .map(|c| (c.id.as_str(), c))
            .collect();
        ids.iter().filter_map(|id| all.get(id.as_str()).copied()).collect()
    }

    /// Whether ranking `pool` selects a passing candidate.
    fn selection_passes(&self, pool: &[&Candidate], selection: SelectionMode, seed: u64) -> bool {
        let ranked: Vec<Candidate> = pool
            .iter()
            .filter(|c| c.is_valid() && self.traces.contains_key(&c.id))
            .map(|c| (*c).clone())
            .collect();
        match rank(&ranked, &self.traces, selection, seed) {
            Ok(r) => self.passes(&r.selected),
            Err(_) => false,
        }
    }

    fn method_pool(&self, method: Method) -> Option<Vec<&Candidate>> {
        match method {
            Method::BaselineRandom | Method::Vrank => Some(self.candidates.iter().collect()),
            Method::PreVrank => self.filtered_ids.as_deref().map(|ids| self.lookup(ids)),
            Method::Vfocus => self.final_pool.as_deref().map(|ids| self.lookup(ids)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub repeats: usize,
    pub selection: SelectionMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    /// `all`, `CMB` or `SEQ`.
    pub subset: String,
    pub problems: usize,
    pub k: usize,
    pub mean: f64,
    /// Spread of the subset mean across repeats.
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub reports: Vec<PassKReport>,
    pub aggregates: Vec<AggregateRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Baseline pass@k from the unbiased estimator over every sampled candidate;
/// selection methods get pass@1 as the fraction of repeats whose selected
/// candidate verifies.
pub fn evaluate_methods(inputs: &[ProblemEvalInput], ks: &[usize], opts: EvalOptions) -> Result<EvaluationReport> {
    let repeats = opts.repeats.max(1);
    // pass@1 anchors the per-method table, so it is always reported.
    let mut ks: Vec<usize> = ks.iter().copied().chain([1]).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut reports = Vec::new();
    // (method, problem index) -> per-repeat outcome in {0,1}
    let mut outcomes: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
    for (pi, input) in inputs.iter().enumerate() {
        let n = input.candidates.len();
        let c = input.correct_count(&input.candidates.iter().collect::<Vec<_>>());
        for method in Method::ALL {
            let mut pass_at = BTreeMap::new();
            if method == Method::BaselineRandom {
                for &k in ks.iter().filter(|&&k| k >= 1 && k <= n) {
                    pass_at.insert(k, pass_at_k(n as u64, c as u64, k as u64)?);
                }
            } else {
                let per_repeat: Vec<f64> = match input.method_pool(method) {
                    Some(pool) => (0..repeats)
                        .map(|r| {
                            let seed = opts.seed.wrapping_add(r as u64);
                            f64::from(u8::from(input.selection_passes(&pool, opts.selection, seed)))
                        })
                        .collect(),
                    None => vec![0.0; repeats],
                };
                pass_at.insert(1, mean_std(&per_repeat).0);
                outcomes.insert((method, pi), per_repeat);
            }
            reports.push(PassKReport {
                problem_id: input.problem_id().to_string(),
                n,
                c,
                pass_at,
                method,
            });
        }
    }

    let subsets: [(&str, Option<CircuitKind>); 3] = [
        ("all", None),
        ("CMB", Some(CircuitKind::Combinational)),
        ("SEQ", Some(CircuitKind::Sequential)),
    ];
    let mut aggregates = Vec::new();
    for (label, kind) in subsets {
        let members: Vec<usize> = inputs
            .iter()
            .enumerate()
            .filter(|(_, i)| kind.is_none() || i.problem.as_ref().map(|p| p.circuit_kind) == kind)
            .map(|(pi, _)| pi)
            .collect();
        if members.is_empty() && kind.is_some() {
            continue;
        }
        for &k in &ks {
            let vals: Vec<f64> = members
                .iter()
                .filter_map(|&pi| reports[pi * Method::ALL.len()].pass_at.get(&k).copied())
                .collect();
            if vals.is_empty() {
                continue;
            }
            aggregates.push(AggregateRow {
                method: Method::BaselineRandom,
                subset: label.to_string(),
                problems: vals.len(),
                k,
                mean: mean_std(&vals).0,
                stddev: 0.0,
            });
        }
        for method in [Method::Vrank, Method::PreVrank, Method::Vfocus] {
            let per_repeat_means: Vec<f64> = (0..repeats)
                .map(|r| {
                    let vals: Vec<f64> = members.iter().map(|&pi| outcomes[&(method, pi)][r]).collect();
                    mean_std(&vals).0
                })
                .collect();
            let (mean, stddev) = mean_std(&per_repeat_means);
            aggregates.push(AggregateRow {
                method,
                subset: label.to_string(),
                problems: members.len(),
                k: 1,
                mean,
                stddev,
            });
        }
    }
    Ok(EvaluationReport { reports, aggregates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub dataset: String,
    pub method: String,
    #[serde(rename = "pass@1")]
    pub pass_at_1: f64,
    pub delta_vs_baseline: f64,
}

/// Flattens the pass@1 aggregates into one row per (subset, method).
pub fn table_rows(report: &EvaluationReport, model: &str, dataset: &str) -> Vec<TableRow> {
    let mut rows = Vec::new();
    let subsets: Vec<&str> = {
        let mut s: Vec<&str> = Vec::new();
        for a in &report.aggregates {
            if !s.contains(&a.subset.as_str()) {
                s.push(&a.subset);
            }
        }
        s
    };
    for subset in subsets {
        let at1: Vec<&AggregateRow> = report
            .aggregates
            .iter()
            .filter(|a| a.subset == subset && a.k == 1)
            .collect();
        let baseline = at1
            .iter()
            .find(|a| a.method == Method::BaselineRandom)
            .map_or(0.0, |a| a.mean);
        let label = match at1.first() {
            Some(a) if subset != "all" => format!("{dataset}:{subset}({})", a.problems),
            _ => dataset.to_string(),
        };
        for a in at1 {
            rows.push(TableRow {
                model: model.to_string(),
                dataset: label.clone(),
                method: a.method.label().to_string(),
                pass_at_1: a.mean,
                delta_vs_baseline: a.mean - baseline,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthPassRow {
    pub problem_id: String,
    pub candidate_id: String,
    pub normalized_length: f64,
    pub passed: bool,
    pub model: String,
    pub degenerate: bool,
}

/// One row per valid candidate: where its reasoning length sits within its
/// problem's range, and whether it verified.
pub fn length_vs_pass_report(inputs: &[ProblemEvalInput], model: &str) -> Vec<LengthPassRow> {
    let mut rows = Vec::new();
    for input in inputs {
        let norm = normalized_lengths(&input.candidates);
        for c in input.candidates.iter().filter(|c| c.is_valid()) {
            rows.push(LengthPassRow {
                problem_id: input.problem_id().to_string(),
                candidate_id: c.id.clone(),
                normalized_length: norm.values[&c.id],
                passed: input.passes(&c.id),
                model: model.to_string(),
                degenerate: norm.degenerate,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub method: Method,
    pub mean: f64,
    pub stddev: f64,
}

fn subset_seed(seed: u64, size: usize, repeat: usize, problem: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [size as u64, repeat as u64, problem as u64] {
        h = (h ^ x).wrapping_mul(0x100_0000_01b3).rotate_left(17);
    }
    h
}

/// Re-evaluates baseline, vrank and pre_vrank pass@1 on random subsets of
/// each problem's candidates. Sizes larger than the smallest problem's
/// candidate count are skipped.
pub fn sample_size_sweep(
    inputs: &[ProblemEvalInput],
    sizes: &[usize],
    filter: &FilterConfig,
    opts: EvalOptions,
) -> Result<Vec<SweepRow>> {
    let repeats = opts.repeats.max(1);
    let available = inputs.iter().map(|i| i.candidates.len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    for &size in sizes {
        if size == 0 || size > available {
            log::warn!("sample-size sweep: skipping size {size} (available {available})");
            continue;
        }
        let methods = [Method::BaselineRandom, Method::Vrank, Method::PreVrank];
        let mut per_repeat: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
        for r in 0..repeats {
            let mut sums: BTreeMap<Method, f64> = BTreeMap::new();
            for (pi, input) in inputs.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(subset_seed(opts.seed, size, r, pi));
                let mut idx = rand::seq::index::sample(&mut rng, input.candidates.len(), size).into_vec();
                idx.sort_unstable();
                let subset: Vec<&Candidate> = idx.iter().map(|&i| &input.candidates[i]).collect();
                let seed = opts.seed.wrapping_add(r as u64);
                let baseline = input.correct_count(&subset) as f64 / size as f64;
                let vrank = input.selection_passes(&subset, opts.selection, seed);
                let owned: Vec<Candidate> = subset.iter().map(|c| (*c).clone()).collect();
                let (kept, _) = filter_by_density(&owned, filter)?;
                let kept_refs: Vec<&Candidate> = kept.iter().collect();
                let pre = input.selection_passes(&kept_refs, opts.selection, seed);
                *sums.entry(Method::BaselineRandom).or_default() += baseline;
                *sums.entry(Method::Vrank).or_default() += f64::from(u8::from(vrank));
                *sums.entry(Method::PreVrank).or_default() += f64::from(u8::from(pre));
            }
            for m in methods {
                per_repeat
                    .entry(m)
                    .or_default()
                    .push(sums.get(&m).copied().unwrap_or(0.0) / inputs.len().max(1) as f64);
            }
        }
        for m in methods {
            let (mean, stddev) = mean_std(&per_repeat[&m]);
            rows.push(SweepRow {
                size,
                method: m,
                mean,
                stddev,
            });
        }
    }
    Ok(rows)
}
