//! Post-ranking refinement.
//!
//! The top clusters are mined for inconsistencies: pairs of codes inside a
//! cluster (intra) and diverging test cases between clusters (inter). The
//! model is asked for corrected code, the refined candidates are simulated
//! on the same testbench and the enlarged pool is ranked again.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{CompletionRequest, RequestTag};
use crate::error::{Error, Result};
use crate::prompts::{PromptSet, TemplateKind};
use crate::ranking::rank;
use crate::sampler::{SampledSlot, SlotContext};
use crate::sim::{simulate_many, BenchKind, SimJob, Simulator};
use crate::types::{
    Candidate, Cluster, DivergencePoint, Problem, Provenance, RankingResult, RunConfig, TaskClass,
    Testbench, Trace,
};

/// Placeholder for a signal or test case one side never printed.
pub const ABSENT: &str = "<absent>";

/// True when one cluster already holds at least `early_exit_fraction` of
/// the ranked pool.
pub fn should_early_exit(result: &RankingResult, config: &RunConfig) -> bool {
    let threshold = config.early_exit_fraction * result.n_ranked as f64;
    result.largest_cluster_size() as f64 + 1e-9 >= threshold
}

pub struct RefineContext<'a> {
    pub problem: &'a Problem,
    /// The pool that was ranked.
    pub candidates: &'a [Candidate],
    pub traces: &'a HashMap<String, Trace>,
    pub testbench: &'a Testbench,
    pub slots: &'a SlotContext<'a>,
    pub sim: &'a dyn Simulator,
    pub prompts: &'a PromptSet,
    pub config: &'a RunConfig,
    /// Parent of the per-candidate simulation directories.
    pub sim_dir: &'a Path,
}

impl RefineContext<'_> {
    fn code_of(&self, id: &str) -> Result<&str> {
        self.candidates
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.code.as_str())
            .ok_or_else(|| Error::Internal(format!("cluster member `{id}` not in candidate pool")))
    }

    fn trace_of(&self, id: &str) -> Result<&Trace> {
        self.traces
            .get(id)
            .ok_or_else(|| Error::Internal(format!("no trace for cluster member `{id}`")))
    }

    fn request(&self, kind: TemplateKind, tag: RequestTag, values: &[(&str, &str)]) -> Result<CompletionRequest> {
        let mut all = vec![
            ("spec_text", self.problem.spec_text.as_str()),
            ("module_interface", self.problem.module_interface.as_str()),
        ];
        all.extend_from_slice(values);
        let (system_prompt, user_prompt) = self.prompts.render(kind, &all)?;
        Ok(CompletionRequest {
            system_prompt,
            user_prompt,
            temperature_policy: self.config.backend.temperature,
            tag,
        })
    }

    /// Runs one refinement request through the retry loop. `None` when every
    /// attempt came back unusable.
    fn refine(
        &self,
        request: &CompletionRequest,
        id: String,
        provenance: Provenance,
        tags: &mut Vec<RequestTag>,
    ) -> Result<Option<SampledSlot>> {
        let slot = self.slots.fill_slot(request, id, &self.problem.id, provenance)?;
        tags.extend(std::iter::repeat_n(request.tag, slot.candidate.attempts_used as usize));
        if slot.candidate.is_valid() {
            Ok(Some(slot))
        } else {
            log::warn!(
                "{}: refinement `{}` gave no valid code after {} attempts",
                self.problem.id,
                slot.candidate.id,
                slot.candidate.attempts_used
            );
            Ok(None)
        }
    }
}

/// The two lowest ids of a cluster; a singleton is paired with itself.
pub fn intra_pair(cluster: &Cluster) -> Result<(&str, &str)> {
    let mut ids: Vec<&str> = cluster.member_ids.iter().map(String::as_str).collect();
    ids.sort_unstable();
    match ids.as_slice() {
        [] => Err(Error::contract("intra-cluster mining on an empty cluster")),
        [only] => Ok((only, only)),
        [a, b, ..] => Ok((a, b)),
    }
}

const SINGLETON_NOTE: &str =
    "Only one implementation exists in this group, so the same code is shown twice.";

/// Builds the request the model sees for one cluster.
pub fn intra_request(cluster: &Cluster, ctx: &RefineContext<'_>) -> Result<CompletionRequest> {
    let (a, b) = intra_pair(cluster)?;
    let note = if a == b { SINGLETON_NOTE } else { "" };
    ctx.request(
        TemplateKind::RefineIntra,
        RequestTag::RefineIntra,
        &[("code_a", ctx.code_of(a)?), ("code_b", ctx.code_of(b)?), ("note", note)],
    )
}

pub fn mine_intra(
    cluster: &Cluster,
    index: usize,
    ctx: &RefineContext<'_>,
    tags: &mut Vec<RequestTag>,
) -> Result<Option<SampledSlot>> {
    let request = intra_request(cluster, ctx)?;
    ctx.refine(
        &request,
        format!("{}-ri{index}", ctx.problem.id),
        Provenance::RefinedIntra,
        tags,
    )
}

/// Every `(tc, signal)` where the representative traces do not all agree.
pub fn divergence_points(reps: &[(&Cluster, &Trace)]) -> Vec<DivergencePoint> {
    let tcs: BTreeSet<u64> = reps
        .iter()
        .flat_map(|(_, t)| t.records.iter().map(|r| r.tc))
        .collect();
    let mut points = Vec::new();
    for tc in tcs {
        let records: Vec<_> = reps
            .iter()
            .map(|(c, t)| (c, t.records.iter().find(|r| r.tc == tc)))
            .collect();
        let signals: BTreeSet<&String> = records
            .iter()
            .filter_map(|(_, r)| *r)
            .flat_map(|r| r.signals.keys())
            .collect();
        for signal in signals {
            let values: BTreeMap<String, String> = records
                .iter()
                .map(|(c, r)| {
                    let v = r
                        .and_then(|r| r.signals.get(signal))
                        .map_or(ABSENT, String::as_str);
                    (c.trace_key.clone(), v.to_string())
                })
                .collect();
            let distinct: BTreeSet<&String> = values.values().collect();
            if distinct.len() >= 2 {
                points.push(DivergencePoint {
                    tc,
                    signal: signal.clone(),
                    values,
                });
            }
        }
    }
    points
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterMode {
    /// Per-test-case reasoning over the diverging inputs.
    Scenario,
    /// Same reconciliation prompt as intra-cluster, one code per cluster.
    Reconcile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterRecord {
    pub mode: InterMode,
    pub clusters: Vec<String>,
    pub divergence_points: Vec<DivergencePoint>,
    pub produced: Vec<String>,
}

fn render_divergences(points: &[DivergencePoint], labels: &BTreeMap<&str, String>) -> String {
    let mut out = String::new();
    for p in points {
        let _ = write!(out, "- test case {} signal `{}`:", p.tc, p.signal);
        for (key, value) in &p.values {
            let label = labels.get(key.as_str()).map_or("?", String::as_str);
            let _ = write!(out, " {label} printed {value};");
        }
        out.push('\n');
    }
    out
}

pub fn mine_inter(
    top: &[Cluster],
    ctx: &RefineContext<'_>,
    tags: &mut Vec<RequestTag>,
) -> Result<Option<(InterRecord, Vec<SampledSlot>)>> {
    if top.len() < 2 {
        return Ok(None);
    }
    let reps: Vec<(&Cluster, &Trace)> = top
        .iter()
        .map(|c| Ok((c, ctx.trace_of(intra_pair(c)?.0)?)))
        .collect::<Result<_>>()?;
    let points = divergence_points(&reps);
    if points.is_empty() {
        return Err(Error::Internal(format!(
            "{}: distinct clusters show identical representative traces",
            ctx.problem.id
        )));
    }
    let mode = match ctx.problem.task_class {
        TaskClass::SimpleDescription => InterMode::Scenario,
        TaskClass::Behavioral => InterMode::Reconcile,
    };
    let mut produced = Vec::new();
    match mode {
        InterMode::Scenario => {
            let labels: BTreeMap<&str, String> = top
                .iter()
                .enumerate()
                .map(|(i, c)| (c.trace_key.as_str(), format!("group {} ({} codes)", i + 1, c.size)))
                .collect();
            let divergences = render_divergences(&points, &labels);
            let request = ctx.request(
                TemplateKind::RefineInterScenario,
                RequestTag::RefineInter,
                &[("testbench", &ctx.testbench.code), ("divergences", &divergences)],
            )?;
            let id = format!("{}-re0", ctx.problem.id);
            produced.extend(ctx.refine(&request, id, Provenance::RefinedInter, tags)?);
        }
        InterMode::Reconcile => {
            let (lead, lead_trace) = reps[0];
            for (i, (other, other_trace)) in reps.iter().enumerate().skip(1) {
                let note = format!(
                    "Implementation A represents {} agreeing codes, implementation B represents {}.",
                    lead.size, other.size
                );
                let request = ctx.request(
                    TemplateKind::RefineInterReconcile,
                    RequestTag::RefineInter,
                    &[
                        ("code_a", ctx.code_of(&lead_trace.candidate_id)?),
                        ("code_b", ctx.code_of(&other_trace.candidate_id)?),
                        ("note", &note),
                    ],
                )?;
                let id = format!("{}-re{}", ctx.problem.id, i - 1);
                produced.extend(ctx.refine(&request, id, Provenance::RefinedInter, tags)?);
            }
        }
    }
    let record = InterRecord {
        mode,
        clusters: top.iter().map(|c| c.trace_key.clone()).collect(),
        divergence_points: points,
        produced: produced.iter().map(|s| s.candidate.id.clone()).collect(),
    };
    Ok(Some((record, produced)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntraRecord {
    pub cluster: String,
    pub source_ids: Vec<String>,
    pub produced: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLog {
    pub early_exit: bool,
    pub intra: Vec<IntraRecord>,
    pub inter: Option<InterRecord>,
    /// One entry per backend request issued during refinement.
    pub prompt_tags: Vec<RequestTag>,
    pub refined_ids: Vec<String>,
    pub final_ranking: RankingResult,
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub log: RefinementLog,
    pub refined: Vec<SampledSlot>,
    pub refined_traces: Vec<Trace>,
}

/// Mines the top clusters, simulates what comes back and re-ranks the pool.
pub fn refine_and_reselect(result: &RankingResult, ctx: &RefineContext<'_>) -> Result<Refinement> {
    if result.clusters.is_empty() {
        return Err(Error::contract("refinement needs a non-empty ranking"));
    }
    let early_exit = should_early_exit(result, ctx.config);
    let top_n = ctx.config.top_clusters_for_refinement.max(1).min(result.clusters.len());
    let top = &result.clusters[..top_n];
    let mut tags = Vec::new();
    let mut refined = Vec::new();
    let mut intra = Vec::new();
    for (i, cluster) in top.iter().enumerate() {
        let (a, b) = intra_pair(cluster)?;
        let slot = mine_intra(cluster, i, ctx, &mut tags)?;
        intra.push(IntraRecord {
            cluster: cluster.trace_key.clone(),
            source_ids: vec![a.to_string(), b.to_string()],
            produced: slot.as_ref().map(|s| s.candidate.id.clone()),
        });
        refined.extend(slot);
    }
    let inter = if early_exit {
        None
    } else {
        mine_inter(top, ctx, &mut tags)?.map(|(record, slots)| {
            refined.extend(slots);
            record
        })
    };

    let timeout = Duration::from_millis(ctx.config.sim_timeout_ms);
    let dirs: Vec<_> = refined.iter().map(|s| ctx.sim_dir.join(&s.candidate.id)).collect();
    let jobs: Vec<SimJob<'_>> = refined
        .iter()
        .zip(&dirs)
        .map(|(s, dir)| SimJob {
            problem_id: &ctx.problem.id,
            candidate_id: &s.candidate.id,
            code: &s.candidate.code,
            bench: &ctx.testbench.code,
            kind: BenchKind::Generated,
            timeout,
            workdir: dir,
        })
        .collect();
    let refined_traces: Vec<Trace> = simulate_many(ctx.sim, &jobs, ctx.config.simulator.workers)?
        .into_iter()
        .map(|o| o.trace)
        .collect();

    let final_ranking = if refined.is_empty() {
        result.clone()
    } else {
        let mut pool: Vec<Candidate> = ctx
            .candidates
            .iter()
            .filter(|c| result.scores.contains_key(&c.id))
            .cloned()
            .collect();
        pool.extend(refined.iter().map(|s| s.candidate.clone()));
        let mut traces = ctx.traces.clone();
        traces.extend(refined_traces.iter().map(|t| (t.candidate_id.clone(), t.clone())));
        rank(&pool, &traces, ctx.config.selection, ctx.config.seed)?
    };
    Ok(Refinement {
        log: RefinementLog {
            early_exit,
            intra,
            inter,
            prompt_tags: tags,
            refined_ids: refined.iter().map(|s| s.candidate.id.clone()).collect(),
            final_ranking,
        },
        refined,
        refined_traces,
    })
}
