//! Candidate sampling with per-slot retries.

use rayon::prelude::*;

use crate::backend::{extract_code_block, Backend, CompletionRequest, CompletionResponse, RequestTag};
use crate::error::{Error, Result};
use crate::prompts::{PromptSet, TemplateKind};
use crate::retry::RetryPolicy;
use crate::sim::{check_syntax, Simulator};
use crate::types::{Candidate, Problem, Provenance, RunConfig, TemperaturePolicy, Tokenizer, Validity};

pub fn build_sampling_prompt(
    problem: &Problem,
    prompts: &PromptSet,
    temperature_policy: TemperaturePolicy,
) -> Result<CompletionRequest> {
    let (system_prompt, user_prompt) = prompts.render(
        TemplateKind::Sampling,
        &[
            ("spec_text", &problem.spec_text),
            ("module_interface", &problem.module_interface),
        ],
    )?;
    Ok(CompletionRequest {
        system_prompt,
        user_prompt,
        temperature_policy,
        tag: RequestTag::Sampling,
    })
}

/// Everything a slot needs to turn completions into a labeled candidate.
pub struct SlotContext<'a> {
    pub backend: &'a dyn Backend,
    pub sim: &'a dyn Simulator,
    pub tokenizer: &'a dyn Tokenizer,
    pub retry: RetryPolicy,
}

/// A finished slot: the kept candidate plus the raw text of its last attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledSlot {
    pub candidate: Candidate,
    pub raw: String,
}

impl SlotContext<'_> {
    /// Requests completions until one yields compiling code with reasoning
    /// (when the backend exposes reasoning). After `retry.limit` failures the
    /// last attempt is kept with its failure label.
    pub fn fill_slot(
        &self,
        request: &CompletionRequest,
        id: String,
        problem_id: &str,
        provenance: Provenance,
    ) -> Result<SampledSlot> {
        let mut last = None;
        for attempt in 1..=self.retry.limit {
            self.retry.wait_before(attempt);
            let response = self.backend.complete(request)?;
            let (code, validity) = self.label(&response)?;
            let reasoning_len = self.tokenizer.count(&response.reasoning_trace);
            let candidate = Candidate {
                id: id.clone(),
                problem_id: problem_id.to_string(),
                code,
                // An all-whitespace trace counts as absent.
                reasoning_trace: if reasoning_len == 0 {
                    String::new()
                } else {
                    response.reasoning_trace.clone()
                },
                reasoning_len,
                attempts_used: attempt,
                validity,
                provenance,
            };
            let done = candidate.is_valid();
            last = Some(SampledSlot {
                candidate,
                raw: response.raw,
            });
            if done {
                break;
            }
            log::debug!("{id}: attempt {attempt} rejected ({validity:?})");
        }
        last.ok_or_else(|| Error::config("retry limit must be at least 1"))
    }

    fn label(&self, response: &CompletionResponse) -> Result<(String, Validity)> {
        let Some(code) = extract_code_block(&response.final_text) else {
            return Ok((String::new(), Validity::SyntacticallyInvalid));
        };
        if check_syntax(self.sim, &code)?.validity != Validity::Valid {
            return Ok((code, Validity::SyntacticallyInvalid));
        }
        if self.backend.exposes_reasoning() && self.tokenizer.count(&response.reasoning_trace) == 0 {
            return Ok((code, Validity::MissingReasoning));
        }
        Ok((code, Validity::Valid))
    }
}

/// Id of the `slot`-th sampled candidate. Zero padding keeps lexicographic
/// and numeric order aligned; refined candidates (`-r...`) sort after.
pub fn candidate_id(problem_id: &str, slot: usize) -> String {
    format!("{problem_id}-c{slot:03}")
}

/// Samples exactly `n` candidates for one problem.
pub fn sample_candidates(
    problem: &Problem,
    n: usize,
    ctx: &SlotContext<'_>,
    prompts: &PromptSet,
    config: &RunConfig,
) -> Result<Vec<SampledSlot>> {
    sample_candidates_with(problem, n, ctx, prompts, config, &|_| Ok(()))
}

/// Like [`sample_candidates`], handing each finished slot to `sink` as soon
/// as it completes so partial progress survives a fatal backend error.
pub fn sample_candidates_with(
    problem: &Problem,
    n: usize,
    ctx: &SlotContext<'_>,
    prompts: &PromptSet,
    config: &RunConfig,
    sink: &(dyn Fn(&SampledSlot) -> Result<()> + Sync),
) -> Result<Vec<SampledSlot>> {
    if n == 0 {
        return Err(Error::contract("sample_candidates needs n >= 1"));
    }
    let request = build_sampling_prompt(problem, prompts, config.backend.temperature)?;
    let fill = |slot: usize| {
        let s = ctx.fill_slot(&request, candidate_id(&problem.id, slot), &problem.id, Provenance::Initial)?;
        sink(&s)?;
        Ok(s)
    };
    if ctx.backend.order_sensitive() || config.backend.max_in_flight <= 1 {
        (0..n).map(fill).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.backend.max_in_flight)
            .build()
            .map_err(|e| Error::Environment(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(fill).collect())
    }
}
