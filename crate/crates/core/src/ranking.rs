//! Self-consistency ranking over simulation traces.
//!
//! Two candidates agree only when their full traces are identical. A
//! candidate's score is the pool size minus the number of candidates it
//! disagrees with, which equals the size of its behavioral cluster.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{canonical_trace_key, Candidate, Cluster, RankingResult, SelectionMode, Trace};

/// 0 when both traces are identical record for record, 1 otherwise.
pub fn strict_loss(a: &Trace, b: &Trace) -> Result<u8> {
    for t in [a, b] {
        if !t.is_ok() {
            return Err(Error::contract(format!(
                "strict_loss on non-ok trace of `{}`",
                t.candidate_id
            )));
        }
    }
    Ok(u8::from(a.records != b.records))
}

/// Clusters and scores `candidates`; those whose trace is not ok are left out
/// before the pool size is fixed.
pub fn rank(
    candidates: &[Candidate],
    traces: &HashMap<String, Trace>,
    selection: SelectionMode,
    seed: u64,
) -> Result<RankingResult> {
    let mut ok: Vec<(&str, String)> = Vec::new();
    for c in candidates {
        let trace = traces
            .get(&c.id)
            .ok_or_else(|| Error::contract(format!("no trace for candidate `{}`", c.id)))?;
        if trace.is_ok() {
            ok.push((c.id.as_str(), canonical_trace_key(trace)?));
        }
    }
    if ok.is_empty() {
        let problem = candidates.first().map_or("", |c| c.problem_id.as_str());
        return Err(Error::NoOkCandidates(problem.to_string()));
    }
    ok.sort();
    ok.dedup_by(|a, b| a.0 == b.0);

    let mut by_key: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (id, key) in &ok {
        by_key.entry(key).or_default().push(id.to_string());
    }
    let mut clusters: Vec<Cluster> = by_key
        .into_iter()
        .map(|(key, member_ids)| Cluster {
            trace_key: key.to_string(),
            size: member_ids.len(),
            member_ids,
        })
        .collect();
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.trace_key.cmp(&b.trace_key)));

    let n = ok.len();
    let scores = clusters
        .iter()
        .flat_map(|c| c.member_ids.iter().map(move |id| (id.clone(), c.size as i64)))
        .collect();
    let top = &clusters[0].member_ids;
    let selected = match selection {
        SelectionMode::MinId => top[0].clone(),
        SelectionMode::SeededRandom => top
            .choose(&mut ChaCha8Rng::seed_from_u64(seed))
            .expect("clusters are non-empty")
            .clone(),
    };
    Ok(RankingResult {
        scores,
        clusters,
        selected,
        n_ranked: n,
    })
}

/// Self-check: every score equals the size of the candidate's cluster.
pub fn score_equals_cluster_size(result: &RankingResult) -> bool {
    let members: usize = result.clusters.iter().map(|c| c.size).sum();
    members == result.scores.len()
        && result.clusters.iter().all(|c| {
            c.size == c.member_ids.len()
                && c.member_ids
                    .iter()
                    .all(|id| result.scores.get(id) == Some(&(c.size as i64)))
        })
}
