//! Reasoning-length filtering.
//!
//! Candidates whose reasoning trace is unusually short or long for their
//! problem are dropped before ranking. Bounds are nearest-rank quantiles of
//! the lengths of the valid candidates, and a candidate survives only when
//! its length lies strictly between them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Candidate, FilterConfig};

/// 1-based nearest rank `ceil(q * m)`, tolerant of float noise such as
/// `0.7 * 10 = 7.000000000000001`.
fn nearest_rank(q: f64, m: usize) -> usize {
    let r = (q * m as f64 - 1e-9).ceil();
    (r.max(0.0) as usize).min(m)
}

/// Returns `(l_min, l_max)`. `l_min = -1` means no lower cut.
pub fn length_bounds(lengths: &[usize], config: &FilterConfig) -> Result<(i64, i64)> {
    if lengths.is_empty() {
        return Err(Error::contract("length_bounds needs at least one length"));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let at = |rank: usize| sorted[rank - 1] as i64;
    let lo = match nearest_rank(config.l_min_quantile, m) {
        0 => -1,
        r => at(r),
    };
    let hi = at(nearest_rank(config.l_max_quantile, m).max(1));
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Kept,
    Invalid,
    TooShort,
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub candidate_id: String,
    pub reasoning_len: usize,
    /// Whether the length lies strictly inside the band.
    pub in_band: bool,
    pub reason: FilterReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub config: FilterConfig,
    pub l_min: Option<i64>,
    pub l_max: Option<i64>,
    pub decisions: Vec<FilterDecision>,
    /// The band kept fewer than `min_survivors`; every valid candidate passes.
    pub fallback: bool,
    pub no_valid_candidates: bool,
    pub survivors: Vec<String>,
}

/// Drops invalid candidates and keeps those inside the length band,
/// preserving input order.
pub fn filter_by_density(
    candidates: &[Candidate],
    config: &FilterConfig,
) -> Result<(Vec<Candidate>, FilterReport)> {
    let bounds = {
        let lengths: Vec<usize> = candidates
            .iter()
            .filter(|c| c.is_valid())
            .map(|c| c.reasoning_len)
            .collect();
        if lengths.is_empty() {
            None
        } else {
            Some(length_bounds(&lengths, config)?)
        }
    };
    filter_with_bounds(candidates, bounds, config)
}

/// Same as [`filter_by_density`] but with bounds supplied by the caller.
pub fn filter_with_bounds(
    candidates: &[Candidate],
    bounds: Option<(i64, i64)>,
    config: &FilterConfig,
) -> Result<(Vec<Candidate>, FilterReport)> {
    if let Some(first) = candidates.first() {
        if candidates.iter().any(|c| c.problem_id != first.problem_id) {
            return Err(Error::contract("filter_by_density input spans several problems"));
        }
    }
    let mut decisions = Vec::with_capacity(candidates.len());
    for c in candidates {
        let len = c.reasoning_len as i64;
        let (in_band, reason) = match (c.is_valid(), bounds) {
            (false, _) | (true, None) => (false, FilterReason::Invalid),
            (true, Some((lo, _))) if len <= lo => (false, FilterReason::TooShort),
            (true, Some((_, hi))) if len >= hi => (false, FilterReason::TooLong),
            (true, Some(_)) => (true, FilterReason::Kept),
        };
        decisions.push(FilterDecision {
            candidate_id: c.id.clone(),
            reasoning_len: c.reasoning_len,
            in_band,
            reason,
        });
    }
    let n_valid = candidates.iter().filter(|c| c.is_valid()).count();
    let n_band = decisions.iter().filter(|d| d.in_band).count();
    let fallback = n_valid > 0 && n_band < config.min_survivors;
    let kept: Vec<Candidate> = candidates
        .iter()
        .zip(&decisions)
        .filter(|(c, d)| if fallback { c.is_valid() } else { d.in_band })
        .map(|(c, _)| c.clone())
        .collect();
    let report = FilterReport {
        config: *config,
        l_min: bounds.map(|b| b.0),
        l_max: bounds.map(|b| b.1),
        decisions,
        fallback,
        no_valid_candidates: n_valid == 0,
        survivors: kept.iter().map(|c| c.id.clone()).collect(),
    };
    Ok((kept, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedLengths {
    pub values: BTreeMap<String, f64>,
    /// All valid candidates share one length; every value is 0.
    pub degenerate: bool,
}

/// Maps each valid candidate's length onto [0, 1] between the shortest and
/// longest valid trace of the problem.
pub fn normalized_lengths(candidates: &[Candidate]) -> NormalizedLengths {
    let valid: Vec<&Candidate> = candidates.iter().filter(|c| c.is_valid()).collect();
    let min = valid.iter().map(|c| c.reasoning_len).min().unwrap_or(0);
    let max = valid.iter().map(|c| c.reasoning_len).max().unwrap_or(0);
    let degenerate = max == min;
    let values = valid
        .iter()
        .map(|c| {
            let v = if degenerate {
                0.0
            } else {
                (c.reasoning_len - min) as f64 / (max - min) as f64
            };
            (c.id.clone(), v)
        })
        .collect();
    NormalizedLengths { values, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Provenance, Validity};
    use proptest::prelude::*;

    fn cand(i: usize, len: usize, valid: bool) -> Candidate {
        Candidate {
            id: format!("p-c{i:03}"),
            problem_id: "p".into(),
            code: "module m; endmodule".into(),
            reasoning_trace: if len == 0 { String::new() } else { "t ".repeat(len) },
            reasoning_len: len,
            attempts_used: 1,
            validity: if valid { Validity::Valid } else { Validity::SyntacticallyInvalid },
            provenance: Provenance::Initial,
        }
    }

    fn lens(ls: &[usize]) -> Vec<Candidate> {
        ls.iter().enumerate().map(|(i, &l)| cand(i, l, true)).collect()
    }

    const HUNDREDS: [usize; 10] = [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000];

    #[test]
    fn nearest_rank_bounds_on_hundreds() {
        assert_eq!(length_bounds(&HUNDREDS, &FilterConfig::default()).unwrap(), (100, 800));
    }

    #[test]
    fn zero_lower_quantile_disables_lower_cut() {
        let cfg = FilterConfig {
            l_min_quantile: 0.0,
            ..FilterConfig::default()
        };
        assert_eq!(length_bounds(&HUNDREDS, &cfg).unwrap().0, -1);
    }

    #[test]
    fn constant_lengths() {
        assert_eq!(length_bounds(&[500; 7], &FilterConfig::default()).unwrap(), (500, 500));
        assert!(length_bounds(&[], &FilterConfig::default()).is_err());
    }

    #[test]
    fn rank_tolerates_float_noise() {
        assert_eq!(nearest_rank(0.7, 10), 7);
        assert_eq!(nearest_rank(0.1, 10), 1);
        assert_eq!(nearest_rank(0.75, 10), 8);
        assert_eq!(nearest_rank(1.0, 3), 3);
    }

    #[test]
    fn band_keeps_two_through_seven_hundred() {
        let (kept, report) = filter_by_density(&lens(&HUNDREDS), &FilterConfig::default()).unwrap();
        let kept_lens: Vec<usize> = kept.iter().map(|c| c.reasoning_len).collect();
        assert_eq!(kept_lens, vec![200, 300, 400, 500, 600, 700]);
        assert!(!report.fallback);
        assert_eq!(report.decisions[0].reason, FilterReason::TooShort);
        assert_eq!(report.decisions[7].reason, FilterReason::TooLong);
    }

    #[test]
    fn empty_band_falls_back_to_all_valid() {
        let mut cands = lens(&[500; 6]);
        cands.push(cand(6, 500, false));
        let (kept, report) = filter_by_density(&cands, &FilterConfig::default()).unwrap();
        assert_eq!(kept.len(), 6);
        assert!(report.fallback);
        assert!(kept.iter().all(Candidate::is_valid));
    }

    #[test]
    fn invalid_candidates_never_survive() {
        let cands: Vec<Candidate> = (0..50).map(|i| cand(i, 100 + i * 10, i % 17 != 3)).collect();
        let invalid: Vec<&str> = cands.iter().filter(|c| !c.is_valid()).map(|c| c.id.as_str()).collect();
        assert_eq!(invalid.len(), 3);
        let (kept, _) = filter_by_density(&cands, &FilterConfig::default()).unwrap();
        assert!(kept.iter().all(|c| !invalid.contains(&c.id.as_str())));
    }

    #[test]
    fn nothing_valid() {
        let cands = vec![cand(0, 10, false)];
        let (kept, report) = filter_by_density(&cands, &FilterConfig::default()).unwrap();
        assert!(kept.is_empty());
        assert!(report.no_valid_candidates);
        assert!(!report.fallback);
    }

    #[test]
    fn mixed_problems_are_rejected() {
        let mut cands = lens(&[1, 2]);
        cands[1].problem_id = "q".into();
        assert!(filter_by_density(&cands, &FilterConfig::default()).is_err());
    }

    #[test]
    fn normalized_endpoints_and_midpoint() {
        let n = normalized_lengths(&lens(&[100, 550, 1000]));
        assert_eq!(n.values.values().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert!(!n.degenerate);
        let n = normalized_lengths(&lens(&[400, 800]));
        assert_eq!(n.values.values().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        let n = normalized_lengths(&lens(&[100, 100, 100]));
        assert!(n.degenerate);
        assert!(n.values.values().all(|&v| v == 0.0));
    }

    fn quantile_pair() -> impl Strategy<Value = (f64, f64)> {
        (0u32..=99, 1u32..=100)
            .prop_filter("ordered", |(a, b)| a < b)
            .prop_map(|(a, b)| (f64::from(a) / 100.0, f64::from(b) / 100.0))
    }

    proptest! {
        #[test]
        fn output_is_ordered_subset_of_valid(
            ls in prop::collection::vec((0usize..2000, any::<bool>()), 1..60),
            (lo, hi) in quantile_pair(),
        ) {
            let cands: Vec<Candidate> = ls.iter().enumerate().map(|(i, &(l, v))| cand(i, l, v)).collect();
            let cfg = FilterConfig { l_min_quantile: lo, l_max_quantile: hi, min_survivors: 3 };
            let (kept, report) = filter_by_density(&cands, &cfg).unwrap();
            let mut it = cands.iter();
            for k in &kept {
                prop_assert!(k.is_valid());
                prop_assert!(it.any(|c| c.id == k.id));
            }
            prop_assert!(kept.len() >= cfg.min_survivors || report.fallback || report.no_valid_candidates);
        }

        #[test]
        fn refiltering_with_pinned_bounds_is_stable(
            ls in prop::collection::vec(0usize..2000, 1..60),
        ) {
            let cands = lens(&ls);
            let cfg = FilterConfig::default();
            let (kept, report) = filter_by_density(&cands, &cfg).unwrap();
            prop_assume!(!report.fallback);
            let bounds = Some((report.l_min.unwrap(), report.l_max.unwrap()));
            let (again, _) = filter_with_bounds(&kept, bounds, &FilterConfig { min_survivors: 1, ..cfg }).unwrap();
            prop_assert_eq!(again, kept);
        }
    }
}
