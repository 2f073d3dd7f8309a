//! Synthetic inputs shared by the benchmarks.

use std::collections::HashMap;

use vfocus_core::{Candidate, Provenance, TestCaseRecord, Trace, Validity};

/// `n` candidates spread over `clusters` distinct behaviors, each trace
/// `cases` test cases long.
pub fn pool(n: usize, clusters: usize, cases: u64) -> (Vec<Candidate>, HashMap<String, Trace>) {
    let candidates: Vec<Candidate> = (0..n)
        .map(|i| Candidate {
            id: format!("p-c{i:04}"),
            problem_id: "p".into(),
            code: format!("module TopModule(input a, output y); // {i}\n  assign y = a;\nendmodule"),
            reasoning_trace: String::new(),
            reasoning_len: 100 + (i * 37) % 900,
            attempts_used: 1,
            validity: Validity::Valid,
            provenance: Provenance::Initial,
        })
        .collect();
    let traces = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.clone(), Trace::ok(&c.id, records(cases, i % clusters))))
        .collect();
    (candidates, traces)
}

/// Records whose last case depends on `variant`.
pub fn records(cases: u64, variant: usize) -> Vec<TestCaseRecord> {
    (0..cases)
        .map(|tc| TestCaseRecord {
            tc,
            signals: [
                ("sum".to_string(), format!("{:08b}", tc % 256)),
                ("carry".to_string(), if tc + 1 == cases { variant.to_string() } else { "0".into() }),
            ]
            .into(),
        })
        .collect()
}
