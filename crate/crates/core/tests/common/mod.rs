//! Synthetic corpora for mock-mode runs: replay fixtures, a mock-simulator
//! sidecar and a dataset manifest, all derived from a short description of
//! each problem's behavior groups.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vfocus_core::backend::{FixtureEntry, RequestTag};
use vfocus_core::sim::{MockSidecar, ScriptedTrace};
use vfocus_core::{BackendKind, CircuitKind, RunConfig, SimulatorKind, TaskClass, TestCaseRecord, TraceStatus};

/// Candidates sharing one simulated behavior.
#[derive(Debug, Clone)]
pub struct Group {
    pub outputs: Vec<String>,
    pub count: usize,
    pub correct: bool,
}

impl Group {
    pub fn new(outputs: &[&str], count: usize, correct: bool) -> Self {
        Group {
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            count,
            correct,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthProblem {
    pub id: String,
    pub kind: CircuitKind,
    pub class: TaskClass,
    pub groups: Vec<Group>,
    /// Extra slots whose every attempt fails to compile.
    pub invalid: usize,
    /// Whether refined candidates are scripted to behave correctly.
    pub refine_fixes: bool,
    /// Failed attempts before the good one, for valid slots in slot order.
    pub failures_before: Vec<usize>,
}

impl SynthProblem {
    pub fn new(id: &str, groups: Vec<Group>) -> Self {
        SynthProblem {
            id: id.into(),
            kind: CircuitKind::Combinational,
            class: TaskClass::SimpleDescription,
            groups,
            invalid: 0,
            refine_fixes: true,
            failures_before: Vec::new(),
        }
    }

    pub fn slots(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum::<usize>() + self.invalid
    }

    fn correct_outputs(&self) -> &[String] {
        &self.groups.iter().find(|g| g.correct).expect("a correct group").outputs
    }
}

pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub config: RunConfig,
}

pub const GOOD_CODE: &str = "module TopModule(input a, output y);\n  assign y = a;\nendmodule";
pub const BAD_CODE: &str = "module TopModule(input a, output y);\n  assign y = a;";
const BENCH: &str = "```verilog\nmodule tb;\n  reg a; wire y;\n  TopModule dut(.a(a), .y(y));\n  initial begin\n    a = 0; #1 $display(\"[VFOCUS] tc=0 y=%b\", y);\n  end\nendmodule\n```";

pub fn records(outputs: &[String]) -> Vec<TestCaseRecord> {
    outputs
        .iter()
        .enumerate()
        .map(|(tc, v)| TestCaseRecord {
            tc: tc as u64,
            signals: [("y".to_string(), v.clone())].into(),
        })
        .collect()
}

fn fenced(code: &str, variant: &str) -> String {
    format!("Here is the module.\n```verilog\n// {variant}\n{code}\n```")
}

fn reasoning(words: usize) -> String {
    vec!["step"; words].join(" ")
}

/// Writes fixtures, sidecar, reference benches and manifest under `dir`.
pub fn write_corpus(dir: &Path, problems: &[SynthProblem]) -> Corpus {
    let fixtures = dir.join("fixtures");
    std::fs::create_dir_all(&fixtures).unwrap();
    let mut sidecar = MockSidecar::default();
    let mut manifest = Vec::new();
    for (pi, p) in problems.iter().enumerate() {
        // Slot -> group index (None for invalid slots), shuffled per problem.
        let mut plan: Vec<Option<usize>> = p
            .groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| std::iter::repeat_n(Some(gi), g.count))
            .chain(std::iter::repeat_n(None, p.invalid))
            .collect();
        plan.shuffle(&mut ChaCha8Rng::seed_from_u64(pi as u64));

        let mut entries = Vec::new();
        let mut valid_seen = 0;
        for (slot, g) in plan.iter().enumerate() {
            let id = format!("{}-c{slot:03}", p.id);
            let words = 40 + (slot * 97) % 900;
            match g {
                Some(gi) => {
                    let group = &p.groups[*gi];
                    let fails = p.failures_before.get(valid_seen).copied().unwrap_or(0);
                    valid_seen += 1;
                    for _ in 0..fails {
                        entries.push(FixtureEntry::new(RequestTag::Sampling, reasoning(words), fenced(BAD_CODE, "broken")));
                    }
                    entries.push(FixtureEntry::new(
                        RequestTag::Sampling,
                        reasoning(words),
                        fenced(GOOD_CODE, &format!("group {gi} slot {slot}")),
                    ));
                    sidecar.traces.insert(
                        id.clone(),
                        ScriptedTrace {
                            status: TraceStatus::Ok,
                            records: records(&group.outputs),
                        },
                    );
                    sidecar.verdicts.insert(id, group.correct);
                }
                None => {
                    for _ in 0..5 {
                        entries.push(FixtureEntry::new(RequestTag::Sampling, reasoning(words), fenced(BAD_CODE, "broken")));
                    }
                }
            }
        }
        entries.push(FixtureEntry::new(RequestTag::Testbench, "plan the bench", BENCH));
        for i in 0..2 {
            entries.push(FixtureEntry::new(
                RequestTag::RefineIntra,
                "compare both codes",
                fenced(GOOD_CODE, &format!("refined intra {i}")),
            ));
            entries.push(FixtureEntry::new(
                RequestTag::RefineInter,
                "walk the diverging case",
                fenced(GOOD_CODE, &format!("refined inter {i}")),
            ));
        }
        let refined = (0..2)
            .map(|i| format!("{}-ri{i}", p.id))
            .chain((0..2).map(|i| format!("{}-re{i}", p.id)));
        for id in refined {
            let outputs = if p.refine_fixes {
                p.correct_outputs().to_vec()
            } else {
                vec!["z".to_string(); p.correct_outputs().len()]
            };
            sidecar.traces.insert(
                id.clone(),
                ScriptedTrace {
                    status: TraceStatus::Ok,
                    records: records(&outputs),
                },
            );
            sidecar.verdicts.insert(id, p.refine_fixes);
        }
        std::fs::write(
            fixtures.join(format!("{}.json", p.id)),
            serde_json::to_string_pretty(&entries).unwrap(),
        )
        .unwrap();
        let reference = format!("ref_{}.v", p.id);
        std::fs::write(dir.join(&reference), "module ref_tb; endmodule\n").unwrap();
        manifest.push(json!({
            "id": p.id,
            "spec_text": format!("Synthetic problem {}: drive y from a.", p.id),
            "module_interface": "module TopModule(input a, output y);",
            "circuit_kind": p.kind,
            "task_class": p.class,
            "reference_testbench": reference,
        }));
    }
    let sidecar_path = dir.join("sidecar.json");
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar).unwrap()).unwrap();
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();

    let n = problems.first().map_or(1, SynthProblem::slots);
    assert!(problems.iter().all(|p| p.slots() == n), "every problem needs the same slot count");
    let mut config = RunConfig {
        n_samples: n,
        retry_base_delay_ms: 0,
        workers: 2,
        ..RunConfig::default()
    };
    // Every valid candidate survives filtering (via the fallback), so the
    // scripted cluster sizes are what gets ranked.
    config.filter.min_survivors = n;
    config.backend.kind = BackendKind::Replay;
    config.backend.fixture_dir = Some(fixtures);
    config.simulator.kind = SimulatorKind::Mock;
    config.simulator.mock_sidecar = Some(sidecar_path);
    config.simulator.workers = 2;
    Corpus {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        config,
    }
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// 3 small problems covering both task classes and an early-exit case.
pub fn small_corpus() -> Vec<SynthProblem> {
    let mut a = SynthProblem::new(
        "alpha",
        vec![
            Group::new(&["0", "1", "1"], 6, true),
            Group::new(&["0", "1", "0"], 3, false),
            Group::new(&["1", "1", "0"], 1, false),
        ],
    );
    a.invalid = 1;
    let mut b = SynthProblem::new(
        "beta",
        vec![Group::new(&["1", "0"], 3, false), Group::new(&["0", "0"], 4, false), Group::new(&["1", "1"], 2, true)],
    );
    b.invalid = 2;
    b.kind = CircuitKind::Sequential;
    b.class = TaskClass::Behavioral;
    let c = SynthProblem::new("gamma", vec![Group::new(&["a", "b"], 11, true)]);
    vec![a, b, c]
}

pub const MUX_GOOD: &str = "module TopModule(input a, input b, input sel, output y);\n  assign y = sel ? b : a;\nendmodule\n";
pub const MUX_BAD: &str = "module TopModule(input a, input b, input sel, output y);\n  assign y = sel ? a : b;\nendmodule\n";

pub const MUX_PRINT_BENCH: &str = r#"module tb;
  reg a, b, sel;
  wire y;
  integer i;
  TopModule dut(.a(a), .b(b), .sel(sel), .y(y));
  initial begin
    for (i = 0; i < 8; i = i + 1) begin
      {a, b, sel} = i[2:0];
      #1 $display("[VFOCUS] tc=%0d y=%b", i, y);
    end
    $finish;
  end
endmodule
"#;

pub const MUX_REFERENCE_BENCH: &str = r#"module ref_tb;
  reg a, b, sel;
  wire y;
  integer i, errors;
  TopModule dut(.a(a), .b(b), .sel(sel), .y(y));
  initial begin
    errors = 0;
    for (i = 0; i < 8; i = i + 1) begin
      {a, b, sel} = i[2:0];
      #1 if (y !== (sel ? b : a)) errors = errors + 1;
    end
    $display("Mismatches: %0d in 8 samples", errors);
    $finish;
  end
endmodule
"#;

pub fn have_iverilog() -> bool {
    ["iverilog", "vvp"].iter().all(|p| {
        std::process::Command::new(p)
            .arg("-V")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .is_ok()
    })
}

/// One mux problem through the real simulator: two good samples, one bad.
/// Returns the selected id and whether it passes the reference bench.
pub fn live_mux_smoke(dir: &Path) -> vfocus_core::Result<(String, bool)> {
    use vfocus_core::pipeline::{run_pipeline, Env, Stage};
    use vfocus_core::store::{ingest_dataset, load_json, RunStore};

    let fixtures = dir.join("fixtures");
    std::fs::create_dir_all(&fixtures).unwrap();
    let entries: Vec<FixtureEntry> = [MUX_GOOD, MUX_BAD, MUX_GOOD]
        .iter()
        .enumerate()
        .map(|(i, code)| {
            FixtureEntry::new(RequestTag::Sampling, reasoning(10 + i), format!("```verilog\n{code}```"))
        })
        .collect();
    std::fs::write(fixtures.join("mux.json"), serde_json::to_string(&entries).unwrap()).unwrap();
    std::fs::write(dir.join("tb.v"), MUX_PRINT_BENCH).unwrap();
    std::fs::write(dir.join("ref.v"), MUX_REFERENCE_BENCH).unwrap();
    let manifest = json!([{
        "id": "mux",
        "spec_text": "2-to-1 multiplexer: y = b when sel is 1, else a.",
        "module_interface": "module TopModule(input a, input b, input sel, output y);",
        "circuit_kind": "combinational",
        "task_class": "simple_description",
        "testbench": "tb.v",
        "reference_testbench": "ref.v",
    }]);
    std::fs::write(dir.join("manifest.json"), manifest.to_string()).unwrap();

    let mut config = RunConfig {
        n_samples: 3,
        retry_base_delay_ms: 0,
        ..RunConfig::default()
    };
    config.backend.kind = BackendKind::Replay;
    config.backend.fixture_dir = Some(fixtures);
    let env = Env::new(config)?;
    let store = RunStore::create(dir.join("run"))?;
    store.save_problems(&ingest_dataset(&dir.join("manifest.json"))?)?;
    let summary = run_pipeline(&store, &env, Stage::Rank)?;
    if let Some(q) = summary.quarantined.get("mux") {
        return Err(vfocus_core::Error::Internal(format!("quarantined: {}", q.error)));
    }
    let ranking: vfocus_core::RankingResult = load_json(&store.artifact("mux", "ranking.json"))?;
    let selected = store.load_candidate("mux", &ranking.selected)?;
    let failure = regex::Regex::new(&env.config.simulator.failure_pattern).unwrap();
    let passed = vfocus_core::evaluation::verify(
        env.sim.as_ref(),
        &selected,
        MUX_REFERENCE_BENCH,
        &failure,
        std::time::Duration::from_secs(30),
        &dir.join("verify"),
    )?;
    Ok((ranking.selected, passed))
}
