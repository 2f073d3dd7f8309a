//! On-disk run directory.
//!
//! ```text
//! <run>/config.json                 effective configuration
//! <run>/problems.json               ingested problems
//! <run>/<problem>/candidates/       <id>.json + <id>.raw.txt, index.json
//! <run>/<problem>/filter.json
//! <run>/<problem>/testbench.json
//! <run>/<problem>/traces/           <id>.json, index.json
//! <run>/<problem>/sim/<id>/         simulator scratch + captured stdout
//! <run>/<problem>/ranking.json
//! <run>/<problem>/refinement.json
//! <run>/<problem>/verify.json
//! <run>/<problem>/stages.json       stage -> fingerprint of its inputs
//! <run>/<problem>/quarantine.json   present when the problem failed
//! <run>/reports/
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{is_filesystem_safe, Candidate, CircuitKind, Problem, TaskClass, Trace};

/// Writes pretty JSON through a temp file + rename so a crash never leaves
/// a truncated artifact behind.
pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    save_text(path, &text)
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Hex SHA-256 of a JSON value; used to fingerprint stage inputs.
pub fn fingerprint(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// A problem as stored in the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemEntry {
    #[serde(flatten)]
    pub problem: Problem,
    /// Checking bench used only for final verification.
    pub reference_testbench: Option<PathBuf>,
    /// Print-only bench supplied by the user instead of generating one.
    pub testbench: Option<PathBuf>,
    /// No usable reference bench; skipped by evaluation.
    pub eval_excluded: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    #[serde(default)]
    spec_text: Option<String>,
    #[serde(default)]
    spec_path: Option<PathBuf>,
    module_interface: String,
    circuit_kind: CircuitKind,
    task_class: TaskClass,
    #[serde(default)]
    reference_testbench: Option<PathBuf>,
    #[serde(default)]
    testbench: Option<PathBuf>,
}

const RESERVED_IDS: [&str; 1] = ["reports"];

/// Loads and validates a dataset manifest: a JSON array of problems whose
/// relative paths resolve against the manifest's directory.
pub fn ingest_dataset(manifest: &Path) -> Result<Vec<ProblemEntry>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let schema_err = |field: String, message: String| Error::Schema {
        path: manifest.to_path_buf(),
        field,
        message,
    };
    let de = &mut serde_json::Deserializer::from_str(&text);
    let entries: Vec<ManifestEntry> = serde_path_to_error::deserialize(de)
        .map_err(|e| schema_err(e.path().to_string(), e.inner().to_string()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        let field = |name: &str| format!("[{i}].{name}");
        if !seen.insert(e.id.clone()) {
            return Err(schema_err(field("id"), format!("duplicate problem id `{}`", e.id)));
        }
        if !is_filesystem_safe(&e.id) || RESERVED_IDS.contains(&e.id.as_str()) {
            return Err(schema_err(field("id"), format!("`{}` is not a usable problem id", e.id)));
        }
        let spec_text = match (e.spec_text, &e.spec_path) {
            (Some(t), None) => t,
            (None, Some(p)) => {
                let p = resolve(p);
                std::fs::read_to_string(&p).map_err(|err| schema_err(field("spec_path"), format!("{}: {err}", p.display())))?
            }
            _ => return Err(schema_err(field("spec_text"), "exactly one of spec_text / spec_path is required".into())),
        };
        let problem = Problem {
            id: e.id,
            spec_text,
            module_interface: e.module_interface,
            circuit_kind: e.circuit_kind,
            task_class: e.task_class,
        };
        problem
            .validate()
            .map_err(|err| schema_err(field("spec_text"), err.to_string()))?;
        let testbench = match e.testbench {
            Some(p) => {
                let p = resolve(&p);
                if !p.is_file() {
                    return Err(schema_err(field("testbench"), format!("{} does not exist", p.display())));
                }
                Some(p)
            }
            None => None,
        };
        let reference_testbench = e.reference_testbench.map(|p| resolve(&p));
        let eval_excluded = reference_testbench.as_ref().is_none_or(|p| !p.is_file());
        if eval_excluded {
            log::warn!("{}: no reference testbench, excluded from evaluation", problem.id);
        }
        out.push(ProblemEntry {
            problem,
            reference_testbench,
            testbench,
            eval_excluded,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantine {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunStore { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.join("problems.json").is_file() {
            return Err(Error::config(format!(
                "{} is not a run directory (no problems.json)",
                root.display()
            )));
        }
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn problem_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn candidates_dir(&self, id: &str) -> PathBuf {
        self.problem_dir(id).join("candidates")
    }

    pub fn traces_dir(&self, id: &str) -> PathBuf {
        self.problem_dir(id).join("traces")
    }

    pub fn sim_dir(&self, id: &str) -> PathBuf {
        self.problem_dir(id).join("sim")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn artifact(&self, id: &str, name: &str) -> PathBuf {
        self.problem_dir(id).join(name)
    }

    pub fn save_problems(&self, problems: &[ProblemEntry]) -> Result<()> {
        save_json(&self.root.join("problems.json"), problems)
    }

    pub fn load_problems(&self) -> Result<Vec<ProblemEntry>> {
        load_json(&self.root.join("problems.json"))
    }

    pub fn save_candidate(&self, candidate: &Candidate, raw: Option<&str>) -> Result<()> {
        let dir = self.candidates_dir(&candidate.problem_id);
        save_json(&dir.join(format!("{}.json", candidate.id)), candidate)?;
        if let Some(raw) = raw {
            save_text(&dir.join(format!("{}.raw.txt", candidate.id)), raw)?;
        }
        Ok(())
    }

    pub fn load_candidate(&self, problem_id: &str, id: &str) -> Result<Candidate> {
        load_json(&self.candidates_dir(problem_id).join(format!("{id}.json")))
    }

    pub fn load_candidates(&self, problem_id: &str, ids: &[String]) -> Result<Vec<Candidate>> {
        ids.iter().map(|id| self.load_candidate(problem_id, id)).collect()
    }

    /// Ids of the initially sampled candidates, in slot order.
    pub fn candidate_index(&self, problem_id: &str) -> Result<Vec<String>> {
        load_json(&self.candidates_dir(problem_id).join("index.json"))
    }

    pub fn save_candidate_index(&self, problem_id: &str, ids: &[String]) -> Result<()> {
        save_json(&self.candidates_dir(problem_id).join("index.json"), ids)
    }

    pub fn save_trace(&self, problem_id: &str, trace: &Trace) -> Result<()> {
        save_json(
            &self.traces_dir(problem_id).join(format!("{}.json", trace.candidate_id)),
            trace,
        )
    }

    pub fn load_trace(&self, problem_id: &str, id: &str) -> Result<Trace> {
        load_json(&self.traces_dir(problem_id).join(format!("{id}.json")))
    }

    pub fn stage_fingerprints(&self, problem_id: &str) -> Result<BTreeMap<String, String>> {
        let path = self.artifact(problem_id, "stages.json");
        if path.is_file() {
            load_json(&path)
        } else {
            Ok(BTreeMap::new())
        }
    }

    pub fn save_stage_fingerprints(&self, problem_id: &str, stages: &BTreeMap<String, String>) -> Result<()> {
        save_json(&self.artifact(problem_id, "stages.json"), stages)
    }

    pub fn quarantine(&self, problem_id: &str, q: &Quarantine) -> Result<()> {
        save_json(&self.artifact(problem_id, "quarantine.json"), q)
    }

    pub fn clear_quarantine(&self, problem_id: &str) -> Result<()> {
        let path = self.artifact(problem_id, "quarantine.json");
        match std::fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
            _ => Ok(()),
        }
    }

    pub fn quarantined(&self, problem_id: &str) -> Result<Option<Quarantine>> {
        let path = self.artifact(problem_id, "quarantine.json");
        if path.is_file() {
            load_json(&path).map(Some)
        } else {
            Ok(None)
        }
    }
}
