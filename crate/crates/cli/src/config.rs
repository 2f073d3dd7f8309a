//! Config file loading and command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::Value;
use vfocus_core::{BackendKind, Error, Result, RunConfig, SelectionMode, SimulatorKind};

/// Reads a TOML or JSON config whose keys mirror `RunConfig` field names.
/// Missing keys keep their defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Parses a snake_case enum value the same way the config file does.
fn enum_value<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML or JSON config file; defaults to the run directory's config.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n_samples: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Problems processed concurrently.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// min_id or seeded_random.
    #[arg(long, global = true, value_parser = enum_value::<SelectionMode>)]
    pub selection: Option<SelectionMode>,
    #[arg(long, global = true)]
    pub l_min_quantile: Option<f64>,
    #[arg(long, global = true)]
    pub l_max_quantile: Option<f64>,
    #[arg(long, global = true)]
    pub min_survivors: Option<usize>,
    /// openai or replay.
    #[arg(long, global = true, value_parser = enum_value::<BackendKind>)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Directory of per-problem replay fixtures.
    #[arg(long, global = true)]
    pub fixture_dir: Option<PathBuf>,
    /// command or mock.
    #[arg(long, global = true, value_parser = enum_value::<SimulatorKind>)]
    pub simulator: Option<SimulatorKind>,
    /// Compile command; `{sources}` and `{out}` are substituted.
    #[arg(long, global = true)]
    pub compile_template: Option<String>,
    /// Run command; `{out}` is substituted.
    #[arg(long, global = true)]
    pub run_template: Option<String>,
    #[arg(long, global = true)]
    pub mock_sidecar: Option<PathBuf>,
    #[arg(long, global = true)]
    pub sim_timeout_ms: Option<u64>,
    /// Concurrent simulator processes.
    #[arg(long, global = true)]
    pub sim_workers: Option<usize>,
    /// Dataset label used in report tables.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
}

impl ConfigArgs {
    /// Config file (explicit, else the run's saved config, else defaults)
    /// with flags applied on top.
    pub fn resolve(&self, run_dir: &Path) -> Result<RunConfig> {
        let saved = run_dir.join("config.json");
        let mut c = match &self.config {
            Some(path) => load_config(path)?,
            None if saved.is_file() => load_config(&saved)?,
            None => RunConfig::default(),
        };
        set(&mut c.n_samples, self.n_samples);
        set(&mut c.seed, self.seed);
        set(&mut c.workers, self.workers);
        set(&mut c.selection, self.selection);
        set(&mut c.filter.l_min_quantile, self.l_min_quantile);
        set(&mut c.filter.l_max_quantile, self.l_max_quantile);
        set(&mut c.filter.min_survivors, self.min_survivors);
        set(&mut c.backend.kind, self.backend);
        set(&mut c.backend.endpoint, self.endpoint.clone());
        set(&mut c.backend.model, self.model.clone());
        set(&mut c.simulator.kind, self.simulator);
        set(&mut c.simulator.compile_template, self.compile_template.clone());
        set(&mut c.simulator.run_template, self.run_template.clone());
        set(&mut c.sim_timeout_ms, self.sim_timeout_ms);
        set(&mut c.simulator.workers, self.sim_workers);
        set(&mut c.dataset, self.dataset.clone());
        if self.fixture_dir.is_some() {
            c.backend.fixture_dir = self.fixture_dir.clone();
        }
        if self.mock_sidecar.is_some() {
            c.simulator.mock_sidecar = self.mock_sidecar.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
