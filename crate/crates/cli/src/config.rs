//! Run configuration: one TOML document with a section per subcommand.
//!
//! Every key is optional. Unknown keys are rejected. Seeds are never written
//! by hand except `simulate.seed`; all others derive from the master `seed`.

use std::path::{Path, PathBuf};

use gxe_core::kernels::KernelOptions;
use gxe_core::mixed::FaOptions;
use gxe_core::neural::{Profile, StructuredConfig};
use gxe_core::seeds::SeedStream;
use gxe_core::simgen::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pipeline::{ModelKind, PipelineSettings};
use crate::tune::TuneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub profile: Profile,
    /// Root of every artifact this run reads or writes.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Parallel (model, fold, replicate) cells in `experiment`; 1 runs serially.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub simulate: SimConfig,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub folds: FoldSection,
    #[serde(default)]
    pub decompose: DecomposeSection,
    /// Overrides merged over the profile's network settings.
    #[serde(default)]
    pub network: toml::Table,
    #[serde(default)]
    pub kernels: KernelSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub tune: Option<TuneSpec>,
    #[serde(default)]
    pub experiment: ExperimentPlan,
}

fn default_out() -> PathBuf {
    PathBuf::from("gxe-run")
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    /// Directory holding trials.csv, markers.csv, weather.csv and optionally
    /// soil.csv and management.csv. Defaults to `<out>/raw`.
    pub input: Option<PathBuf>,
    /// Marker column filter; off unless given.
    pub markers: Option<MarkerFilterSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerFilterSection {
    pub maf_min: f64,
    pub max_missing: f64,
    pub target_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSection {
    /// Fold used by `decompose`, `train` and `predict`; defaults to the
    /// tuning fold.
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeSection {
    pub rank: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        let d = FaOptions::default();
        Self {
            rank: d.rank,
            tol: d.tol,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    /// Center marker and environment columns before building kernels.
    pub centered: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub memory_budget_mb: u64,
}

impl Default for KernelSection {
    fn default() -> Self {
        let d = KernelOptions::default();
        Self {
            centered: false,
            tol: d.tol,
            max_iter: d.max_iter,
            memory_budget_mb: d.memory_budget_bytes >> 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Defaults to `<out>/predict/predictions.csv`.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    /// Defaults to `<out>/predict/predictions.csv`.
    pub predictions: Option<PathBuf>,
    pub fractions: Vec<f64>,
    pub coverage_min: f64,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            predictions: None,
            fractions: vec![0.05, 0.1, 0.2, 0.3, 0.5, 1.0],
            coverage_min: gxe_core::evaluation::DEFAULT_COVERAGE_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub models: Vec<ModelKind>,
    /// The first `folds` cross-validation folds are run.
    pub folds: usize,
    pub replicates: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Mixinn, ModelKind::Gblup, ModelKind::Gxeblup],
            folds: 8,
            replicates: 1,
        }
    }
}

/// Seed paths inside the network section, all derived per run cell.
const NETWORK_SEED_KEYS: [&str; 4] = [
    "init_seed",
    "genotype_training.seed",
    "environment_training.seed",
    "interaction_training.seed",
];

fn lookup<'a>(t: &'a toml::Table, dotted: &str) -> Option<&'a toml::Value> {
    let mut parts = dotted.split('.');
    let mut v = t.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}

/// Recursively overlays `over` onto `base`.
pub(crate) fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn strip_network_seeds(t: &mut toml::Table) {
    t.remove("init_seed");
    for stage in ["genotype_training", "environment_training", "interaction_training"] {
        if let Some(toml::Value::Table(s)) = t.get_mut(stage) {
            s.remove("seed");
        }
    }
}

/// Profile defaults with `overrides` merged in.
pub fn network_config(profile: Profile, overrides: &toml::Table) -> std::result::Result<StructuredConfig, String> {
    let mut base = toml::Table::try_from(StructuredConfig::profile(profile)).map_err(|e| e.to_string())?;
    merge(&mut base, overrides);
    base.try_into().map_err(|e: toml::de::Error| format!("network: {}", e.message()))
}

/// Simulation seed implied by a master seed, kept below 2^63 so that the
/// effective config can spell it out as a TOML integer.
pub fn derived_sim_seed(master: u64) -> u64 {
    SeedStream::fork(master, "simulate").next_seed() >> 1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("", Path::new("<default>")).expect("empty config is valid")
    }
}

impl RunConfig {
    /// Parses a config document; `simulate.seed` is derived from the master
    /// seed when absent.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| CliError::Config {
            path: path.to_path_buf(),
            message,
        };
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| err(e.message().to_string()))?;
        if let Some(toml::Value::Table(n)) = table.get("network") {
            if let Some(k) = NETWORK_SEED_KEYS.iter().find(|k| lookup(n, k).is_some()) {
                return Err(err(format!(
                    "network.{k}: network seeds are derived from the master seed"
                )));
            }
        }
        let explicit_sim_seed = lookup(&table, "simulate.seed").is_some();
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| err(e.message().to_string()))?;
        cfg.tune = cfg.tune.map(TuneSpec::normalized);
        if !explicit_sim_seed {
            cfg.simulate.seed = derived_sim_seed(cfg.seed);
        }
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Applies command-line overrides; the simulation seed follows a new
    /// master seed unless it was set explicitly.
    pub fn with_overrides(mut self, seed: Option<u64>, profile: Option<Profile>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            if self.simulate.seed == derived_sim_seed(self.seed) {
                self.simulate.seed = derived_sim_seed(s);
            }
            self.seed = s;
        }
        if let Some(p) = profile {
            self.profile = p;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self
    }

    fn validate(&self) -> std::result::Result<(), String> {
        self.simulate.validate().map_err(|e| e.to_string())?;
        self.network()?;
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.experiment.models.is_empty() || self.experiment.folds == 0 || self.experiment.replicates == 0 {
            return Err("experiment needs at least one model, fold and replicate".into());
        }
        if self.select.fractions.is_empty() {
            return Err("select.fractions is empty".into());
        }
        if let Some(t) = &self.tune {
            t.validate()?;
        }
        Ok(())
    }

    /// Effective network settings; seeds are placeholders filled per run.
    pub fn network(&self) -> std::result::Result<StructuredConfig, String> {
        network_config(self.profile, &self.network)
    }

    pub fn pipeline_settings(&self) -> Result<PipelineSettings> {
        let d = FaOptions::default();
        Ok(PipelineSettings {
            network: self.network().map_err(CliError::Invalid)?,
            fa: FaOptions {
                rank: self.decompose.rank,
                tol: self.decompose.tol,
                max_iter: self.decompose.max_iter,
                ..d
            },
            kernels: KernelOptions {
                tol: self.kernels.tol,
                max_iter: self.kernels.max_iter,
                memory_budget_bytes: self.kernels.memory_budget_mb << 20,
                ..KernelOptions::default()
            },
            centered: self.kernels.centered,
        })
    }

    /// The configuration with every default spelled out. Feeding it back
    /// reproduces the run.
    pub fn effective_toml(&self) -> Result<String> {
        let mut cfg = self.clone();
        let mut net = toml::Table::try_from(self.network().map_err(CliError::Invalid)?)
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        strip_network_seeds(&mut net);
        cfg.network = net;
        toml::to_string(&cfg).map_err(|e| CliError::Invalid(e.to_string()))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.ingest.input.clone().unwrap_or_else(|| self.out.join("raw"))
    }
}
