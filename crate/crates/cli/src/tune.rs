//! Random search over network hyperparameters on the tuning fold.
//!
//! Grid keys are dotted paths into the `[network]` table, for example
//! `genotype_training.learning_rate` or `environment_encoder.width`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gxe_core::data::io::{fmt_f64, CsvOut};
use gxe_core::data::Dataset;
use gxe_core::evaluation::pearson;
use gxe_core::mixed::LabelSets;
use gxe_core::neural::{
    build_env_encoder, build_genotype_encoder, train, EncoderData, Profile, Recomposition, StructuredConfig,
};
use gxe_core::seeds::SeedStream;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{merge, network_config};
use crate::error::{CliError, Result};
use crate::pipeline::{fit_network, observed_cells, FoldData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuneTarget {
    #[serde(rename = "y_g")]
    Genotype,
    #[serde(rename = "y_e")]
    Environment,
    #[serde(rename = "y_ge")]
    Interaction,
    #[serde(rename = "yield")]
    Yield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Mse,
    /// MSE − 5·Pearson r, averaged over replicates.
    #[serde(rename = "mse_minus_5r")]
    MseMinus5r,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSpec {
    pub target: TuneTarget,
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    /// Number of distinct settings drawn from the grid.
    pub budget: usize,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default = "one")]
    pub replicates_per_setting: usize,
}

fn one() -> usize {
    1
}

/// Replicate count the environment target is always scored with.
pub const ENVIRONMENT_REPLICATES: usize = 5;

impl TuneSpec {
    /// Environment targets are scored by MSE − 5r over five replicates,
    /// whatever the document says.
    pub fn normalized(mut self) -> Self {
        if self.target == TuneTarget::Environment
            && (self.criterion != Criterion::MseMinus5r || self.replicates_per_setting != ENVIRONMENT_REPLICATES)
        {
            log::info!("y_e target: criterion set to mse_minus_5r over {ENVIRONMENT_REPLICATES} replicates");
            self.criterion = Criterion::MseMinus5r;
            self.replicates_per_setting = ENVIRONMENT_REPLICATES;
        }
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.grid.is_empty() || self.grid.values().any(Vec::is_empty) {
            return Err("tune.grid is empty".into());
        }
        if self.budget == 0 || self.replicates_per_setting == 0 {
            return Err("tune.budget and tune.replicates_per_setting must be positive".into());
        }
        for (k, vals) in &self.grid {
            for v in vals {
                network_config(Profile::Desk, &setting_table(&[(k.clone(), v.clone())]))
                    .map_err(|e| format!("tune.grid.{k}: {e}"))?;
            }
        }
        Ok(())
    }
}

/// Nested table for a list of dotted-path assignments.
fn setting_table(setting: &[(String, toml::Value)]) -> toml::Table {
    let mut out = toml::Table::new();
    for (key, v) in setting {
        let mut t = toml::Table::new();
        let parts: Vec<&str> = key.split('.').collect();
        let mut value = v.clone();
        for p in parts[1..].iter().rev() {
            t.insert(p.to_string(), value);
            value = toml::Value::Table(std::mem::take(&mut t));
        }
        t.insert(parts[0].to_string(), value);
        merge(&mut out, &t);
    }
    out
}

/// Up to `budget` distinct grid points, drawn without replacement.
pub fn sample_settings(spec: &TuneSpec, seed: u64) -> Result<Vec<Vec<(String, toml::Value)>>> {
    let sizes: Vec<usize> = spec.grid.values().map(Vec::len).collect();
    let total = sizes
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| CliError::Invalid("tuning grid is too large to index".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, spec.budget.min(total));
    Ok(picks
        .into_iter()
        .map(|mut k| {
            spec.grid
                .iter()
                .map(|(key, vals)| {
                    let v = vals[k % vals.len()].clone();
                    k /= vals.len();
                    (key.clone(), v)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardRow {
    /// Draw order.
    pub draw: usize,
    pub setting: Vec<(String, toml::Value)>,
    pub score: f64,
    pub mse: f64,
    pub r: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    /// Ordered by score, ties by draw.
    pub leaderboard: Vec<LeaderboardRow>,
    pub best_network: StructuredConfig,
}

fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Validation predictions and targets of one replicate.
fn validation_run(
    target: TuneTarget,
    cfg: &StructuredConfig,
    fold: &FoldData,
    labels: &LabelSets,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = cfg.clone().with_seed(seed);
    let d: &Dataset = &fold.train;
    let train_g: Vec<String> = d.genotype_ids_in_records().into_iter().collect();
    let train_e: Vec<String> = d.environment_ids_in_records().into_iter().collect();
    let test_g: Vec<String> = fold.test.genotype_ids_in_records().into_iter().collect();
    let test_e: Vec<String> = fold.test.environment_ids_in_records().into_iter().collect();
    let train_labels = labels.subset(&train_g, &train_e)?;
    let err = |m: &str| CliError::Invalid(format!("tuning fold: {m}"));
    match target {
        TuneTarget::Genotype => {
            let held = labels.subset(&test_g, &[])?;
            let data = EncoderData::new(d.genotypes.features_for(&train_g)?, train_labels.y_g.iter().copied().collect())?;
            let mut m = build_genotype_encoder(data.x.ncols(), &cfg.genotype_encoder, cfg.init_seed)?;
            train(&mut m, &data, None, &cfg.genotype_training)?;
            let pred = m.predict(&d.genotypes.features_for(&test_g)?)?;
            if pred.is_empty() {
                return Err(err("no held-out genotypes"));
            }
            Ok((pred, held.y_g.iter().copied().collect()))
        }
        TuneTarget::Environment => {
            let held = labels.subset(&[], &test_e)?;
            let x = d.environments.features_for(&train_e)?;
            let data = EncoderData::new(x, train_labels.y_e.iter().copied().collect())?;
            let mut m = build_env_encoder(data.x.ncols(), &cfg.environment_encoder, cfg.init_seed.wrapping_add(1))?;
            train(&mut m, &data, None, &cfg.environment_training)?;
            let pred = m.predict(&d.environments.features_for(&test_e)?)?;
            Ok((pred, held.y_e.iter().copied().collect()))
        }
        TuneTarget::Interaction | TuneTarget::Yield => {
            let fit = fit_network(d, &train_labels, &cfg, seed)?;
            let cells = observed_cells(&fold.test);
            let gids: Vec<String> = cells.iter().map(|c| c.0.clone()).collect();
            let eids: Vec<String> = cells.iter().map(|c| c.1.clone()).collect();
            let xg = d.genotypes.features_for(&gids)?;
            let xe = fold.test.environments.features_for(&eids)?;
            if target == TuneTarget::Interaction {
                let held = labels.subset(&test_g, &test_e)?;
                let truth = cells
                    .iter()
                    .map(|(g, e, _)| {
                        let i = test_g.iter().position(|x| x == g).expect("cell genotype is held out");
                        let j = test_e.iter().position(|x| x == e).expect("cell environment is held out");
                        held.y_ge[(i, j)]
                    })
                    .collect();
                Ok((fit.model.f_ge.predict(&xg, &xe)?, truth))
            } else {
                let pred = fit.model.predict_yield(&xg, &xe, Recomposition::Full)?;
                Ok((pred, cells.iter().map(|c| c.2).collect()))
            }
        }
    }
}

/// Scores `spec.budget` sampled settings on the tuning fold. `labels` come
/// from a decomposition of the full dataset so that held-out genotypes and
/// environments have targets.
pub fn tune(
    spec: &TuneSpec,
    base_network: &toml::Table,
    profile: Profile,
    fold: &FoldData,
    labels: &LabelSets,
    master_seed: u64,
) -> Result<TuneResult> {
    let settings = sample_settings(spec, SeedStream::fork(master_seed, "tune/sample").next_seed())?;
    let mut leaderboard = Vec::new();
    for (draw, setting) in settings.into_iter().enumerate() {
        let mut overrides = base_network.clone();
        merge(&mut overrides, &setting_table(&setting));
        let cfg = network_config(profile, &overrides).map_err(CliError::Invalid)?;
        let (mut scores, mut mses, mut rs) = (Vec::new(), Vec::new(), Vec::new());
        for rep in 0..spec.replicates_per_setting {
            let seed = SeedStream::fork(master_seed, &format!("tune/draw{draw}/rep{rep}")).next_seed();
            let (pred, truth) = validation_run(spec.target, &cfg, fold, labels, seed)?;
            let m = mse(&pred, &truth);
            let r = pearson(&pred, &truth);
            if r.is_none() && spec.criterion == Criterion::MseMinus5r {
                log::warn!("correlation undefined on {} validation points; counted as 0", pred.len());
            }
            scores.push(match spec.criterion {
                Criterion::Mse => m,
                Criterion::MseMinus5r => m - 5.0 * r.unwrap_or(0.0),
            });
            mses.push(m);
            rs.extend(r);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        log::info!("tuning draw {draw}: score {}", mean(&scores));
        leaderboard.push(LeaderboardRow {
            draw,
            setting,
            score: mean(&scores),
            mse: mean(&mses),
            r: (!rs.is_empty()).then(|| mean(&rs)),
        });
    }
    leaderboard.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.draw.cmp(&b.draw)));
    let mut best = base_network.clone();
    merge(&mut best, &setting_table(&leaderboard[0].setting));
    Ok(TuneResult {
        best_network: network_config(profile, &best).map_err(CliError::Invalid)?,
        leaderboard,
    })
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::Float(f) => fmt_f64(*f),
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `rank,draw,<grid keys>,score,mse,r`
pub fn write_leaderboard(path: &Path, spec: &TuneSpec, rows: &[LeaderboardRow]) -> Result<()> {
    let mut header = vec!["rank".to_string(), "draw".to_string()];
    header.extend(spec.grid.keys().cloned());
    header.extend(["score", "mse", "r"].map(String::from));
    let mut out = CsvOut::create(path, &header)?;
    for (rank, row) in rows.iter().enumerate() {
        let mut fields = vec![(rank + 1).to_string(), row.draw.to_string()];
        fields.extend(row.setting.iter().map(|(_, v)| value_text(v)));
        fields.extend([fmt_f64(row.score), fmt_f64(row.mse), row.r.map(fmt_f64).unwrap_or_default()]);
        out.row(fields)?;
    }
    Ok(out.finish()?)
}

/// The winning network settings as a `[network]` table, seeds removed.
pub fn write_best_network(path: &Path, cfg: &StructuredConfig) -> Result<PathBuf> {
    let mut t = toml::Table::try_from(cfg).map_err(|e| CliError::Invalid(e.to_string()))?;
    t.remove("init_seed");
    for stage in ["genotype_training", "environment_training", "interaction_training"] {
        if let Some(toml::Value::Table(s)) = t.get_mut(stage) {
            s.remove("seed");
        }
    }
    let mut doc = toml::Table::new();
    doc.insert("network".into(), toml::Value::Table(t));
    let text = toml::to_string(&doc).map_err(|e| CliError::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}
