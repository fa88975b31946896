use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::model::{
    build_env_encoder, build_genotype_encoder, EncoderConfig, EncoderData, EncoderModel, PairData, Profile,
    TwoTowerModel, EMBEDDING_DIM,
};
use super::train::{train, TraceRow, TrainConfig};
use crate::data::{Dataset, EnvironmentTable, GenotypeTable};
use crate::mixed::LabelSets;
use crate::{Error, Result};

/// Architecture and per-stage training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredConfig {
    pub genotype_encoder: EncoderConfig,
    pub environment_encoder: EncoderConfig,
    pub embedding_dim: usize,
    pub genotype_training: TrainConfig,
    pub environment_training: TrainConfig,
    pub interaction_training: TrainConfig,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl StructuredConfig {
    /// `paper` keeps the published widths, epochs and batch sizes; `desk`
    /// divides widths by four, epochs by two and batch sizes by eight, so
    /// that the small simulated trials still get several optimizer steps
    /// per epoch.
    pub fn profile(profile: Profile) -> Self {
        let epochs = |n: usize| match profile {
            Profile::Paper => n,
            Profile::Desk => n / 2,
        };
        let batch = |n: usize| match profile {
            Profile::Paper => n,
            Profile::Desk => n / 8,
        };
        let stage = |epochs: usize, batch_size: usize, learning_rate: f64, weight_decay: f64| TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            weight_decay,
            optimizer: Default::default(),
            seed: 0,
        };
        Self {
            genotype_encoder: EncoderConfig::genotype(profile),
            environment_encoder: EncoderConfig::environment(profile),
            embedding_dim: EMBEDDING_DIM,
            genotype_training: stage(epochs(250), batch(256), 1e-3, 3e-4),
            environment_training: stage(epochs(500), batch(32), 1e-3, 1e-5),
            interaction_training: stage(epochs(250), batch(256), 1e-2, 3e-4),
            init_seed: 0,
        }
    }

    /// Derives every stage seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let mut s = crate::seeds::SeedStream::new(seed);
        self.init_seed = s.next_seed();
        self.genotype_training.seed = s.next_seed();
        self.environment_training.seed = s.next_seed();
        self.interaction_training.seed = s.next_seed();
        self
    }
}

/// f_g, f_e, f_ge and the yield mean they are recomposed around.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredModel {
    pub mu_hat: f64,
    pub f_g: EncoderModel,
    pub f_e: EncoderModel,
    pub f_ge: TwoTowerModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredFit {
    pub model: StructuredModel,
    pub genotype_trace: Vec<TraceRow>,
    pub environment_trace: Vec<TraceRow>,
    pub interaction_trace: Vec<TraceRow>,
}

/// Which terms enter a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recomposition {
    /// μ̂ + f_g + f_e + f_ge
    Full,
    /// μ̂ + f_g + f_e
    Additive,
}

/// Stage 1 fits f_g on `y_g` (one sample per genotype) and f_e on `y_e` (one
/// sample per environment). Stage 2 reuses their hidden layers as towers,
/// adds projections and fine-tunes everything on `y_ge` over the observed
/// cells of `d`.
pub fn structured_fit(d: &Dataset, labels: &LabelSets, cfg: &StructuredConfig) -> Result<StructuredFit> {
    let xg = d.genotypes.features_for(&labels.genotype_ids)?;
    let xe = d.environments.features_for(&labels.environment_ids)?;
    if labels.y_g.len() != xg.nrows() || labels.y_e.len() != xe.nrows() || labels.y_ge.shape() != (xg.nrows(), xe.nrows()) {
        return Err(Error::invalid("label dimensions do not match their id lists"));
    }

    let g_data = EncoderData::new(xg.clone(), labels.y_g.iter().copied().collect())?;
    let e_data = EncoderData::new(xe.clone(), labels.y_e.iter().copied().collect())?;
    let mut f_g = build_genotype_encoder(xg.ncols(), &cfg.genotype_encoder, cfg.init_seed)?;
    let mut f_e = build_env_encoder(xe.ncols(), &cfg.environment_encoder, cfg.init_seed.wrapping_add(1))?;
    log::info!("training genotype encoder on {} genotypes", g_data.y.len());
    let genotype_trace = train(&mut f_g, &g_data, None, &cfg.genotype_training)?;
    log::info!("training environment encoder on {} environments", e_data.y.len());
    let environment_trace = train(&mut f_e, &e_data, None, &cfg.environment_training)?;

    let gi: HashMap<&str, usize> = labels.genotype_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let ei: HashMap<&str, usize> = labels.environment_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut cells = BTreeSet::new();
    for r in d.records.iter().filter(|r| r.yield_mg_ha.is_some()) {
        match (gi.get(r.genotype_id.as_str()), ei.get(r.environment_id.as_str())) {
            (Some(&i), Some(&j)) => {
                cells.insert((i, j));
            }
            _ => {
                return Err(Error::invalid(format!(
                    "observed cell ({}, {}) has no labels",
                    r.genotype_id, r.environment_id
                )))
            }
        }
    }
    let pairs: Vec<(usize, usize)> = cells.into_iter().collect();
    let y = pairs.iter().map(|&(i, j)| labels.y_ge[(i, j)]).collect();
    let ge_data = PairData::new(xg, xe, pairs, y)?;
    let mut f_ge = TwoTowerModel::from_encoders(&f_g, &f_e, cfg.embedding_dim, cfg.init_seed.wrapping_add(2))?;
    log::info!("training interaction network on {} cells", ge_data.y.len());
    let interaction_trace = train(&mut f_ge, &ge_data, None, &cfg.interaction_training)?;

    Ok(StructuredFit {
        model: StructuredModel {
            mu_hat: labels.mu_hat,
            f_g,
            f_e,
            f_ge,
        },
        genotype_trace,
        environment_trace,
        interaction_trace,
    })
}

impl StructuredModel {
    /// Yield predictions for row-aligned genotype and environment features.
    pub fn predict_yield(&self, xg: &DMatrix<f64>, xe: &DMatrix<f64>, terms: Recomposition) -> Result<Vec<f64>> {
        if xg.nrows() != xe.nrows() {
            return Err(Error::invalid(format!(
                "{} genotype rows but {} environment rows",
                xg.nrows(),
                xe.nrows()
            )));
        }
        let g = self.f_g.predict(xg)?;
        let e = self.f_e.predict(xe)?;
        let ge = match terms {
            Recomposition::Full => self.f_ge.predict(xg, xe)?,
            Recomposition::Additive => vec![0.0; g.len()],
        };
        Ok((0..g.len()).map(|k| self.mu_hat + g[k] + e[k] + ge[k]).collect())
    }

    /// Predictions for `(genotype_id, environment_id)` cells, with features
    /// looked up in the given tables.
    pub fn predict_cells(
        &self,
        genotypes: &GenotypeTable,
        environments: &EnvironmentTable,
        cells: &[(String, String)],
        terms: Recomposition,
    ) -> Result<Vec<f64>> {
        let gids: Vec<String> = cells.iter().map(|c| c.0.clone()).collect();
        let eids: Vec<String> = cells.iter().map(|c| c.1.clone()).collect();
        let xg = genotypes.features_for(&gids)?;
        let xe = environments.features_for(&eids)?;
        self.predict_yield(&xg, &xe, terms)
    }
}
