//! Fold preparation and the four model pipelines, shared by the step-wise
//! subcommands and `experiment`.

use std::collections::{BTreeMap, BTreeSet};

use gxe_core::data::{build_env_vectors, make_cv_folds, Dataset, Fold, FoldSpec};
use gxe_core::evaluation::PredictionSet;
use gxe_core::kernels::{
    environmental_relationship, fit_gblup, fit_gxeblup, genomic_relationship, KernelFit, KernelOptions,
};
use gxe_core::mixed::{anova_labels, fit_fa, generate_labels, FaFit, FaOptions, LabelSets};
use gxe_core::neural::{structured_fit, Recomposition, StructuredConfig, StructuredFit, StructuredModel};
use gxe_core::seeds::SeedStream;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// FA mixed-model labels, then the structured network.
    Mixinn,
    /// Fixed-effect two-way decomposition labels, then the same network.
    SinnStyle,
    Gblup,
    Gxeblup,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mixinn => "mixinn",
            ModelKind::SinnStyle => "sinn_style",
            ModelKind::Gblup => "gblup",
            ModelKind::Gxeblup => "gxeblup",
        }
    }

    fn is_network(self) -> bool {
        matches!(self, ModelKind::Mixinn | ModelKind::SinnStyle)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    /// Seeds inside are replaced per run cell.
    pub network: StructuredConfig,
    pub fa: FaOptions,
    pub kernels: KernelOptions,
    pub centered: bool,
}

/// Training records and held-out interaction records of one fold, both
/// carrying environment vectors standardized with training-environment
/// statistics.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub index: usize,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn fold_spec(d: &Dataset, master_seed: u64) -> Result<FoldSpec> {
    Ok(make_cv_folds(d, SeedStream::fork(master_seed, "folds").next_seed())?)
}

pub fn prepare_fold(d: &Dataset, index: usize, fold: &Fold) -> Result<FoldData> {
    let split = fold.split(d);
    let train_envs = split.train.environment_ids_in_records();
    let rows: Vec<usize> = (0..d.environments.len())
        .filter(|&i| train_envs.contains(&d.environments.ids[i]))
        .collect();
    if rows.is_empty() {
        return Err(CliError::Invalid(format!("fold {index} has no training environments")));
    }
    let (_, stats) = build_env_vectors(&d.environments.select(&rows), None)?;
    let (environments, _) = build_env_vectors(&d.environments, Some(&stats))?;
    let with_envs = |part: Dataset| Dataset {
        environments: environments.clone(),
        ..part
    };
    let test = with_envs(split.interaction_test);
    if !test.records.iter().any(|r| r.yield_mg_ha.is_some()) {
        return Err(CliError::Invalid(format!(
            "fold {index} has no observed held-out genotype × environment records"
        )));
    }
    Ok(FoldData {
        index,
        train: with_envs(split.train),
        test,
    })
}

/// Observed cells of `d` with their replicate-mean yields, ordered by
/// environment then genotype.
pub fn observed_cells(d: &Dataset) -> Vec<(String, String, f64)> {
    let mut acc: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for r in &d.records {
        if let Some(y) = r.yield_mg_ha {
            let e = acc.entry((&r.environment_id, &r.genotype_id)).or_default();
            e.0 += y;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((e, g), (s, n))| (g.to_string(), e.to_string(), s / n as f64))
        .collect()
}

/// Seed of one (model, fold, replicate) cell.
pub fn cell_seed(master_seed: u64, model: ModelKind, fold: usize, replicate: usize) -> u64 {
    SeedStream::fork(master_seed, &format!("{}/fold{fold}/rep{replicate}", model.name())).next_seed()
}

/// The (decomposition, network) seeds of a cell.
pub fn stage_seeds(cell_seed: u64) -> (u64, u64) {
    let mut s = SeedStream::new(cell_seed);
    (s.next_seed(), s.next_seed())
}

pub fn decompose(train: &Dataset, opts: &FaOptions, seed: u64) -> Result<(FaFit, LabelSets)> {
    let fit = fit_fa(train, &FaOptions { seed, ..*opts })?;
    if !fit.converged {
        log::warn!("FA fit stopped after {} iterations without converging", fit.iterations);
    }
    let labels = generate_labels(&fit, train)?;
    Ok((fit, labels))
}

pub fn fit_network(train: &Dataset, labels: &LabelSets, cfg: &StructuredConfig, seed: u64) -> Result<StructuredFit> {
    Ok(structured_fit(train, labels, &cfg.clone().with_seed(seed))?)
}

pub fn predict_network(
    model: &StructuredModel,
    d: &Dataset,
    cells: &[(String, String, f64)],
    terms: Recomposition,
) -> Result<PredictionSet> {
    let keys: Vec<(String, String)> = cells.iter().map(|c| (c.0.clone(), c.1.clone())).collect();
    let pred = model.predict_cells(&d.genotypes, &d.environments, &keys, terms)?;
    Ok(PredictionSet::from_tuples(
        cells.iter().zip(pred).map(|(c, p)| (c.0.clone(), c.1.clone(), p, c.2)),
    )?)
}

pub fn fit_kernel(kind: ModelKind, fold: &FoldData, settings: &PipelineSettings) -> Result<KernelFit> {
    let d = &fold.train;
    let kg = genomic_relationship(&d.genotypes, settings.centered)?;
    Ok(match kind {
        ModelKind::Gblup => fit_gblup(d, &kg, &settings.kernels)?,
        ModelKind::Gxeblup => {
            let ke = environmental_relationship(&d.environments, settings.centered)?;
            fit_gxeblup(d, &kg, &ke, &settings.kernels)?
        }
        _ => return Err(CliError::Invalid(format!("{} is not a kernel model", kind.name()))),
    })
}

pub fn predict_kernel(fit: &KernelFit, cells: &[(String, String, f64)]) -> Result<PredictionSet> {
    let rows = cells
        .iter()
        .map(|(g, e, y)| Ok((g.clone(), e.clone(), fit.predict(g, Some(e))?, *y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet::from_tuples(rows)?)
}

/// Everything one (model, fold, replicate) cell produced.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub model: ModelKind,
    pub fold: usize,
    pub replicate: usize,
    pub predictions: PredictionSet,
    /// μ̂ + f_g + f_e predictions of the network models.
    pub additive: Option<PredictionSet>,
}

pub fn run_cell(
    kind: ModelKind,
    fold: &FoldData,
    settings: &PipelineSettings,
    master_seed: u64,
    replicate: usize,
) -> Result<CellRun> {
    let (fa_seed, net_seed) = stage_seeds(cell_seed(master_seed, kind, fold.index, replicate));
    let cells = observed_cells(&fold.test);
    log::info!("{} fold {} replicate {}: {} test cells", kind.name(), fold.index, replicate, cells.len());
    let (predictions, additive) = if kind.is_network() {
        let labels = match kind {
            ModelKind::Mixinn => decompose(&fold.train, &settings.fa, fa_seed)?.1,
            _ => anova_labels(&fold.train)?,
        };
        let fit = fit_network(&fold.train, &labels, &settings.network, net_seed)?;
        (
            predict_network(&fit.model, &fold.test, &cells, Recomposition::Full)?,
            Some(predict_network(&fit.model, &fold.test, &cells, Recomposition::Additive)?),
        )
    } else {
        (predict_kernel(&fit_kernel(kind, fold, settings)?, &cells)?, None)
    };
    Ok(CellRun {
        model: kind,
        fold: fold.index,
        replicate,
        predictions,
        additive,
    })
}

/// Genotype ids of `d` that have at least one observed record.
pub fn observed_genotypes(d: &Dataset) -> BTreeSet<String> {
    d.records
        .iter()
        .filter(|r| r.yield_mg_ha.is_some())
        .map(|r| r.genotype_id.clone())
        .collect()
}
