use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::{Error, Result};

pub const N_FOLDS: usize = 8;
/// Year whose fold is reserved for hyperparameter tuning when present.
pub const TUNING_YEAR: i32 = 2021;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub holdout_year: i32,
    pub holdout_genotypes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub folds: Vec<Fold>,
    pub tuning_fold_index: usize,
}

/// Record subsets for one fold.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    /// Neither the holdout year nor a holdout genotype.
    pub train: Dataset,
    /// Records of holdout genotypes (any year); genotype-effect models.
    pub genotype_test: Dataset,
    /// Records of the holdout year (any genotype); environment-effect models.
    pub environment_test: Dataset,
    /// Holdout genotypes in the holdout year; interaction and yield models.
    pub interaction_test: Dataset,
}

impl Fold {
    pub fn split(&self, d: &Dataset) -> FoldSplit {
        let mut parts: [Vec<_>; 4] = Default::default();
        for r in &d.records {
            let g = self.holdout_genotypes.contains(&r.genotype_id);
            let y = r.year == self.holdout_year;
            if !g && !y {
                parts[0].push(r.clone());
            }
            if g {
                parts[1].push(r.clone());
            }
            if y {
                parts[2].push(r.clone());
            }
            if g && y {
                parts[3].push(r.clone());
            }
        }
        let [train, genotype_test, environment_test, interaction_test] = parts.map(|p| d.with_records(p));
        FoldSplit {
            train,
            genotype_test,
            environment_test,
            interaction_test,
        }
    }
}

/// Eight folds, one per training year (the eight most recent when more are
/// present), each paired with a disjoint random eighth of the genotypes.
pub fn make_cv_folds(d: &Dataset, seed: u64) -> Result<FoldSpec> {
    let years: Vec<i32> = d.years().into_iter().collect();
    if years.len() < N_FOLDS {
        return Err(Error::invalid(format!(
            "cross-validation needs {N_FOLDS} distinct years, found {}",
            years.len()
        )));
    }
    let years = &years[years.len() - N_FOLDS..];
    let mut genotypes: Vec<String> = d.genotype_ids_in_records().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    genotypes.shuffle(&mut rng);

    let n = genotypes.len();
    let folds = years
        .iter()
        .enumerate()
        .map(|(k, &year)| {
            let (lo, hi) = (k * n / N_FOLDS, (k + 1) * n / N_FOLDS);
            Fold {
                holdout_year: year,
                holdout_genotypes: genotypes[lo..hi].iter().cloned().collect(),
            }
        })
        .collect::<Vec<_>>();
    let tuning_fold_index = years.iter().position(|&y| y == TUNING_YEAR).unwrap_or(N_FOLDS - 1);
    Ok(FoldSpec {
        folds,
        tuning_fold_index,
    })
}

/// Test-record indices by scenario: known genotype in a new environment
/// (`new_environment`) or new genotype in a new environment
/// (`new_genotype_environment`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioPartition {
    pub new_environment: Vec<usize>,
    pub new_genotype_environment: Vec<usize>,
}

pub fn split_test_scenarios(train: &Dataset, test: &Dataset) -> Result<ScenarioPartition> {
    let genotypes = train.genotype_ids_in_records();
    let environments = train.environment_ids_in_records();
    let mut out = ScenarioPartition::default();
    for (i, r) in test.records.iter().enumerate() {
        if environments.contains(&r.environment_id) {
            return Err(Error::invalid(format!(
                "test record {i} uses training environment {}",
                r.environment_id
            )));
        }
        if genotypes.contains(&r.genotype_id) {
            out.new_environment.push(i);
        } else {
            out.new_genotype_environment.push(i);
        }
    }
    Ok(out)
}
