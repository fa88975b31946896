//! Regression and within-environment ranking metrics, selection simulations
//! and replicate comparisons.

mod compare;
mod io;
mod metrics;
mod selection;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use compare::{compare_models, one_sample_t_test, welch_t_test, Comparison, LiteratureTest, MetricSummary, ModelReplicates};
pub use io::{
    read_predictions, write_environment_metrics, write_gain_curve, write_metrics, write_predictions, write_selection,
    MetricsRow,
};
pub use metrics::{evaluate, pearson, ranking_metrics, regression_metrics, spearman, EnvironmentMetrics, MetricReport, RankingMetrics, RegressionMetrics, MIN_GENOTYPES_PER_ENVIRONMENT};
pub use selection::{gain_curve, select_global, select_per_environment, selection_size, GainPoint, SelectionReport, Strategy, DEFAULT_COVERAGE_MIN};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub genotype_id: String,
    pub environment_id: String,
    pub y_pred: f64,
    pub y_true: f64,
}

/// Predictions paired with realized yields, one row per
/// (genotype, environment) cell. Rows are kept sorted by environment, then
/// genotype, so every reduction is independent of input order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(mut rows: Vec<PredictionRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !r.y_pred.is_finite() || !r.y_true.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value for ({}, {})",
                r.genotype_id, r.environment_id
            )));
        }
        rows.sort_by(|a, b| (&a.environment_id, &a.genotype_id).cmp(&(&b.environment_id, &b.genotype_id)));
        if let Some(w) = rows
            .windows(2)
            .find(|w| w[0].environment_id == w[1].environment_id && w[0].genotype_id == w[1].genotype_id)
        {
            return Err(Error::invalid(format!(
                "duplicate prediction for ({}, {})",
                w[0].genotype_id, w[0].environment_id
            )));
        }
        Ok(Self { rows })
    }

    pub fn from_tuples<G: Into<String>, E: Into<String>>(rows: impl IntoIterator<Item = (G, E, f64, f64)>) -> Result<Self> {
        Self::new(
            rows.into_iter()
                .map(|(g, e, y_pred, y_true)| PredictionRow {
                    genotype_id: g.into(),
                    environment_id: e.into(),
                    y_pred,
                    y_true,
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn environment_ids(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.environment_id.as_str()).collect()
    }

    pub fn genotype_ids(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.genotype_id.as_str()).collect()
    }

    /// Rows grouped by environment, in id order.
    pub fn by_environment(&self) -> impl Iterator<Item = &[PredictionRow]> {
        self.rows.chunk_by(|a, b| a.environment_id == b.environment_id)
    }

    /// Same rows with predictions replaced by `f(row)`.
    pub fn map_predictions(&self, mut f: impl FnMut(&PredictionRow) -> f64) -> Result<Self> {
        Self::new(
            self.rows
                .iter()
                .map(|r| PredictionRow {
                    y_pred: f(r),
                    ..r.clone()
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_nan() {
        assert!(PredictionSet::from_tuples([("a", "e", 1.0, 2.0), ("a", "e", 1.0, 3.0)]).is_err());
        assert!(PredictionSet::from_tuples([("a", "e", f64::NAN, 2.0)]).is_err());
        let p = PredictionSet::from_tuples([("b", "e2", 1.0, 2.0), ("a", "e2", 1.0, 2.0), ("c", "e1", 0.0, 0.0)]).unwrap();
        let envs: Vec<usize> = p.by_environment().map(|g| g.len()).collect();
        assert_eq!(envs, vec![1, 2]);
        assert_eq!(p.rows()[1].genotype_id, "a");
    }
}
