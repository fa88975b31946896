use super::{PredictionRow, PredictionSet};
use crate::{Error, Result};

/// Environments with fewer genotypes are left out of ranking metrics.
pub const MIN_GENOTYPES_PER_ENVIRONMENT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when either series is constant.
    pub pearson_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMetrics {
    pub environment_id: String,
    pub n_genotypes: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// False for environments below the genotype minimum.
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingMetrics {
    /// Unweighted means over included environments with defined values.
    pub r_j: Option<f64>,
    pub rho_j: Option<f64>,
    pub per_environment: Vec<EnvironmentMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub regression: RegressionMetrics,
    pub ranking: RankingMetrics,
}

/// Pearson correlation, or `None` if either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx > 0.0 && syy > 0.0 {
        Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// 1-based ranks with ties sharing their average rank.
pub(crate) fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[k]] {
            end += 1;
        }
        let r = (k + end) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=end] {
            ranks[i] = r;
        }
        k = end + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

fn series(rows: &[PredictionRow]) -> (Vec<f64>, Vec<f64>) {
    rows.iter().map(|r| (r.y_pred, r.y_true)).unzip()
}

pub fn regression_metrics(p: &PredictionSet) -> Result<RegressionMetrics> {
    if p.len() < 2 {
        return Err(Error::invalid("regression metrics need at least 2 predictions"));
    }
    let n = p.len() as f64;
    let (pred, truth) = series(p.rows());
    let mut sse = 0.0;
    let mut sae = 0.0;
    for (a, b) in pred.iter().zip(&truth) {
        sse += (a - b).powi(2);
        sae += (a - b).abs();
    }
    Ok(RegressionMetrics {
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        pearson_r: pearson(&pred, &truth),
    })
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Pearson and Spearman correlations within each environment, averaged
/// without weights across environments.
pub fn ranking_metrics(p: &PredictionSet) -> Result<RankingMetrics> {
    let mut per_environment = Vec::new();
    for rows in p.by_environment() {
        let included = rows.len() >= MIN_GENOTYPES_PER_ENVIRONMENT;
        let (pred, truth) = series(rows);
        per_environment.push(EnvironmentMetrics {
            environment_id: rows[0].environment_id.clone(),
            n_genotypes: rows.len(),
            pearson: if included { pearson(&pred, &truth) } else { None },
            spearman: if included { spearman(&pred, &truth) } else { None },
            included,
        });
    }
    let excluded: Vec<&str> = per_environment
        .iter()
        .filter(|e| !e.included)
        .map(|e| e.environment_id.as_str())
        .collect();
    if !excluded.is_empty() {
        log::info!(
            "{} environment(s) with fewer than {MIN_GENOTYPES_PER_ENVIRONMENT} genotypes left out of ranking metrics: {}",
            excluded.len(),
            excluded.join(", ")
        );
    }
    if per_environment.iter().all(|e| !e.included) {
        return Err(Error::invalid(format!(
            "no environment has at least {MIN_GENOTYPES_PER_ENVIRONMENT} genotypes"
        )));
    }
    Ok(RankingMetrics {
        r_j: mean_defined(per_environment.iter().map(|e| e.pearson)),
        rho_j: mean_defined(per_environment.iter().map(|e| e.spearman)),
        per_environment,
    })
}

pub fn evaluate(p: &PredictionSet) -> Result<MetricReport> {
    Ok(MetricReport {
        regression: regression_metrics(p)?,
        ranking: ranking_metrics(p)?,
    })
}
