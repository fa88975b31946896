//! Factor-analytic linear mixed model fitted by REML, label generation and
//! the genotype ranking model.

mod blocks;
mod fa;
mod labels;
pub mod optim;
mod ranking;

use std::collections::{BTreeMap, BTreeSet};

pub use fa::{
    fit_fa, restricted_log_likelihood, solve_mme, write_blups, write_fa_fit, FaFit, FaOptions, FaParams,
    GradientMode, MmeSolution,
};
pub use labels::{anova_labels, generate_labels, read_labels, write_labels, LabelSets};
pub use ranking::{fit_ranking_model, rank_order, RankingFit};

use crate::data::Dataset;
use crate::{Error, Result};

/// Observed yields indexed into sorted genotype and environment id lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub genotype_ids: Vec<String>,
    pub environment_ids: Vec<String>,
    pub genotype: Vec<usize>,
    pub environment: Vec<usize>,
    pub y: Vec<f64>,
}

impl Observations {
    /// Genotypes and environments are those named in the records, including
    /// ones whose yields are all missing; only observed yields enter `y`.
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        let genotype_ids: Vec<String> = d.genotype_ids_in_records().into_iter().collect();
        let environment_ids: Vec<String> = d.environment_ids_in_records().into_iter().collect();
        let gi: BTreeMap<&str, usize> = genotype_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let ei: BTreeMap<&str, usize> = environment_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut out = Self {
            genotype: Vec::new(),
            environment: Vec::new(),
            y: Vec::new(),
            genotype_ids: Vec::new(),
            environment_ids: Vec::new(),
        };
        for r in &d.records {
            let Some(y) = r.yield_mg_ha else { continue };
            if !y.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite yield for {} in {}",
                    r.genotype_id, r.environment_id
                )));
            }
            out.genotype.push(gi[r.genotype_id.as_str()]);
            out.environment.push(ei[r.environment_id.as_str()]);
            out.y.push(y);
        }
        if out.y.is_empty() {
            return Err(Error::invalid("no observed yields"));
        }
        out.genotype_ids = genotype_ids;
        out.environment_ids = environment_ids;
        Ok(out)
    }

    pub fn from_triples<G: AsRef<str>, E: AsRef<str>>(triples: &[(G, E, f64)]) -> Result<Self> {
        let genotype_ids: Vec<String> = triples
            .iter()
            .map(|t| t.0.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let environment_ids: Vec<String> = triples
            .iter()
            .map(|t| t.1.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if triples.is_empty() {
            return Err(Error::invalid("no observations"));
        }
        let mut out = Self {
            genotype: Vec::with_capacity(triples.len()),
            environment: Vec::with_capacity(triples.len()),
            y: Vec::with_capacity(triples.len()),
            genotype_ids: Vec::new(),
            environment_ids: Vec::new(),
        };
        for (g, e, y) in triples {
            if !y.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite value for {} in {}",
                    g.as_ref(),
                    e.as_ref()
                )));
            }
            out.genotype.push(genotype_ids.binary_search_by(|s| s.as_str().cmp(g.as_ref())).unwrap());
            out.environment.push(environment_ids.binary_search_by(|s| s.as_str().cmp(e.as_ref())).unwrap());
            out.y.push(*y);
        }
        out.genotype_ids = genotype_ids;
        out.environment_ids = environment_ids;
        Ok(out)
    }

    pub fn n_genotypes(&self) -> usize {
        self.genotype_ids.len()
    }

    pub fn n_environments(&self) -> usize {
        self.environment_ids.len()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Per-environment (mean, population variance, count).
    pub fn environment_moments(&self) -> Vec<(f64, f64, usize)> {
        let ne = self.n_environments();
        let mut sum = vec![0.0; ne];
        let mut n = vec![0usize; ne];
        for (&e, &y) in self.environment.iter().zip(&self.y) {
            sum[e] += y;
            n[e] += 1;
        }
        let mean: Vec<f64> = (0..ne).map(|j| if n[j] > 0 { sum[j] / n[j] as f64 } else { 0.0 }).collect();
        let mut ss = vec![0.0; ne];
        for (&e, &y) in self.environment.iter().zip(&self.y) {
            ss[e] += (y - mean[e]).powi(2);
        }
        (0..ne)
            .map(|j| (mean[j], if n[j] > 0 { ss[j] / n[j] as f64 } else { 0.0 }, n[j]))
            .collect()
    }

    /// Pooled within-environment variance, the scale for variance floors and
    /// starting values. Falls back to 1 when the data have no spread.
    pub fn phenotypic_variance(&self) -> f64 {
        let m = self.environment_moments();
        let ss: f64 = m.iter().map(|(_, v, n)| v * *n as f64).sum();
        let p = ss / self.len() as f64;
        let level = self.y.iter().map(|y| y * y).sum::<f64>() / self.len() as f64;
        if p > 1e-12 * level.max(1e-300) && p > 0.0 {
            p
        } else {
            1.0
        }
    }
}
