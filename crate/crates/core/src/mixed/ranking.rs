use std::cmp::Ordering;

use nalgebra::DMatrix;

use super::blocks::{BlockCovariance, GenotypeBlocks};
use super::optim::{maximize, AscentOptions};
use super::Observations;
use crate::{Error, Result};

/// `y_ij = μ_j + G_i + ε` fitted by REML to predicted yields.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingFit {
    pub genotype_ids: Vec<String>,
    pub environment_ids: Vec<String>,
    pub env_means: Vec<f64>,
    /// Shrunken genetic effects used for ranking.
    pub genetic_effects: Vec<f64>,
    pub sigma_g2: f64,
    pub resid_var: f64,
}

pub fn fit_ranking_model<G: AsRef<str>, E: AsRef<str>>(preds: &[(G, E, f64)]) -> Result<RankingFit> {
    let obs = Observations::from_triples(preds)?;
    let (ng, ne) = (obs.n_genotypes(), obs.n_environments());
    if ng < 2 {
        return Err(Error::invalid("the ranking model needs at least two genotypes"));
    }
    let moments = obs.environment_moments();
    let within: f64 = moments.iter().map(|(_, v, n)| v * *n as f64).sum::<f64>() / obs.len() as f64;
    let level = obs.y.iter().map(|y| y * y).sum::<f64>() / obs.len() as f64;
    if within <= 1e-14 * level.max(1e-300) {
        // nothing varies within environments: no genetic signal
        return Ok(RankingFit {
            genotype_ids: obs.genotype_ids,
            environment_ids: obs.environment_ids,
            env_means: moments.iter().map(|m| m.0).collect(),
            genetic_effects: vec![0.0; ng],
            sigma_g2: 0.0,
            resid_var: within,
        });
    }

    let scale = within;
    let floor = 1e-10 * scale;
    let zero = DMatrix::zeros(ne, ne);
    let blocks = GenotypeBlocks::new(&obs);
    let variances = |t: &[f64]| -> Result<(f64, f64)> {
        if t.iter().any(|v| *v > 60.0) {
            return Err(Error::invalid("variance parameter overflow"));
        }
        Ok((floor + scale * t[0].exp(), floor + scale * t[1].exp()))
    };
    let objective = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (sg, se) = variances(t)?;
        let resid = vec![se; ne];
        let eval = blocks.evaluate(
            &BlockCovariance {
                sigma_g2: sg,
                env_cov: &zero,
                resid: &resid,
            },
            true,
        )?;
        let g = eval.grad.unwrap();
        Ok((eval.loglik, vec![g.sigma_g2 * (sg - floor), g.resid.sum() * (se - floor)]))
    };
    let start = [0.5f64.ln(), 0.5f64.ln()];
    let res = maximize(objective, &start, &AscentOptions::default())?;
    let (sigma_g2, resid_var) = variances(&res.x)?;
    let resid = vec![resid_var; ne];
    let b = blocks.blups(&BlockCovariance {
        sigma_g2,
        env_cov: &zero,
        resid: &resid,
    })?;
    Ok(RankingFit {
        genotype_ids: obs.genotype_ids,
        environment_ids: obs.environment_ids,
        env_means: b.beta.iter().copied().collect(),
        genetic_effects: b.g.iter().copied().collect(),
        sigma_g2,
        resid_var,
    })
}

/// Genotype indices from best to worst; ties go to the smaller genotype id.
pub fn rank_order(fit: &RankingFit) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fit.genotype_ids.len()).collect();
    idx.sort_by(|&a, &b| {
        fit.genetic_effects[b]
            .partial_cmp(&fit.genetic_effects[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| fit.genotype_ids[a].cmp(&fit.genotype_ids[b]))
    });
    idx
}
