use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::blocks::{BlockCovariance, GenotypeBlocks};
use super::optim::{maximize, AscentOptions};
use super::Observations;
use crate::data::io::{fmt_f64, CsvOut};
use crate::data::Dataset;
use crate::{Error, Result};

/// Parameters of `y = μ + G_i + E_j + GE_ij + ε` with
/// `GE_i· ~ N(0, ΛΛ' + Ψ)` and environment-specific residual variances.
#[derive(Debug, Clone, PartialEq)]
pub struct FaParams {
    pub mu: f64,
    /// Sum-to-zero environment effects.
    pub env_fixed: Vec<f64>,
    pub sigma_g2: f64,
    /// `n_e × r`, zero above the diagonal.
    pub lambda: DMatrix<f64>,
    pub psi: Vec<f64>,
    pub resid_vars: Vec<f64>,
}

impl FaParams {
    pub fn n_env(&self) -> usize {
        self.psi.len()
    }

    pub fn rank(&self) -> usize {
        self.lambda.ncols()
    }

    /// `ΛΛ' + Ψ`.
    pub fn env_cov(&self) -> DMatrix<f64> {
        let mut c = &self.lambda * self.lambda.transpose();
        for (a, p) in self.psi.iter().enumerate() {
            c[(a, a)] += p;
        }
        c
    }

    /// Number of free parameters in `ΛΛ' + Ψ`.
    pub fn n_env_cov_params(n_env: usize, rank: usize) -> usize {
        n_env * rank - rank * (rank.saturating_sub(1)) / 2 + n_env
    }

    fn validate(&self, n_env: usize) -> Result<()> {
        let r = self.rank();
        if self.psi.len() != n_env || self.resid_vars.len() != n_env || self.lambda.nrows() != n_env {
            return Err(Error::invalid(format!(
                "parameters are sized for {} environments, data have {n_env}",
                self.psi.len()
            )));
        }
        for a in 0..n_env.min(r) {
            for k in a + 1..r {
                if self.lambda[(a, k)] != 0.0 {
                    return Err(Error::invalid(format!("loading ({a}, {k}) must be zero")));
                }
            }
        }
        let variances = std::iter::once(&self.sigma_g2).chain(&self.psi).chain(&self.resid_vars);
        if variances.clone().any(|v| !v.is_finite() || *v < 0.0) || self.lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("variance parameters must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    #[default]
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaOptions {
    pub rank: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub gradient: GradientMode,
}

impl Default for FaOptions {
    fn default() -> Self {
        Self {
            rank: 2,
            tol: 1e-8,
            max_iter: 500,
            seed: 0,
            gradient: GradientMode::Analytic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FaFit {
    pub genotype_ids: Vec<String>,
    pub environment_ids: Vec<String>,
    pub params: FaParams,
    pub blup_g: DVector<f64>,
    pub blup_ge: DMatrix<f64>,
    /// `μ + Ĝ_i + Ê_j + ĜE_ij` over the full genotype × environment grid.
    pub cell_pred: DMatrix<f64>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// REML log-likelihood after each iteration.
    pub trace: Vec<f64>,
    /// Variance parameters that ended at their lower bound.
    pub boundary: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MmeSolution {
    pub genotype_ids: Vec<String>,
    pub environment_ids: Vec<String>,
    pub mu: f64,
    pub env_fixed: Vec<f64>,
    pub blup_g: DVector<f64>,
    pub blup_ge: DMatrix<f64>,
}

pub fn restricted_log_likelihood(d: &Dataset, p: &FaParams) -> Result<f64> {
    let obs = Observations::from_dataset(d)?;
    p.validate(obs.n_environments())?;
    let blocks = GenotypeBlocks::new(&obs);
    let c = p.env_cov();
    let cov = BlockCovariance {
        sigma_g2: p.sigma_g2,
        env_cov: &c,
        resid: &p.resid_vars,
    };
    Ok(blocks.evaluate(&cov, false)?.loglik)
}

/// GLS environment effects and BLUPs at fixed variance components. Only the
/// variance components of `p` are used.
pub fn solve_mme(d: &Dataset, p: &FaParams) -> Result<MmeSolution> {
    let obs = Observations::from_dataset(d)?;
    p.validate(obs.n_environments())?;
    mme(&obs, &GenotypeBlocks::new(&obs), p)
}

fn mme(obs: &Observations, blocks: &GenotypeBlocks, p: &FaParams) -> Result<MmeSolution> {
    let c = p.env_cov();
    let b = blocks.blups(&BlockCovariance {
        sigma_g2: p.sigma_g2,
        env_cov: &c,
        resid: &p.resid_vars,
    })?;
    let mu = b.beta.mean();
    Ok(MmeSolution {
        genotype_ids: obs.genotype_ids.clone(),
        environment_ids: obs.environment_ids.clone(),
        mu,
        env_fixed: b.beta.iter().map(|v| v - mu).collect(),
        blup_g: b.g,
        blup_ge: b.ge,
    })
}

/// Maps unconstrained coordinates to parameters: variances are
/// `floor + scale·exp(θ)`, loadings `√scale·θ`.
struct Reparam {
    n_env: usize,
    rank: usize,
    scale: f64,
    floor: f64,
}

impl Reparam {
    fn n_loadings(&self) -> usize {
        (0..self.rank).map(|k| self.n_env - k).sum()
    }

    fn len(&self) -> usize {
        1 + self.n_loadings() + 2 * self.n_env
    }

    fn variance(&self, t: f64) -> Result<f64> {
        if t > 60.0 {
            return Err(Error::invalid("variance parameter overflow"));
        }
        Ok(self.floor + self.scale * t.exp())
    }

    fn inverse_variance(&self, v: f64) -> f64 {
        ((v - self.floor).max(self.floor) / self.scale).ln()
    }

    fn decode(&self, theta: &[f64]) -> Result<FaParams> {
        let ne = self.n_env;
        let sigma_g2 = self.variance(theta[0])?;
        let mut lambda = DMatrix::zeros(ne, self.rank);
        let mut i = 1;
        let root = self.scale.sqrt();
        for k in 0..self.rank {
            for a in k..ne {
                lambda[(a, k)] = root * theta[i];
                i += 1;
            }
        }
        let psi = theta[i..i + ne].iter().map(|&t| self.variance(t)).collect::<Result<_>>()?;
        let resid_vars = theta[i + ne..i + 2 * ne]
            .iter()
            .map(|&t| self.variance(t))
            .collect::<Result<_>>()?;
        Ok(FaParams {
            mu: 0.0,
            env_fixed: vec![0.0; ne],
            sigma_g2,
            lambda,
            psi,
            resid_vars,
        })
    }

    fn encode(&self, p: &FaParams) -> Vec<f64> {
        let mut theta = vec![self.inverse_variance(p.sigma_g2)];
        let root = self.scale.sqrt();
        for k in 0..self.rank {
            for a in k..self.n_env {
                theta.push(p.lambda[(a, k)] / root);
            }
        }
        theta.extend(p.psi.iter().map(|&v| self.inverse_variance(v)));
        theta.extend(p.resid_vars.iter().map(|&v| self.inverse_variance(v)));
        theta
    }

    fn objective(&self, blocks: &GenotypeBlocks, theta: &[f64], grad: bool) -> Result<(f64, Vec<f64>)> {
        let p = self.decode(theta)?;
        let c = p.env_cov();
        let eval = blocks.evaluate(
            &BlockCovariance {
                sigma_g2: p.sigma_g2,
                env_cov: &c,
                resid: &p.resid_vars,
            },
            grad,
        )?;
        if !eval.loglik.is_finite() {
            return Err(Error::NotPositiveDefinite("non-finite log-likelihood".into()));
        }
        let Some(g) = eval.grad else {
            return Ok((eval.loglik, Vec::new()));
        };
        let ne = self.n_env;
        let mut out = Vec::with_capacity(self.len());
        out.push(g.sigma_g2 * (p.sigma_g2 - self.floor));
        // dℓ/dΛ = (A + A')Λ with A = dℓ/dC; A is symmetric here
        let dl = (&g.env_cov + g.env_cov.transpose()) * &p.lambda;
        let root = self.scale.sqrt();
        for k in 0..self.rank {
            for a in k..ne {
                out.push(dl[(a, k)] * root);
            }
        }
        for a in 0..ne {
            out.push(g.env_cov[(a, a)] * (p.psi[a] - self.floor));
        }
        for a in 0..ne {
            out.push(g.resid[a] * (p.resid_vars[a] - self.floor));
        }
        Ok((eval.loglik, out))
    }
}

fn central_difference<F: FnMut(&[f64]) -> Result<f64>>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p)?;
            p[i] = x[i] - h;
            let down = f(&p)?;
            p[i] = x[i];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

pub fn fit_fa(d: &Dataset, opts: &FaOptions) -> Result<FaFit> {
    let obs = Observations::from_dataset(d)?;
    let (ng, ne, r) = (obs.n_genotypes(), obs.n_environments(), opts.rank);
    let mut seen = vec![false; ng];
    for &g in &obs.genotype {
        seen[g] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("genotype {} has no observed yield", obs.genotype_ids[i])));
    }
    if r == 0 || ne < r + 1 {
        return Err(Error::invalid(format!("rank {r} needs at least {} environments, found {ne}", r + 1)));
    }

    let scale = obs.phenotypic_variance();
    let re = Reparam {
        n_env: ne,
        rank: r,
        scale,
        floor: 1e-10 * scale,
    };
    let moments = obs.environment_moments();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, (0.01 * scale).sqrt()).unwrap();
    let mut lambda = DMatrix::zeros(ne, r);
    for k in 0..r {
        for a in k..ne {
            lambda[(a, k)] = normal.sample(&mut rng);
        }
    }
    let start = FaParams {
        mu: 0.0,
        env_fixed: vec![0.0; ne],
        sigma_g2: 0.25 * scale,
        lambda,
        psi: vec![0.25 * scale; ne],
        resid_vars: moments.iter().map(|m| m.1.max(1e-3 * scale)).collect(),
    };
    let blocks = GenotypeBlocks::new(&obs);
    let theta0 = re.encode(&start);

    let ascent = AscentOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        ..Default::default()
    };
    let result = match opts.gradient {
        GradientMode::Analytic => maximize(|t| re.objective(&blocks, t, true), &theta0, &ascent)?,
        GradientMode::CentralDifference => maximize(
            |t| {
                let v = re.objective(&blocks, t, false)?.0;
                let g = central_difference(|x| Ok(re.objective(&blocks, x, false)?.0), t, 1e-5)?;
                Ok((v, g))
            },
            &theta0,
            &ascent,
        )?,
    };
    if !result.converged {
        log::warn!("FA fit stopped after {} iterations without converging", result.iterations);
    }

    let mut params = re.decode(&result.x)?;
    let sol = mme(&obs, &blocks, &params)?;
    params.mu = sol.mu;
    params.env_fixed = sol.env_fixed.clone();

    let tiny = 1e-6 * scale;
    let mut boundary = Vec::new();
    if params.sigma_g2 < tiny {
        boundary.push("sigma_g2".to_string());
    }
    for a in 0..ne {
        if params.psi[a] < tiny {
            boundary.push(format!("psi[{}]", obs.environment_ids[a]));
        }
        if params.resid_vars[a] < tiny {
            boundary.push(format!("resid_var[{}]", obs.environment_ids[a]));
        }
    }
    if !boundary.is_empty() {
        log::info!("variance estimates at the lower bound: {}", boundary.join(", "));
    }

    let cell_pred = DMatrix::from_fn(ng, ne, |i, j| sol.mu + sol.blup_g[i] + sol.env_fixed[j] + sol.blup_ge[(i, j)]);
    Ok(FaFit {
        genotype_ids: obs.genotype_ids,
        environment_ids: obs.environment_ids,
        params,
        blup_g: sol.blup_g,
        blup_ge: sol.blup_ge,
        cell_pred,
        reml_loglik: result.value,
        converged: result.converged,
        iterations: result.iterations,
        trace: result.trace,
        boundary,
    })
}

/// Long-format parameter table: `parameter,environment_id,factor,value`.
pub fn write_fa_fit(path: &Path, fit: &FaFit) -> Result<()> {
    let mut w = CsvOut::create(path, &["parameter", "environment_id", "factor", "value"])?;
    let p = &fit.params;
    let scalar = |name: &str, v: f64| [name.to_string(), String::new(), String::new(), fmt_f64(v)];
    w.row(scalar("mu", p.mu))?;
    w.row(scalar("sigma_g2", p.sigma_g2))?;
    for (a, env) in fit.environment_ids.iter().enumerate() {
        w.row(["env_fixed".into(), env.clone(), String::new(), fmt_f64(p.env_fixed[a])])?;
        for k in 0..p.rank() {
            w.row(["lambda".into(), env.clone(), (k + 1).to_string(), fmt_f64(p.lambda[(a, k)])])?;
        }
        w.row(["psi".into(), env.clone(), String::new(), fmt_f64(p.psi[a])])?;
        w.row(["resid_var".into(), env.clone(), String::new(), fmt_f64(p.resid_vars[a])])?;
    }
    w.row(scalar("reml_loglik", fit.reml_loglik))?;
    w.row(scalar("converged", if fit.converged { 1.0 } else { 0.0 }))?;
    w.row(scalar("iterations", fit.iterations as f64))?;
    w.finish()
}

/// One row per genotype × environment cell.
pub fn write_blups(path: &Path, fit: &FaFit) -> Result<()> {
    let mut w = CsvOut::create(path, &["genotype_id", "environment_id", "blup_g", "blup_ge", "cell_pred"])?;
    for (i, g) in fit.genotype_ids.iter().enumerate() {
        for (j, e) in fit.environment_ids.iter().enumerate() {
            w.row([
                g.clone(),
                e.clone(),
                fmt_f64(fit.blup_g[i]),
                fmt_f64(fit.blup_ge[(i, j)]),
                fmt_f64(fit.cell_pred[(i, j)]),
            ])?;
        }
    }
    w.finish()
}
