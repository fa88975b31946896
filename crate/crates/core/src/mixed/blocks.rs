//! REML evaluation for covariance structures that couple observations only
//! within a genotype:
//!
//! `V[s,t] = σ²g + C[env(s), env(t)] + δ(s,t) r[env(s)]` for observations
//! `s, t` of the same genotype, zero otherwise. Environment indicators form
//! the fixed-effect design. `V` is block diagonal by genotype, so every
//! quantity is accumulated from small dense blocks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::Observations;
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Block {
    env: Vec<usize>,
    y: Vec<f64>,
    /// Distinct environments of the block and, per observation, its position
    /// in that list.
    envs: Vec<usize>,
    slot: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct GenotypeBlocks {
    pub n_env: usize,
    pub n_obs: usize,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockCovariance<'a> {
    pub sigma_g2: f64,
    pub env_cov: &'a DMatrix<f64>,
    pub resid: &'a [f64],
}

#[derive(Debug, Clone)]
pub(crate) struct BlockGradient {
    pub sigma_g2: f64,
    /// Derivative with respect to each entry of `C` taken as independent.
    pub env_cov: DMatrix<f64>,
    pub resid: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockEval {
    pub loglik: f64,
    pub grad: Option<BlockGradient>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockBlups {
    pub beta: DVector<f64>,
    pub g: DVector<f64>,
    /// Interaction BLUPs for every (genotype, environment) cell.
    pub ge: DMatrix<f64>,
}

struct Factored {
    logdet_v: f64,
    vinv: Vec<DMatrix<f64>>,
    /// `V⁻¹ X` restricted to the block's environments.
    vinv_x: Vec<DMatrix<f64>>,
    c_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    beta: DVector<f64>,
    ypy: f64,
}

impl GenotypeBlocks {
    pub fn new(obs: &Observations) -> Self {
        let n_g = obs.genotype_ids.len();
        let mut blocks: Vec<Block> = (0..n_g)
            .map(|_| Block {
                env: Vec::new(),
                y: Vec::new(),
                envs: Vec::new(),
                slot: Vec::new(),
            })
            .collect();
        for k in 0..obs.y.len() {
            let b = &mut blocks[obs.genotype[k]];
            b.env.push(obs.environment[k]);
            b.y.push(obs.y[k]);
        }
        for b in &mut blocks {
            let mut envs = b.env.clone();
            envs.sort_unstable();
            envs.dedup();
            b.slot = b.env.iter().map(|e| envs.binary_search(e).unwrap()).collect();
            b.envs = envs;
        }
        Self {
            n_env: obs.environment_ids.len(),
            n_obs: obs.y.len(),
            blocks,
        }
    }

    fn block_cov(b: &Block, cov: &BlockCovariance) -> DMatrix<f64> {
        let m = b.env.len();
        DMatrix::from_fn(m, m, |s, t| {
            let mut v = cov.sigma_g2 + cov.env_cov[(b.env[s], b.env[t])];
            if s == t {
                v += cov.resid[b.env[s]];
            }
            v
        })
    }

    fn describe(cov: &BlockCovariance) -> String {
        let min_diag = (0..cov.env_cov.nrows())
            .map(|a| cov.env_cov[(a, a)])
            .fold(f64::INFINITY, f64::min);
        let min_resid = cov.resid.iter().copied().fold(f64::INFINITY, f64::min);
        format!(
            "sigma_g2 = {:e}, min env covariance diagonal = {:e}, min residual variance = {:e}",
            cov.sigma_g2, min_diag, min_resid
        )
    }

    fn factor(&self, cov: &BlockCovariance) -> Result<Factored> {
        let ne = self.n_env;
        let mut logdet_v = 0.0;
        let mut c = DMatrix::<f64>::zeros(ne, ne);
        let mut xvy = DVector::<f64>::zeros(ne);
        let mut yvy = 0.0;
        let mut vinv_all = Vec::with_capacity(self.blocks.len());
        let mut vinv_x_all = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.y.is_empty() {
                vinv_all.push(DMatrix::zeros(0, 0));
                vinv_x_all.push(DMatrix::zeros(0, 0));
                continue;
            }
            let v = Self::block_cov(b, cov);
            let chol = v.cholesky().ok_or_else(|| {
                Error::NotPositiveDefinite(format!("genotype block {i}: {}", Self::describe(cov)))
            })?;
            logdet_v += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let vinv = chol.inverse();
            let y = DVector::from_column_slice(&b.y);
            let vy = &vinv * &y;
            yvy += y.dot(&vy);
            let mut vx = DMatrix::<f64>::zeros(b.y.len(), b.envs.len());
            for (s, &slot) in b.slot.iter().enumerate() {
                for r in 0..b.y.len() {
                    vx[(r, slot)] += vinv[(r, s)];
                }
                xvy[b.envs[slot]] += vy[s];
            }
            // X'V⁻¹X restricted to the block's environments
            for (s, &slot) in b.slot.iter().enumerate() {
                for (q, &e) in b.envs.iter().enumerate() {
                    c[(b.envs[slot], e)] += vx[(s, q)];
                }
            }
            vinv_all.push(vinv);
            vinv_x_all.push(vx);
        }
        let c_chol = c.cholesky().ok_or_else(|| {
            Error::SingularDesign("an environment has no observations (X'V⁻¹X is singular)".into())
        })?;
        let beta = c_chol.solve(&xvy);
        let ypy = yvy - xvy.dot(&beta);
        Ok(Factored {
            logdet_v,
            vinv: vinv_all,
            vinv_x: vinv_x_all,
            c_chol,
            beta,
            ypy,
        })
    }

    /// Restricted log-likelihood
    /// `-½[(n-p) ln 2π + ln|V| + ln|X'V⁻¹X| + y'Py]`, optionally with its
    /// gradient.
    pub fn evaluate(&self, cov: &BlockCovariance, with_grad: bool) -> Result<BlockEval> {
        let f = self.factor(cov)?;
        let ne = self.n_env;
        let logdet_c = 2.0 * f.c_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let loglik = -0.5 * ((self.n_obs - ne) as f64 * (2.0 * PI).ln() + f.logdet_v + logdet_c + f.ypy);

        let grad = with_grad.then(|| {
            let c_inv = f.c_chol.inverse();
            let mut g_sg = 0.0;
            let mut g_c = DMatrix::<f64>::zeros(ne, ne);
            let mut g_r = DVector::<f64>::zeros(ne);
            for (i, b) in self.blocks.iter().enumerate() {
                let m = b.y.len();
                if m == 0 {
                    continue;
                }
                let vinv = &f.vinv[i];
                let vx = &f.vinv_x[i];
                let resid = DVector::from_fn(m, |s, _| b.y[s] - f.beta[b.env[s]]);
                let u = vinv * &resid;
                let k = b.envs.len();
                let c_sub = DMatrix::from_fn(k, k, |p, q| c_inv[(b.envs[p], b.envs[q])]);
                // W = V⁻¹ - V⁻¹X C⁻¹ X'V⁻¹ - u u'  (the block of P - Pyy'P)
                let w = vinv - vx * c_sub * vx.transpose() - &u * u.transpose();
                for s in 0..m {
                    for t in 0..m {
                        let wst = w[(s, t)];
                        g_sg += wst;
                        g_c[(b.env[s], b.env[t])] += wst;
                    }
                    g_r[b.env[s]] += w[(s, s)];
                }
            }
            BlockGradient {
                sigma_g2: -0.5 * g_sg,
                env_cov: g_c * -0.5,
                resid: g_r * -0.5,
            }
        });
        Ok(BlockEval { loglik, grad })
    }

    /// GLS fixed effects and BLUPs at fixed variance parameters.
    pub fn blups(&self, cov: &BlockCovariance) -> Result<BlockBlups> {
        let f = self.factor(cov)?;
        let ne = self.n_env;
        let mut g = DVector::zeros(self.blocks.len());
        let mut ge = DMatrix::zeros(self.blocks.len(), ne);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.y.is_empty() {
                continue;
            }
            let resid = DVector::from_fn(b.y.len(), |s, _| b.y[s] - f.beta[b.env[s]]);
            let u = &f.vinv[i] * resid;
            g[i] = cov.sigma_g2 * u.sum();
            for a in 0..ne {
                ge[(i, a)] = b.env.iter().zip(u.iter()).map(|(&e, us)| cov.env_cov[(a, e)] * us).sum();
            }
        }
        Ok(BlockBlups { beta: f.beta, g, ge })
    }
}
