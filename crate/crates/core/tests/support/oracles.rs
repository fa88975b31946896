//! Dense brute-force references for the mixed-model and kernel fits. Every
//! function builds the full observation-level covariance and solves it
//! directly, sharing no code with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// One observation as (genotype index, environment index, yield).
pub type Obs = (usize, usize, f64);

const LN_2PI: f64 = 1.8378770664093453;

fn logdet_spd(m: &DMatrix<f64>) -> f64 {
    let l = m.clone().cholesky().expect("matrix is not positive definite").l();
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn inverse_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().cholesky().expect("matrix is not positive definite").inverse()
}

/// `-½[(n - p) ln 2π + ln|V| + ln|X'V⁻¹X| + (y - Xβ̂)'V⁻¹(y - Xβ̂)]`.
pub fn reml(v: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let (n, p) = x.shape();
    let vinv = inverse_spd(v);
    let xtvx = x.transpose() * &vinv * x;
    let beta = inverse_spd(&xtvx) * (x.transpose() * &vinv * y);
    let r = y - x * &beta;
    let quad = (r.transpose() * &vinv * &r)[(0, 0)];
    let ll = -0.5 * ((n - p) as f64 * LN_2PI + logdet_spd(v) + logdet_spd(&xtvx) + quad);
    (ll, beta)
}

fn y_of(obs: &[Obs]) -> DVector<f64> {
    DVector::from_iterator(obs.len(), obs.iter().map(|o| o.2))
}

fn env_design(obs: &[Obs], ne: usize) -> DMatrix<f64> {
    DMatrix::from_fn(obs.len(), ne, |k, j| if obs[k].1 == j { 1.0 } else { 0.0 })
}

/// Covariance of `y = Xβ + G_i + GE_ij + ε` with `G ~ σ²g I`,
/// `GE_i· ~ N(0, C)` and residual variance `resid[j]`.
pub fn fa_covariance(obs: &[Obs], sigma_g2: f64, env_cov: &DMatrix<f64>, resid: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(obs.len(), obs.len(), |a, b| {
        let (ga, ea, _) = obs[a];
        let (gb, eb, _) = obs[b];
        let mut v = 0.0;
        if ga == gb {
            v += sigma_g2 + env_cov[(ea, eb)];
        }
        if a == b {
            v += resid[ea];
        }
        v
    })
}

/// REML log-likelihood of the FA model with environment fixed effects.
pub fn fa_reml(obs: &[Obs], ne: usize, sigma_g2: f64, env_cov: &DMatrix<f64>, resid: &[f64]) -> f64 {
    let v = fa_covariance(obs, sigma_g2, env_cov, resid);
    reml(&v, &env_design(obs, ne), &y_of(obs)).0
}

pub struct FaMme {
    /// Environment means.
    pub beta: DVector<f64>,
    pub g: DVector<f64>,
    /// `n_g × n_e`.
    pub ge: DMatrix<f64>,
}

/// Henderson's mixed-model equations, assembled and solved in full.
/// Random effects are ordered `[G_0..G_{ng-1}, GE_00, GE_01, ...]`.
pub fn fa_mme(obs: &[Obs], ng: usize, ne: usize, sigma_g2: f64, env_cov: &DMatrix<f64>, resid: &[f64]) -> FaMme {
    let n = obs.len();
    let q = ng + ng * ne;
    let x = env_design(obs, ne);
    let z = DMatrix::from_fn(n, q, |k, c| {
        let (g, e, _) = obs[k];
        if c == g || c == ng + g * ne + e {
            1.0
        } else {
            0.0
        }
    });
    let rinv = DMatrix::from_diagonal(&DVector::from_fn(n, |k, _| 1.0 / resid[obs[k].1]));
    let mut ginv = DMatrix::zeros(q, q);
    for i in 0..ng {
        ginv[(i, i)] = 1.0 / sigma_g2;
    }
    let cinv = inverse_spd(env_cov);
    for i in 0..ng {
        let o = ng + i * ne;
        ginv.view_mut((o, o), (ne, ne)).copy_from(&cinv);
    }
    let y = y_of(obs);
    let xr = x.transpose() * &rinv;
    let zr = z.transpose() * &rinv;
    let p = ne + q;
    let mut lhs = DMatrix::zeros(p, p);
    lhs.view_mut((0, 0), (ne, ne)).copy_from(&(&xr * &x));
    lhs.view_mut((0, ne), (ne, q)).copy_from(&(&xr * &z));
    lhs.view_mut((ne, 0), (q, ne)).copy_from(&(&zr * &x));
    lhs.view_mut((ne, ne), (q, q)).copy_from(&(&zr * &z + ginv));
    let mut rhs = DVector::zeros(p);
    rhs.rows_mut(0, ne).copy_from(&(&xr * &y));
    rhs.rows_mut(ne, q).copy_from(&(&zr * &y));
    let sol = lhs.lu().solve(&rhs).expect("singular mixed-model equations");
    FaMme {
        beta: sol.rows(0, ne).into_owned(),
        g: sol.rows(ne, ng).into_owned(),
        ge: DMatrix::from_fn(ng, ne, |i, j| sol[ne + ng + i * ne + j]),
    }
}

/// Variance of each kernel term plus the residual; absent terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct KernelVars {
    pub g: f64,
    pub e: Option<f64>,
    pub ge: Option<f64>,
    pub eps: f64,
}

pub struct KernelOracle {
    pub loglik: f64,
    pub mu: f64,
    /// Over every genotype of `kg`.
    pub g: DVector<f64>,
    pub e: Option<DVector<f64>>,
    pub ge: Option<DMatrix<f64>>,
}

/// `y = μ + g + e + ge + ε` with `g ~ σ²g Kg`, `e ~ σ²e Ke` and
/// `ge ~ σ²ge (Kg ⊗ Ke)`, solved at the observation level. BLUPs are
/// `Cov(u, y) V⁻¹ (y - 1μ̂)` for every level of each kernel.
pub fn kernel_oracle(obs: &[Obs], kg: &DMatrix<f64>, ke: Option<&DMatrix<f64>>, vars: KernelVars) -> KernelOracle {
    let n = obs.len();
    let ke_at = |a: usize, b: usize| ke.map_or(0.0, |k| k[(a, b)]);
    let v = DMatrix::from_fn(n, n, |a, b| {
        let (ga, ea, _) = obs[a];
        let (gb, eb, _) = obs[b];
        let mut s = vars.g * kg[(ga, gb)];
        if let Some(se) = vars.e {
            s += se * ke_at(ea, eb);
        }
        if let Some(sge) = vars.ge {
            s += sge * kg[(ga, gb)] * ke_at(ea, eb);
        }
        if a == b {
            s += vars.eps;
        }
        s
    });
    let x = DMatrix::from_element(n, 1, 1.0);
    let y = y_of(obs);
    let (loglik, beta) = reml(&v, &x, &y);
    let mu = beta[0];
    let w = inverse_spd(&v) * y.add_scalar(-mu);
    let ng = kg.nrows();
    let g = DVector::from_fn(ng, |i, _| vars.g * obs.iter().zip(w.iter()).map(|(o, wk)| kg[(i, o.0)] * wk).sum::<f64>());
    let ne = ke.map_or(0, |k| k.nrows());
    let e = vars.e.map(|se| {
        DVector::from_fn(ne, |j, _| se * obs.iter().zip(w.iter()).map(|(o, wk)| ke_at(j, o.1) * wk).sum::<f64>())
    });
    let ge = vars.ge.map(|sge| {
        DMatrix::from_fn(ng, ne, |i, j| {
            sge * obs
                .iter()
                .zip(w.iter())
                .map(|(o, wk)| kg[(i, o.0)] * ke_at(j, o.1) * wk)
                .sum::<f64>()
        })
    });
    KernelOracle { loglik, mu, g, e, ge }
}

/// Lower-trapezoidal loadings with the same `ΛΛ'`, from the QR
/// decomposition of `Λ'`.
pub fn lower_loadings(lambda: &DMatrix<f64>) -> DMatrix<f64> {
    lambda.transpose().qr().r().transpose()
}
