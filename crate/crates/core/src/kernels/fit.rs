use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::RelationshipMatrix;
use crate::data::io::{fmt_f64, CsvOut};
use crate::data::Dataset;
use crate::linalg::spd_inverse;
use crate::mixed::optim::{maximize, AscentOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelModel {
    /// `y = μ + g + ε`
    Gblup,
    /// `y = μ + g + e + ge + ε` with `ge ~ N(0, σ²ge Kg ⊗ Ke)`
    GxeBlup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub sigma_g2: f64,
    pub sigma_e2: Option<f64>,
    pub sigma_ge2: Option<f64>,
    pub sigma_eps2: f64,
}

/// Components held at a given value instead of estimated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FixedVariances {
    pub sigma_g2: Option<f64>,
    pub sigma_e2: Option<f64>,
    pub sigma_ge2: Option<f64>,
    pub sigma_eps2: Option<f64>,
}

impl FixedVariances {
    pub fn all(v: &VarianceComponents) -> Self {
        Self {
            sigma_g2: Some(v.sigma_g2),
            sigma_e2: v.sigma_e2,
            sigma_ge2: v.sigma_ge2,
            sigma_eps2: Some(v.sigma_eps2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Upper bound on the dense working matrices of one fit.
    pub memory_budget_bytes: u64,
    pub fixed: FixedVariances,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            memory_budget_bytes: 2 << 30,
            fixed: FixedVariances::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KernelFit {
    pub model: KernelModel,
    pub mu: f64,
    pub variance_components: VarianceComponents,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub genotype_ids: Vec<String>,
    pub environment_ids: Vec<String>,
    /// Genetic BLUPs for every genotype of the relationship matrix.
    pub blup_g: DVector<f64>,
    pub blup_e: Option<DVector<f64>>,
    /// Interaction BLUPs for every genotype × environment pair of the two
    /// relationship matrices.
    pub blup_ge: Option<DMatrix<f64>>,
    g_index: HashMap<String, usize>,
    e_index: HashMap<String, usize>,
}

impl KernelFit {
    /// `μ̂ + ĝ` for GBLUP; `μ̂ + ĝ + ê + ĝe` for G×EBLUP, which needs the
    /// environment.
    pub fn predict(&self, genotype_id: &str, environment_id: Option<&str>) -> Result<f64> {
        let i = *self
            .g_index
            .get(genotype_id)
            .ok_or_else(|| Error::invalid(format!("genotype {genotype_id} is not in the relationship matrix")))?;
        let mut y = self.mu + self.blup_g[i];
        if self.model == KernelModel::GxeBlup {
            let env = environment_id.ok_or_else(|| Error::invalid("G×EBLUP prediction needs an environment"))?;
            let j = *self
                .e_index
                .get(env)
                .ok_or_else(|| Error::invalid(format!("environment {env} is not in the relationship matrix")))?;
            y += self.blup_e.as_ref().map_or(0.0, |e| e[j]);
            y += self.blup_ge.as_ref().map_or(0.0, |ge| ge[(i, j)]);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Term {
    G,
    E,
    Ge,
}

/// Replicates collapsed to cell means; the within-cell part of the
/// likelihood only involves the residual variance.
struct Cells {
    /// (genotype, environment) indices into the relationship matrices.
    keys: Vec<(usize, usize)>,
    n: Vec<f64>,
    ybar: DVector<f64>,
    ss_within: f64,
    n_obs: usize,
    y_var: f64,
}

fn collect_cells(d: &Dataset, kg: &RelationshipMatrix, ke: Option<&RelationshipMatrix>) -> Result<Cells> {
    let gi = kg.index();
    let ei = ke.map(|k| k.index());
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &d.records {
        let Some(y) = r.yield_mg_ha else { continue };
        let g = *gi
            .get(r.genotype_id.as_str())
            .ok_or_else(|| Error::invalid(format!("genotype {} is not in the relationship matrix", r.genotype_id)))?;
        let e = match &ei {
            Some(ei) => *ei.get(r.environment_id.as_str()).ok_or_else(|| {
                Error::invalid(format!("environment {} is not in the relationship matrix", r.environment_id))
            })?,
            None => 0,
        };
        groups.entry((g, e)).or_default().push(y);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("kernel model needs observations in at least two cells"));
    }
    let mut keys = Vec::with_capacity(groups.len());
    let mut n = Vec::with_capacity(groups.len());
    let mut ybar = Vec::with_capacity(groups.len());
    let mut ss_within = 0.0;
    let mut all = Vec::new();
    for (k, ys) in groups {
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        ss_within += ys.iter().map(|y| (y - m).powi(2)).sum::<f64>();
        keys.push(k);
        n.push(ys.len() as f64);
        ybar.push(m);
        all.extend(ys);
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let y_var = all.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / all.len() as f64;
    Ok(Cells {
        keys,
        n,
        ybar: DVector::from_vec(ybar),
        ss_within,
        n_obs: all.len(),
        y_var,
    })
}

struct Evaluation {
    loglik: f64,
    grad: Vec<f64>,
    beta: f64,
    alpha: DVector<f64>,
}

struct Problem {
    cells: Cells,
    terms: Vec<(Term, DMatrix<f64>)>,
}

impl Problem {
    /// `vars` holds one variance per term followed by the residual variance.
    fn evaluate(&self, vars: &[f64], with_grad: bool) -> Result<Evaluation> {
        let c = &self.cells;
        let m = c.keys.len();
        let se = vars[self.terms.len()];
        let mut v = DMatrix::from_diagonal(&DVector::from_fn(m, |i, _| se / c.n[i]));
        for ((_, k), s) in self.terms.iter().zip(vars) {
            v.zip_apply(k, |a, b| *a += s * b);
        }
        let (vinv, logdet) = spd_inverse(v).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("kernel covariance at variances {vars:?}"))
        })?;
        let b = vinv.column_sum();
        let s = b.sum();
        if !(s > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("kernel covariance at variances {vars:?}")));
        }
        let beta = b.dot(&c.ybar) / s;
        let r = c.ybar.add_scalar(-beta);
        let alpha = &vinv * &r;
        let ypy = r.dot(&alpha);

        let n_extra = c.n_obs - m;
        let two_pi = 2.0 * PI;
        let correction: f64 = c.n.iter().map(|n| -0.5 * n.ln()).sum::<f64>()
            - 0.5 * n_extra as f64 * (two_pi * se).ln()
            - c.ss_within / (2.0 * se);
        let loglik = -0.5 * ((m - 1) as f64 * two_pi.ln() + logdet + s.ln() + ypy) + correction;

        let mut grad = Vec::new();
        if with_grad {
            for (_, k) in &self.terms {
                let tr = vinv.component_mul(k).sum();
                let kb = k * &b;
                let ka = k * &alpha;
                grad.push(-0.5 * (tr - b.dot(&kb) / s - alpha.dot(&ka)));
            }
            let mut tr = 0.0;
            let mut bb = 0.0;
            let mut aa = 0.0;
            for i in 0..m {
                tr += vinv[(i, i)] / c.n[i];
                bb += b[i] * b[i] / c.n[i];
                aa += alpha[i] * alpha[i] / c.n[i];
            }
            grad.push(-0.5 * (tr - bb / s - aa) - 0.5 * n_extra as f64 / se + c.ss_within / (2.0 * se * se));
        }
        Ok(Evaluation {
            loglik,
            grad,
            beta,
            alpha,
        })
    }
}

fn fit_kernel_model(
    d: &Dataset,
    kg: &RelationshipMatrix,
    ke: Option<&RelationshipMatrix>,
    opts: &KernelOptions,
) -> Result<KernelFit> {
    let model = if ke.is_some() { KernelModel::GxeBlup } else { KernelModel::Gblup };
    let cells = collect_cells(d, kg, ke)?;
    let m = cells.keys.len() as u64;

    let mut wanted = vec![(Term::G, opts.fixed.sigma_g2)];
    if ke.is_some() {
        wanted.push((Term::E, opts.fixed.sigma_e2));
        wanted.push((Term::Ge, opts.fixed.sigma_ge2));
    }
    for (t, f) in &wanted {
        if matches!(f, Some(v) if !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("fixed variance for {t:?} must be finite and non-negative")));
        }
    }
    if matches!(opts.fixed.sigma_eps2, Some(v) if !(v.is_finite() && v > 0.0)) {
        return Err(Error::invalid("fixed residual variance must be positive"));
    }
    // a component fixed at zero drops out of the model
    let active: Vec<(Term, Option<f64>)> = wanted.into_iter().filter(|(_, f)| *f != Some(0.0)).collect();

    let required = (active.len() as u64 + 4) * m * m * 8;
    if required > opts.memory_budget_bytes {
        return Err(Error::BudgetExceeded {
            required_bytes: required,
            limit_bytes: opts.memory_budget_bytes,
        });
    }

    let ke_k = ke.map(|k| &k.k);
    let keys = &cells.keys;
    let terms: Vec<(Term, DMatrix<f64>)> = active
        .iter()
        .map(|(t, _)| {
            let k = DMatrix::from_fn(keys.len(), keys.len(), |a, b| {
                let (ga, ea) = keys[a];
                let (gb, eb) = keys[b];
                match t {
                    Term::G => kg.k[(ga, gb)],
                    Term::E => ke_k.unwrap()[(ea, eb)],
                    Term::Ge => kg.k[(ga, gb)] * ke_k.unwrap()[(ea, eb)],
                }
            });
            (*t, k)
        })
        .collect();
    let problem = Problem { cells, terms };

    let scale = if problem.cells.y_var > 0.0 { problem.cells.y_var } else { 1.0 };
    let floor = 1e-10 * scale;
    let mut fixed: Vec<Option<f64>> = active.iter().map(|(_, f)| *f).collect();
    fixed.push(opts.fixed.sigma_eps2);
    let n_free = fixed.iter().filter(|f| f.is_none()).count();
    let to_vars = |theta: &[f64]| -> Result<Vec<f64>> {
        let mut it = theta.iter();
        fixed
            .iter()
            .map(|f| match f {
                Some(v) => Ok(*v),
                None => {
                    let t = *it.next().unwrap();
                    if t > 60.0 {
                        return Err(Error::invalid("variance parameter overflow"));
                    }
                    Ok(floor + scale * t.exp())
                }
            })
            .collect()
    };

    let (theta, converged, iterations) = if n_free == 0 {
        (Vec::new(), true, 0)
    } else {
        let start = vec![(1.0 / fixed.len() as f64).ln(); n_free];
        let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
            let vars = to_vars(theta)?;
            let ev = problem.evaluate(&vars, true)?;
            let g = ev
                .grad
                .iter()
                .zip(&vars)
                .zip(&fixed)
                .filter(|(_, f)| f.is_none())
                .map(|((g, v), _)| g * (v - floor))
                .collect();
            Ok((ev.loglik, g))
        };
        let ascent = AscentOptions {
            tol: opts.tol,
            max_iter: opts.max_iter,
            ..Default::default()
        };
        let res = maximize(objective, &start, &ascent)?;
        if !res.converged {
            log::warn!("kernel REML stopped after {} iterations without converging", res.iterations);
        }
        (res.x, res.converged, res.iterations)
    };
    let vars = to_vars(&theta)?;
    let ev = problem.evaluate(&vars, false)?;

    let variance = |t: Term| {
        active
            .iter()
            .position(|(a, _)| *a == t)
            .map_or(0.0, |p| vars[p])
    };
    let sigma_g2 = variance(Term::G);
    let nkg = kg.len();
    let nke = ke.map_or(1, |k| k.len());
    // α summed per genotype, per environment and per cell pair
    let mut a_g = DVector::zeros(nkg);
    let mut a_e = DVector::zeros(nke);
    let mut a_ge = DMatrix::zeros(nkg, nke);
    for (c, &(g, e)) in problem.cells.keys.iter().enumerate() {
        a_g[g] += ev.alpha[c];
        a_e[e] += ev.alpha[c];
        a_ge[(g, e)] += ev.alpha[c];
    }
    let blup_g = &kg.k * a_g * sigma_g2;
    let (blup_e, blup_ge, sigma_e2, sigma_ge2) = match ke {
        Some(ke) => {
            let se = variance(Term::E);
            let sge = variance(Term::Ge);
            (
                Some(&ke.k * a_e * se),
                Some(&kg.k * a_ge * &ke.k * sge),
                Some(se),
                Some(sge),
            )
        }
        None => (None, None, None, None),
    };

    Ok(KernelFit {
        model,
        mu: ev.beta,
        variance_components: VarianceComponents {
            sigma_g2,
            sigma_e2,
            sigma_ge2,
            sigma_eps2: vars[active.len()],
        },
        reml_loglik: ev.loglik,
        converged,
        iterations,
        genotype_ids: kg.ids.clone(),
        environment_ids: ke.map_or_else(Vec::new, |k| k.ids.clone()),
        blup_g,
        blup_e,
        blup_ge,
        g_index: kg.ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
        e_index: ke
            .map(|k| k.ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect())
            .unwrap_or_default(),
    })
}

/// REML fit of `y = μ + g + ε`, `g ~ N(0, σ²g Kg)`.
pub fn fit_gblup(d: &Dataset, kg: &RelationshipMatrix, opts: &KernelOptions) -> Result<KernelFit> {
    fit_kernel_model(d, kg, None, opts)
}

/// REML fit of `y = μ + g + e + ge + ε` with genotype, environment and
/// Hadamard (Kronecker on the full grid) interaction kernels.
pub fn fit_gxeblup(
    d: &Dataset,
    kg: &RelationshipMatrix,
    ke: &RelationshipMatrix,
    opts: &KernelOptions,
) -> Result<KernelFit> {
    fit_kernel_model(d, kg, Some(ke), opts)
}

/// `parameter,value` table of the fitted variance components.
pub fn write_kernel_fit(path: &Path, fit: &KernelFit) -> Result<()> {
    let mut w = CsvOut::create(path, &["parameter", "value"])?;
    let v = &fit.variance_components;
    let model = match fit.model {
        KernelModel::Gblup => "gblup",
        KernelModel::GxeBlup => "gxeblup",
    };
    w.row(["model".to_string(), model.to_string()])?;
    w.row(["mu".to_string(), fmt_f64(fit.mu)])?;
    w.row(["sigma_g2".to_string(), fmt_f64(v.sigma_g2)])?;
    if let Some(s) = v.sigma_e2 {
        w.row(["sigma_e2".to_string(), fmt_f64(s)])?;
    }
    if let Some(s) = v.sigma_ge2 {
        w.row(["sigma_ge2".to_string(), fmt_f64(s)])?;
    }
    w.row(["sigma_eps2".to_string(), fmt_f64(v.sigma_eps2)])?;
    w.row(["reml_loglik".to_string(), fmt_f64(fit.reml_loglik)])?;
    w.row(["converged".to_string(), u8::from(fit.converged).to_string()])?;
    w.finish()
}
