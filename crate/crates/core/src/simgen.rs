//! Synthetic multi-environment trials with known ground truth.
//!
//! Genotype effects and the genotype side of the interaction are linear in
//! sparse sets of causal markers; environment effects and the factor
//! loadings are linear in a few causal environment features. Both halves of
//! the pipeline therefore have something learnable, while the interaction
//! rows keep covariance `ΛΛ' + Ψ`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::io::{fmt_f64, CsvOut};
use crate::data::{
    Dataset, EnvironmentTable, GenotypeTable, MarkerMatrix, TrialRecord, WeatherSeries, SEASON_DAYS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_g: usize,
    pub n_e: usize,
    pub d_g: usize,
    /// Environment feature width; the last 2 are management, the 20 before
    /// them soil (fewer when `d_e` is small) and the rest weather.
    pub d_e: usize,
    pub r_true: usize,
    pub mu: f64,
    pub sigma_g2: f64,
    /// Standard deviation of the environment effects.
    pub env_effect_sd: f64,
    pub lambda_scale: f64,
    pub psi_range: (f64, f64),
    pub resid_range: (f64, f64),
    pub replicates: usize,
    pub missing_cell_fraction: f64,
    /// Causal markers for the genotype effect, and again for each factor.
    pub n_causal_markers: usize,
    pub n_causal_env_features: usize,
    /// Noise standard deviation of the causal environment features around
    /// their loading-determined values.
    pub link_noise: f64,
    pub first_year: i32,
    /// Environments cycle through this many consecutive years.
    pub n_years: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SimConfig {
    /// 100 genotypes × 12 environments, 500 markers, 33 environment
    /// features, two factors, two replicates.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_g: 100,
            n_e: 12,
            d_g: 500,
            d_e: 33,
            r_true: 2,
            mu: 10.0,
            sigma_g2: 1.0,
            env_effect_sd: 1.5,
            lambda_scale: 0.8,
            psi_range: (0.05, 0.2),
            resid_range: (0.2, 0.5),
            replicates: 2,
            missing_cell_fraction: 0.0,
            n_causal_markers: 50,
            n_causal_env_features: 4,
            link_noise: 0.1,
            first_year: 2014,
            n_years: 8,
            seed,
        }
    }

    fn split_features(&self) -> (usize, usize, usize) {
        let management = 2;
        let soil = 20.min(self.d_e - management - 1);
        (self.d_e - soil - management, soil, management)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("simulation config: {m}")));
        if self.n_e < 2 {
            return bad("n_e must be at least 2");
        }
        if self.n_g < 1 || self.replicates < 1 || self.n_years < 1 {
            return bad("n_g, replicates and n_years must be positive");
        }
        if self.r_true > self.n_e {
            return bad("r_true exceeds n_e");
        }
        if self.d_e < 3 {
            return bad("d_e must be at least 3");
        }
        if (self.r_true + 1) * self.n_causal_markers > self.d_g {
            return bad("(r_true + 1) × n_causal_markers exceeds d_g");
        }
        if self.n_causal_env_features > self.d_e {
            return bad("n_causal_env_features exceeds d_e");
        }
        let ranges = [self.psi_range, self.resid_range];
        if ranges.iter().any(|(lo, hi)| !(0.0 <= *lo && lo <= hi && hi.is_finite())) {
            return bad("variance ranges must satisfy 0 ≤ lo ≤ hi");
        }
        let scalars = [self.sigma_g2, self.env_effect_sd, self.lambda_scale, self.link_noise];
        if scalars.iter().any(|v| !v.is_finite() || *v < 0.0) || !self.mu.is_finite() {
            return bad("variances and scales must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.missing_cell_fraction) {
            return bad("missing_cell_fraction must lie in [0, 1)");
        }
        let silent = self.sigma_g2 == 0.0
            && self.lambda_scale == 0.0
            && self.psi_range.1 == 0.0
            && self.resid_range.1 == 0.0;
        if silent && self.missing_cell_fraction > 0.0 {
            return bad("all variances are zero, so deleted cells cannot be recovered");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub genotype_ids: Vec<String>,
    pub environment_ids: Vec<String>,
    pub mu: f64,
    /// Centered genotype effects, `x_i · marker_effects − offset`.
    pub g: DVector<f64>,
    pub e: DVector<f64>,
    pub ge: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub psi: Vec<f64>,
    pub resid_vars: Vec<f64>,
    pub marker_effects: DVector<f64>,
    /// Environment effects are `z_j · env_effect_weights` on the raw
    /// (unstandardized) environment features.
    pub env_effect_weights: DVector<f64>,
    /// Standardized factor scores; `ge = scores Λ' + δ`.
    pub factor_scores: DMatrix<f64>,
    pub causal_markers: Vec<usize>,
    pub causal_env_features: Vec<usize>,
    /// Raw environment features (season-mean weather, soil, management).
    pub env_features: DMatrix<f64>,
}

impl GroundTruth {
    /// `ΛΛ' + Ψ`.
    pub fn env_cov(&self) -> DMatrix<f64> {
        let mut c = &self.lambda * self.lambda.transpose();
        for (a, p) in self.psi.iter().enumerate() {
            c[(a, a)] += p;
        }
        c
    }

    /// Noise-free expected yield of a cell.
    pub fn cell_mean(&self, i: usize, j: usize) -> f64 {
        self.mu + self.g[i] + self.e[j] + self.ge[(i, j)]
    }
}

fn population_sd(v: &DVector<f64>) -> f64 {
    let m = v.mean();
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Columns of `m` centered and orthogonalized so that `m'm / n = I` (columns
/// that vanish are left at zero).
fn whiten(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut c in m.column_iter_mut() {
        let mean = c.mean();
        c.add_scalar_mut(-mean);
    }
    for k in 0..m.ncols() {
        for p in 0..k {
            let proj = m.column(k).dot(&m.column(p)) / n;
            let prev = m.column(p).clone_owned();
            m.column_mut(k).axpy(-proj, &prev, 1.0);
        }
        let norm = (m.column(k).norm_squared() / n).sqrt();
        if norm > 1e-12 {
            m.column_mut(k).unscale_mut(norm);
        } else {
            m.column_mut(k).fill(0.0);
        }
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ng, ne, r) = (cfg.n_g, cfg.n_e, cfg.r_true);
    let genotype_ids: Vec<String> = (0..ng).map(|i| format!("G{:04}", i + 1)).collect();
    let environment_ids: Vec<String> = (0..ne).map(|j| format!("E{:03}", j + 1)).collect();

    // markers and genotype-side effects
    let calls = [-1i8, 0, 1];
    let mut markers = MarkerMatrix::new(ng, cfg.d_g);
    for i in 0..ng {
        for m in 0..cfg.d_g {
            markers.set(i, m, Some(*calls.choose(&mut rng).unwrap()));
        }
    }
    let x = markers.to_f64();
    let mut order: Vec<usize> = (0..cfg.d_g).collect();
    order.shuffle(&mut rng);
    let nc = cfg.n_causal_markers;
    let causal_markers: Vec<usize> = {
        let mut c = order[..nc].to_vec();
        c.sort_unstable();
        c
    };

    let mut marker_effects = DVector::zeros(cfg.d_g);
    for &m in &causal_markers {
        marker_effects[m] = rng.sample::<f64, _>(StandardNormal);
    }
    let raw_g = &x * &marker_effects;
    let sd = population_sd(&raw_g);
    let g = if cfg.sigma_g2 > 0.0 && sd > 0.0 {
        marker_effects *= cfg.sigma_g2.sqrt() / sd;
        let raw = &x * &marker_effects;
        raw.add_scalar(-raw.mean())
    } else {
        marker_effects.fill(0.0);
        DVector::zeros(ng)
    };

    // factor scores orthogonal to the genotype effects so that G and GE
    // stay uncorrelated in every sample
    let mut scores = DMatrix::zeros(ng, r + 1);
    scores.column_mut(0).copy_from(&g);
    for k in 0..r {
        let set = &order[(k + 1) * nc..(k + 2) * nc];
        let w: Vec<f64> = set.iter().map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..ng {
            scores[(i, k + 1)] = set.iter().zip(&w).map(|(&m, w)| x[(i, m)] * w).sum();
        }
    }
    whiten(&mut scores);
    let factor_scores = scores.columns(1, r).into_owned();

    // interaction covariance
    let mut lambda = DMatrix::zeros(ne, r);
    if cfg.lambda_scale > 0.0 {
        let n = Normal::new(0.0, cfg.lambda_scale).unwrap();
        lambda.iter_mut().for_each(|v| *v = n.sample(&mut rng));
    }
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            Uniform::new(lo, hi).unwrap().sample(rng)
        } else {
            lo
        }
    };
    let psi: Vec<f64> = (0..ne).map(|_| draw(&mut rng, cfg.psi_range)).collect();
    let resid_vars: Vec<f64> = (0..ne).map(|_| draw(&mut rng, cfg.resid_range)).collect();
    let mut ge = &factor_scores * lambda.transpose();
    for i in 0..ng {
        for j in 0..ne {
            ge[(i, j)] += psi[j].sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }

    // environment features linked to the loadings
    let mut feats: Vec<usize> = (0..cfg.d_e).collect();
    feats.shuffle(&mut rng);
    let mut causal_env_features = feats[..cfg.n_causal_env_features].to_vec();
    causal_env_features.sort_unstable();
    let mut z = DMatrix::from_fn(ne, cfg.d_e, |_, _| rng.sample::<f64, _>(StandardNormal));
    for &c in &causal_env_features {
        let a: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for j in 0..ne {
            let signal = if cfg.lambda_scale > 0.0 {
                (0..r).map(|k| lambda[(j, k)] * a[k]).sum::<f64>() / (norm * cfg.lambda_scale)
            } else {
                0.0
            };
            z[(j, c)] = signal + cfg.link_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut env_effect_weights = DVector::zeros(cfg.d_e);
    for &c in &causal_env_features {
        env_effect_weights[c] = rng.sample::<f64, _>(StandardNormal);
    }
    let raw_e = &z * &env_effect_weights;
    let sd = population_sd(&raw_e);
    if sd > 0.0 {
        env_effect_weights *= cfg.env_effect_sd / sd;
    } else {
        env_effect_weights.fill(0.0);
    }
    let e = &z * &env_effect_weights;

    let environments = environment_table(cfg, &environment_ids, &z, &mut rng);

    // trials
    let keep = kept_cells(cfg, &mut rng);
    let mut records = Vec::new();
    for j in 0..ne {
        let year = cfg.first_year + (j % cfg.n_years) as i32;
        let noise_sd = resid_vars[j].sqrt();
        for i in 0..ng {
            if !keep[i * ne + j] {
                continue;
            }
            for rep in 1..=cfg.replicates {
                let eps: f64 = rng.sample(StandardNormal);
                let y = cfg.mu + g[i] + e[j] + ge[(i, j)] + noise_sd * eps;
                records.push(TrialRecord {
                    genotype_id: genotype_ids[i].clone(),
                    environment_id: environment_ids[j].clone(),
                    year,
                    replicate: rep as u32,
                    yield_mg_ha: Some(y.max(0.0)),
                });
            }
        }
    }

    let dataset = Dataset {
        records,
        genotypes: GenotypeTable {
            ids: genotype_ids.clone(),
            marker_names: (1..=cfg.d_g).map(|m| format!("m{m}")).collect(),
            markers,
        },
        environments,
    };
    let truth = GroundTruth {
        genotype_ids,
        environment_ids,
        mu: cfg.mu,
        g,
        e,
        ge,
        lambda,
        psi,
        resid_vars,
        marker_effects,
        env_effect_weights,
        factor_scores,
        causal_markers,
        causal_env_features,
        env_features: z,
    };
    Ok((dataset, truth))
}

/// Cells to keep, row-major by genotype. Deletions that would empty a
/// genotype or an environment are skipped.
fn kept_cells(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (ng, ne) = (cfg.n_g, cfg.n_e);
    let mut keep = vec![true; ng * ne];
    let target = (cfg.missing_cell_fraction * (ng * ne) as f64).round() as usize;
    if target == 0 {
        return keep;
    }
    let mut per_g = vec![ne; ng];
    let mut per_e = vec![ng; ne];
    let mut cells: Vec<usize> = (0..ng * ne).collect();
    cells.shuffle(rng);
    let mut removed = 0;
    for c in cells {
        if removed == target {
            break;
        }
        let (i, j) = (c / ne, c % ne);
        if per_g[i] > 1 && per_e[j] > 1 {
            keep[c] = false;
            per_g[i] -= 1;
            per_e[j] -= 1;
            removed += 1;
        }
    }
    keep
}

/// Weather series whose season means equal the weather part of `z` exactly
/// (a full-period sinusoid is added on top), soil and management copied from
/// `z`.
fn environment_table(cfg: &SimConfig, ids: &[String], z: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> EnvironmentTable {
    let (nw, ns, nm) = cfg.split_features();
    let ne = ids.len();
    let mut weather = Vec::with_capacity(ne);
    let mut soil = Vec::with_capacity(ne);
    let mut management = Vec::with_capacity(ne);
    let mut coordinates = Vec::with_capacity(ne);
    let period = SEASON_DAYS as f64;
    for j in 0..ne {
        let mut w = WeatherSeries::empty(nw);
        for f in 0..nw {
            let amp: f64 = rng.random_range(0.5..2.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let wave: Vec<f64> = (0..SEASON_DAYS)
                .map(|d| amp * (std::f64::consts::TAU * d as f64 / period + phase).sin())
                .collect();
            // remove the rounding residue so the mean is exactly z
            let offset = wave.iter().sum::<f64>() / period;
            for (d, v) in wave.iter().enumerate() {
                w.set(d, f, Some(z[(j, f)] + v - offset));
            }
        }
        weather.push(Some(w));
        soil.push((0..ns).map(|k| Some(z[(j, nw + k)])).collect());
        management.push((0..nm).map(|k| Some(z[(j, nw + ns + k)])).collect());
        coordinates.push(Some((rng.random_range(35.0..45.0), rng.random_range(-100.0..-85.0))));
    }
    EnvironmentTable {
        ids: ids.to_vec(),
        weather_names: (1..=nw).map(|k| format!("f{k}")).collect(),
        soil_names: (1..=ns).map(|k| format!("s{k}")).collect(),
        management_names: (1..=nm).map(|k| format!("g{k}")).collect(),
        weather,
        soil,
        management,
        coordinates,
        env_vector: None,
    }
}

/// Writes one CSV per ground-truth component into `dir`.
pub fn write_truth(dir: &Path, t: &GroundTruth) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };

    let mut w = CsvOut::create(&out("truth_scalars.csv"), &["name", "value"])?;
    w.row(["mu".to_string(), fmt_f64(t.mu)])?;
    w.finish()?;

    let mut w = CsvOut::create(&out("truth_genotypes.csv"), &["genotype_id", "g"])?;
    for (i, id) in t.genotype_ids.iter().enumerate() {
        w.row([id.clone(), fmt_f64(t.g[i])])?;
    }
    w.finish()?;

    let r = t.lambda.ncols();
    let mut header: Vec<String> = vec!["environment_id".into(), "e".into(), "psi".into(), "resid_var".into()];
    header.extend((1..=r).map(|k| format!("lambda_{k}")));
    let mut w = CsvOut::create(&out("truth_environments.csv"), &header)?;
    for (j, id) in t.environment_ids.iter().enumerate() {
        let mut row = vec![id.clone(), fmt_f64(t.e[j]), fmt_f64(t.psi[j]), fmt_f64(t.resid_vars[j])];
        row.extend((0..r).map(|k| fmt_f64(t.lambda[(j, k)])));
        w.row(row)?;
    }
    w.finish()?;

    let mut w = CsvOut::create(&out("truth_ge.csv"), &["genotype_id", "environment_id", "ge"])?;
    for (i, g) in t.genotype_ids.iter().enumerate() {
        for (j, e) in t.environment_ids.iter().enumerate() {
            w.row([g.clone(), e.clone(), fmt_f64(t.ge[(i, j)])])?;
        }
    }
    w.finish()?;

    let causal: BTreeSet<usize> = t.causal_markers.iter().copied().collect();
    let mut w = CsvOut::create(&out("truth_marker_effects.csv"), &["marker", "effect", "causal_for_g"])?;
    for m in 0..t.marker_effects.len() {
        w.row([
            format!("m{}", m + 1),
            fmt_f64(t.marker_effects[m]),
            u8::from(causal.contains(&m)).to_string(),
        ])?;
    }
    w.finish()?;

    let causal: BTreeSet<usize> = t.causal_env_features.iter().copied().collect();
    let mut w = CsvOut::create(&out("truth_env_weights.csv"), &["feature", "weight", "causal"])?;
    for c in 0..t.env_effect_weights.len() {
        w.row([
            (c + 1).to_string(),
            fmt_f64(t.env_effect_weights[c]),
            u8::from(causal.contains(&c)).to_string(),
        ])?;
    }
    w.finish()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::raw_env_vectors;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            n_g: 40,
            n_e: 6,
            d_g: 120,
            n_causal_markers: 20,
            seed,
            ..SimConfig::desk(seed)
        }
    }

    #[test]
    fn noise_free_additive_case() {
        let cfg = SimConfig {
            resid_range: (0.0, 0.0),
            lambda_scale: 0.0,
            psi_range: (0.0, 0.0),
            ..small(1)
        };
        let (d, t) = simulate(&cfg).unwrap();
        let gi = d.genotypes.index();
        let ei: std::collections::HashMap<_, _> =
            t.environment_ids.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
        for r in &d.records {
            let (i, j) = (gi[r.genotype_id.as_str()], ei[r.environment_id.as_str()]);
            assert_eq!(r.yield_mg_ha.unwrap(), t.mu + t.g[i] + t.e[j]);
        }
    }

    #[test]
    fn deterministic() {
        let a = simulate(&small(5)).unwrap();
        let b = simulate(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.records, simulate(&small(6)).unwrap().0.records);
    }

    #[test]
    fn genotype_effects_have_target_variance() {
        let (_, t) = simulate(&small(2)).unwrap();
        let var = t.g.iter().map(|v| v * v).sum::<f64>() / t.g.len() as f64;
        assert!(t.g.mean().abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn deletion_keeps_every_genotype_and_environment() {
        let cfg = SimConfig {
            missing_cell_fraction: 0.6,
            ..small(3)
        };
        let (d, _) = simulate(&cfg).unwrap();
        assert_eq!(d.genotype_ids_in_records().len(), 40);
        assert_eq!(d.environment_ids_in_records().len(), 6);
        let cells: BTreeSet<_> = d.records.iter().map(|r| (&r.genotype_id, &r.environment_id)).collect();
        assert_eq!(cells.len(), 240 - 144);
        d.validate().unwrap();
    }

    #[test]
    fn season_means_equal_raw_features() {
        let (d, t) = simulate(&small(4)).unwrap();
        let raw = raw_env_vectors(&d.environments).unwrap();
        assert_eq!(raw.ncols(), 33);
        assert!((raw - &t.env_features).amax() < 1e-12);
    }

    #[test]
    fn degenerate_configs() {
        assert!(simulate(&SimConfig { n_e: 1, ..small(1) }).is_err());
        let silent = SimConfig {
            sigma_g2: 0.0,
            lambda_scale: 0.0,
            psi_range: (0.0, 0.0),
            resid_range: (0.0, 0.0),
            missing_cell_fraction: 0.1,
            ..small(1)
        };
        assert!(simulate(&silent).is_err());
    }
}
