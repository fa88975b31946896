use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{FaFit, Observations};
use crate::data::io::{csv_err, fmt_f64, header_fields, open_reader, parse_err, parse_opt_f64, CsvOut};
use crate::data::Dataset;
use crate::{Error, Result};

/// Training targets for the genotype, environment and interaction networks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSets {
    pub genotype_ids: Vec<String>,
    pub environment_ids: Vec<String>,
    /// Raw mean of all observed yields.
    pub mu_hat: f64,
    pub y_g: DVector<f64>,
    pub y_e: DVector<f64>,
    pub y_ge: DMatrix<f64>,
}

/// `y_g` and `y_e` are marginal means of the corrected cell predictions minus
/// the raw yield mean; `y_ge` is what remains of each cell.
pub fn generate_labels(fit: &FaFit, d: &Dataset) -> Result<LabelSets> {
    let obs = Observations::from_dataset(d)?;
    let yhat = &fit.cell_pred;
    let (ng, ne) = yhat.shape();
    if ng != fit.genotype_ids.len() || ne != fit.environment_ids.len() || ng == 0 || ne == 0 {
        return Err(Error::invalid("cell predictions do not cover the genotype × environment grid"));
    }
    if yhat.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cell predictions contain non-finite values"));
    }
    let mu_hat = obs.y.iter().sum::<f64>() / obs.len() as f64;
    let y_g = DVector::from_fn(ng, |i, _| yhat.row(i).mean() - mu_hat);
    let y_e = DVector::from_fn(ne, |j, _| yhat.column(j).mean() - mu_hat);
    let y_ge = DMatrix::from_fn(ng, ne, |i, j| yhat[(i, j)] - mu_hat - y_g[i] - y_e[j]);
    Ok(LabelSets {
        genotype_ids: fit.genotype_ids.clone(),
        environment_ids: fit.environment_ids.clone(),
        mu_hat,
        y_g,
        y_e,
        y_ge,
    })
}

/// Two-way fixed main-effects labels: genotype and environment marginal
/// means minus the raw yield mean, and interaction residuals of the observed
/// cell means (zero for unobserved cells).
pub fn anova_labels(d: &Dataset) -> Result<LabelSets> {
    let obs = Observations::from_dataset(d)?;
    let (ng, ne) = (obs.n_genotypes(), obs.n_environments());
    let mu_hat = obs.y.iter().sum::<f64>() / obs.len() as f64;
    let mut g = vec![(0.0, 0usize); ng];
    let mut e = vec![(0.0, 0usize); ne];
    let mut cell = DMatrix::from_element(ng, ne, (0.0, 0usize));
    for k in 0..obs.len() {
        let (i, j, y) = (obs.genotype[k], obs.environment[k], obs.y[k]);
        for acc in [&mut g[i], &mut e[j], &mut cell[(i, j)]] {
            acc.0 += y;
            acc.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n > 0 { s / n as f64 - mu_hat } else { 0.0 };
    let y_g = DVector::from_iterator(ng, g.into_iter().map(mean));
    let y_e = DVector::from_iterator(ne, e.into_iter().map(mean));
    let y_ge = DMatrix::from_fn(ng, ne, |i, j| {
        let c = cell[(i, j)];
        if c.1 > 0 {
            mean(c) - y_g[i] - y_e[j]
        } else {
            0.0
        }
    });
    Ok(LabelSets {
        genotype_ids: obs.genotype_ids,
        environment_ids: obs.environment_ids,
        mu_hat,
        y_g,
        y_e,
        y_ge,
    })
}

impl LabelSets {
    /// Labels restricted to the given genotypes and environments, in the
    /// given order. `mu_hat` is kept.
    pub fn subset(&self, genotype_ids: &[String], environment_ids: &[String]) -> Result<LabelSets> {
        let find = |ids: &[String], id: &String, what: &str| {
            ids.iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::invalid(format!("{what} {id} has no labels")))
        };
        let gi = genotype_ids
            .iter()
            .map(|g| find(&self.genotype_ids, g, "genotype"))
            .collect::<Result<Vec<_>>>()?;
        let ej = environment_ids
            .iter()
            .map(|e| find(&self.environment_ids, e, "environment"))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelSets {
            genotype_ids: genotype_ids.to_vec(),
            environment_ids: environment_ids.to_vec(),
            mu_hat: self.mu_hat,
            y_g: DVector::from_iterator(gi.len(), gi.iter().map(|&i| self.y_g[i])),
            y_e: DVector::from_iterator(ej.len(), ej.iter().map(|&j| self.y_e[j])),
            y_ge: DMatrix::from_fn(gi.len(), ej.len(), |a, b| self.y_ge[(gi[a], ej[b])]),
        })
    }

    /// `μ̂ + y_g + y_e + y_ge` for one cell.
    pub fn reconstruct(&self, i: usize, j: usize) -> f64 {
        self.mu_hat + self.y_g[i] + self.y_e[j] + self.y_ge[(i, j)]
    }
}

/// Columns `genotype_id,environment_id,y_g,y_e,y_ge,mu_hat`, one row per cell.
pub fn write_labels(path: &Path, l: &LabelSets) -> Result<()> {
    let mut w = CsvOut::create(path, &["genotype_id", "environment_id", "y_g", "y_e", "y_ge", "mu_hat"])?;
    for (i, g) in l.genotype_ids.iter().enumerate() {
        for (j, e) in l.environment_ids.iter().enumerate() {
            w.row([
                g.clone(),
                e.clone(),
                fmt_f64(l.y_g[i]),
                fmt_f64(l.y_e[j]),
                fmt_f64(l.y_ge[(i, j)]),
                fmt_f64(l.mu_hat),
            ])?;
        }
    }
    w.finish()
}

const LABELS_HEADER: [&str; 6] = ["genotype_id", "environment_id", "y_g", "y_e", "y_ge", "mu_hat"];

/// Inverse of [`write_labels`]. Every genotype × environment cell must be
/// present, and the per-genotype, per-environment and global columns must be
/// consistent across rows.
pub fn read_labels(path: &Path) -> Result<LabelSets> {
    let mut rdr = open_reader(path)?;
    if header_fields(path, &mut rdr)? != LABELS_HEADER {
        return Err(parse_err(path, 1, format!("malformed header: expected {}", LABELS_HEADER.join(","))));
    }
    let mut genotype_ids: Vec<String> = Vec::new();
    let mut environment_ids: Vec<String> = Vec::new();
    let mut gi = std::collections::HashMap::new();
    let mut ei = std::collections::HashMap::new();
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |k: usize| {
            parse_opt_f64(path, line, &row[k], LABELS_HEADER[k])?
                .ok_or_else(|| parse_err(path, line, format!("{} is empty", LABELS_HEADER[k])))
        };
        let vals = [num(2)?, num(3)?, num(4)?, num(5)?];
        let g = row[0].trim().to_string();
        let e = row[1].trim().to_string();
        let i = *gi.entry(g.clone()).or_insert_with(|| {
            genotype_ids.push(g);
            genotype_ids.len() - 1
        });
        let j = *ei.entry(e.clone()).or_insert_with(|| {
            environment_ids.push(e);
            environment_ids.len() - 1
        });
        rows.push((line, i, j, vals));
    }
    let (ng, ne) = (genotype_ids.len(), environment_ids.len());
    if ng == 0 || rows.len() != ng * ne {
        return Err(parse_err(path, 0, format!("expected {ng} × {ne} cells, found {}", rows.len())));
    }
    let mut y_g = DVector::from_element(ng, f64::NAN);
    let mut y_e = DVector::from_element(ne, f64::NAN);
    let mut y_ge = DMatrix::from_element(ng, ne, f64::NAN);
    let mu_hat = rows[0].3[3];
    for &(line, i, j, [g, e, ge, mu]) in &rows {
        let clash = |old: f64, new: f64| !old.is_nan() && old != new;
        if clash(y_g[i], g) || clash(y_e[j], e) || mu != mu_hat || !y_ge[(i, j)].is_nan() {
            return Err(parse_err(path, line, "inconsistent or duplicated label row"));
        }
        y_g[i] = g;
        y_e[j] = e;
        y_ge[(i, j)] = ge;
    }
    Ok(LabelSets {
        genotype_ids,
        environment_ids,
        mu_hat,
        y_g,
        y_e,
        y_ge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixed::FaParams;

    fn fit_with(cell_pred: DMatrix<f64>) -> FaFit {
        let (ng, ne) = cell_pred.shape();
        FaFit {
            genotype_ids: (0..ng).map(|i| format!("g{i:02}")).collect(),
            environment_ids: (0..ne).map(|j| format!("e{j:02}")).collect(),
            params: FaParams {
                mu: 0.0,
                env_fixed: vec![0.0; ne],
                sigma_g2: 0.0,
                lambda: DMatrix::zeros(ne, 2),
                psi: vec![0.0; ne],
                resid_vars: vec![1.0; ne],
            },
            blup_g: DVector::zeros(ng),
            blup_ge: DMatrix::zeros(ng, ne),
            cell_pred,
            reml_loglik: 0.0,
            converged: true,
            iterations: 0,
            trace: vec![],
            boundary: vec![],
        }
    }

    fn data(ng: usize, ne: usize, drop: &[(usize, usize)]) -> Dataset {
        let mut cells = Vec::new();
        for i in 0..ng {
            for j in 0..ne {
                if !drop.contains(&(i, j)) {
                    cells.push((i, j, (i * 3 + j * 7) as f64 * 0.1 + 4.0));
                }
            }
        }
        crate::mixed::fa::tests::dataset(&cells)
    }

    #[test]
    fn additive_surface_has_constant_interaction() {
        let pred = DMatrix::from_fn(5, 4, |i, j| 8.0 + 0.3 * i as f64 - 0.7 * j as f64);
        let d = data(5, 4, &[(1, 2), (4, 0)]);
        let l = generate_labels(&fit_with(pred.clone()), &d).unwrap();
        let mean = l.y_ge.mean();
        assert!(l.y_ge.iter().all(|v| (v - mean).abs() < 1e-10));
        for i in 0..5 {
            for j in 0..4 {
                assert!((l.reconstruct(i, j) - pred[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn labels_round_trip() {
        let d = data(4, 3, &[(0, 1)]);
        let l = anova_labels(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        write_labels(&path, &l).unwrap();
        assert_eq!(read_labels(&path).unwrap(), l);
        let s = l.subset(&[l.genotype_ids[2].clone()], &l.environment_ids[1..].to_vec()).unwrap();
        assert_eq!(s.y_ge[(0, 1)], l.y_ge[(2, 2)]);
        assert_eq!(s.reconstruct(0, 0), l.reconstruct(2, 1));
        assert!(l.subset(&["nope".into()], &[]).is_err());
    }

    #[test]
    fn anova_labels_reconstruct_observed_cells() {
        let d = data(4, 3, &[(0, 1), (3, 2)]);
        let l = anova_labels(&d).unwrap();
        let obs = Observations::from_dataset(&d).unwrap();
        for k in 0..obs.len() {
            let (i, j) = (obs.genotype[k], obs.environment[k]);
            assert!((l.reconstruct(i, j) - obs.y[k]).abs() < 1e-12);
        }
        assert_eq!(l.y_ge[(0, 1)], 0.0);
    }

    #[test]
    fn interaction_margins_are_equal() {
        let pred = DMatrix::from_fn(6, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 + 0.1 * (i * j) as f64);
        let d = data(6, 3, &[(0, 0), (2, 1), (5, 2)]);
        let l = generate_labels(&fit_with(pred), &d).unwrap();
        let rows: Vec<f64> = (0..6).map(|i| l.y_ge.row(i).mean()).collect();
        let cols: Vec<f64> = (0..3).map(|j| l.y_ge.column(j).mean()).collect();
        assert!(rows.iter().all(|r| (r - rows[0]).abs() < 1e-10));
        assert!(cols.iter().all(|c| (c - cols[0]).abs() < 1e-10));
        // unbalanced data: raw mean differs from the corrected grand mean
        assert!(rows[0].abs() > 1e-6);
    }
}
