use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PredictionSet;
use crate::mixed::{fit_ranking_model, rank_order};
use crate::{Error, Result};

/// Genotypes observed in fewer than this share of test environments are not
/// eligible for global selection.
pub const DEFAULT_COVERAGE_MIN: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Global,
    PerEnvironment,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Global => "global",
            Strategy::PerEnvironment => "per_environment",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub strategy: Strategy,
    pub fraction: f64,
    /// Global: genotypes in rank order. Per environment: every genotype
    /// selected somewhere, by id.
    pub selected: Vec<String>,
    /// Test cells whose realized yields enter `mean_yield_selected`.
    pub selected_cells: usize,
    /// Genotypes (global) or cells (per environment) selection drew from.
    pub eligible_count: usize,
    pub mean_yield_selected: f64,
    /// Mean realized yield of the whole test set.
    pub mean_yield_all: f64,
    /// Mean realized yield of the eligible genotypes' cells.
    pub mean_yield_eligible: f64,
    /// `mean_yield_selected − mean_yield_all`
    pub gain: f64,
}

/// `round_half_up(fraction × n)`, at least 1.
pub fn selection_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("selection fraction {fraction} is outside (0, 1]")));
    }
    Ok(())
}

/// Mean of `y_true` over the rows accepted by `keep`, in canonical row order.
fn masked_mean(p: &PredictionSet, mut keep: impl FnMut(usize) -> bool) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (k, r) in p.rows().iter().enumerate() {
        if keep(k) {
            sum += r.y_true;
            n += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::NAN }, n)
}

/// Ranks eligible genotypes by the genetic effects of the ranking model fitted
/// to their predictions and keeps the top `fraction`.
pub fn select_global(p: &PredictionSet, fraction: f64, coverage_min: f64) -> Result<SelectionReport> {
    check_fraction(fraction)?;
    if !(0.0..=1.0).contains(&coverage_min) {
        return Err(Error::invalid(format!("coverage minimum {coverage_min} is outside [0, 1]")));
    }
    let n_env = p.environment_ids().len();
    let mut coverage: BTreeMap<&str, usize> = BTreeMap::new();
    for r in p.rows() {
        *coverage.entry(&r.genotype_id).or_default() += 1;
    }
    let eligible: BTreeSet<&str> = coverage
        .iter()
        .filter(|(_, &c)| c as f64 >= coverage_min * n_env as f64 - 1e-9)
        .map(|(g, _)| *g)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!(
            "no genotype is present in at least {:.0}% of the test environments",
            100.0 * coverage_min
        )));
    }
    let ranked: Vec<String> = if eligible.len() == 1 {
        eligible.iter().map(|g| g.to_string()).collect()
    } else {
        let triples: Vec<(&str, &str, f64)> = p
            .rows()
            .iter()
            .filter(|r| eligible.contains(r.genotype_id.as_str()))
            .map(|r| (r.genotype_id.as_str(), r.environment_id.as_str(), r.y_pred))
            .collect();
        let fit = fit_ranking_model(&triples)?;
        rank_order(&fit).into_iter().map(|i| fit.genotype_ids[i].clone()).collect()
    };
    let k = selection_size(fraction, ranked.len());
    let selected: Vec<String> = ranked[..k].to_vec();
    let chosen: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    let rows = p.rows();
    let (mean_yield_selected, selected_cells) = masked_mean(p, |k| chosen.contains(rows[k].genotype_id.as_str()));
    let (mean_yield_eligible, _) = masked_mean(p, |k| eligible.contains(rows[k].genotype_id.as_str()));
    let (mean_yield_all, _) = masked_mean(p, |_| true);
    Ok(SelectionReport {
        strategy: Strategy::Global,
        fraction,
        selected,
        selected_cells,
        eligible_count: eligible.len(),
        mean_yield_selected,
        mean_yield_all,
        mean_yield_eligible,
        gain: mean_yield_selected - mean_yield_all,
    })
}

/// Keeps the top `fraction` of genotypes within each environment by
/// predicted yield.
pub fn select_per_environment(p: &PredictionSet, fraction: f64) -> Result<SelectionReport> {
    check_fraction(fraction)?;
    if p.is_empty() {
        return Err(Error::invalid("no predictions to select from"));
    }
    let mut mask = vec![false; p.len()];
    let mut start = 0;
    for rows in p.by_environment() {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            rows[b]
                .y_pred
                .total_cmp(&rows[a].y_pred)
                .then_with(|| rows[a].genotype_id.cmp(&rows[b].genotype_id))
        });
        for &k in &order[..selection_size(fraction, rows.len())] {
            mask[start + k] = true;
        }
        start += rows.len();
    }
    let (mean_yield_selected, selected_cells) = masked_mean(p, |k| mask[k]);
    let (mean_yield_all, _) = masked_mean(p, |_| true);
    let selected: BTreeSet<String> = p
        .rows()
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(r, _)| r.genotype_id.clone())
        .collect();
    Ok(SelectionReport {
        strategy: Strategy::PerEnvironment,
        fraction,
        selected: selected.into_iter().collect(),
        selected_cells,
        eligible_count: p.len(),
        mean_yield_selected,
        mean_yield_all,
        mean_yield_eligible: mean_yield_all,
        gain: mean_yield_selected - mean_yield_all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainPoint {
    pub strategy: Strategy,
    pub fraction: f64,
    /// Mean gain over replicate prediction sets.
    pub gain: f64,
    /// Normal-approximation 95% interval of the mean; `None` for a single
    /// replicate.
    pub ci95: Option<(f64, f64)>,
}

/// Both strategies over a grid of fractions, averaged across replicate
/// prediction sets.
pub fn gain_curve(replicates: &[PredictionSet], fractions: &[f64], coverage_min: f64) -> Result<Vec<GainPoint>> {
    if fractions.is_empty() {
        return Err(Error::invalid("gain curve needs at least one fraction"));
    }
    if replicates.is_empty() {
        return Err(Error::invalid("gain curve needs at least one prediction set"));
    }
    let mut out = Vec::new();
    for strategy in [Strategy::Global, Strategy::PerEnvironment] {
        for &fraction in fractions {
            let gains = replicates
                .iter()
                .map(|p| {
                    Ok(match strategy {
                        Strategy::Global => select_global(p, fraction, coverage_min)?.gain,
                        Strategy::PerEnvironment => select_per_environment(p, fraction)?.gain,
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let n = gains.len() as f64;
            let mean = gains.iter().sum::<f64>() / n;
            let ci95 = (gains.len() > 1).then(|| {
                let sd = (gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let half = 1.96 * sd / n.sqrt();
                (mean - half, mean + half)
            });
            out.push(GainPoint {
                strategy,
                fraction,
                gain: mean,
                ci95,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(ng: usize, ne: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> PredictionSet {
        PredictionSet::from_tuples((0..ng).flat_map(|i| {
            let f = &f;
            (0..ne).map(move |j| {
                let (p, t) = f(i, j);
                (format!("g{i:02}"), format!("e{j}"), p, t)
            })
        }))
        .unwrap()
    }

    #[test]
    fn rounding() {
        assert_eq!(selection_size(0.2, 10), 2);
        assert_eq!(selection_size(0.25, 2), 1);
        assert_eq!(selection_size(0.25, 6), 2);
        assert_eq!(selection_size(0.01, 10), 1);
        assert_eq!(selection_size(1.0, 7), 7);
        assert_eq!(selection_size(0.15, 10), 2);
    }

    #[test]
    fn full_fraction_has_zero_gain() {
        let p = grid(6, 3, |i, j| ((i * j) as f64, (i + 2 * j) as f64 * 0.7));
        assert_eq!(select_global(&p, 1.0, DEFAULT_COVERAGE_MIN).unwrap().gain, 0.0);
        let s = select_per_environment(&p, 1.0).unwrap();
        assert_eq!(s.gain, 0.0);
        assert_eq!(s.mean_yield_selected, s.mean_yield_all);
    }

    #[test]
    fn oracle_global_picks_best_means() {
        let p = grid(10, 4, |i, j| {
            let t = ((i * 7) % 10) as f64 + j as f64;
            (t, t)
        });
        let s = select_global(&p, 0.2, 0.0).unwrap();
        // genotype means are ((7i) mod 10) + 1.5: best are i = 7 (9) and i = 4 (8)
        assert_eq!(s.selected, vec!["g07", "g04"]);
        assert!(s.gain > 0.0);
    }

    #[test]
    fn coverage_filter() {
        let mut rows: Vec<(String, String, f64, f64)> = Vec::new();
        for i in 0..4 {
            for j in 0..10 {
                if i == 3 && j > 7 {
                    continue;
                }
                rows.push((format!("g{i}"), format!("e{j}"), i as f64, i as f64));
            }
        }
        let p = PredictionSet::from_tuples(rows).unwrap();
        let s = select_global(&p, 1.0, 0.9).unwrap();
        assert_eq!(s.eligible_count, 3);
        assert!(!s.selected.contains(&"g3".to_string()));
        assert!(select_global(&p, 0.5, 1.0).unwrap().eligible_count == 3);
        let sparse = PredictionSet::from_tuples([("a", "e1", 1.0, 1.0), ("b", "e2", 1.0, 1.0)]).unwrap();
        assert!(select_global(&sparse, 0.5, 0.9).is_err());
    }

    #[test]
    fn per_environment_monotone_invariance() {
        let p = grid(8, 3, |i, j| (((i * 5 + j * 3) % 8) as f64, ((i * 3 + j) % 8) as f64));
        let a = select_per_environment(&p, 0.25).unwrap();
        let q = p
            .map_predictions(|r| (r.y_pred * 0.5).exp() + r.environment_id.len() as f64 * 10.0)
            .unwrap();
        assert_eq!(a, select_per_environment(&q, 0.25).unwrap());
        assert_eq!(a.selected_cells, 6);
    }

    #[test]
    fn curve_layout_and_interval() {
        let p1 = grid(5, 3, |i, j| (i as f64, (i + j) as f64));
        let p2 = grid(5, 3, |i, j| (-(i as f64), (i + j) as f64));
        let c = gain_curve(&[p1.clone(), p2], &[0.2, 1.0], 0.9).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[0].strategy, Strategy::Global);
        assert_eq!(c[3].strategy, Strategy::PerEnvironment);
        assert_eq!(c[3].gain, 0.0);
        let (lo, hi) = c[0].ci95.unwrap();
        assert!(lo < c[0].gain && c[0].gain < hi);
        assert!(gain_curve(&[p1.clone()], &[0.5], 0.9).unwrap()[0].ci95.is_none());
        assert!(gain_curve(&[p1], &[], 0.9).is_err());
    }
}
