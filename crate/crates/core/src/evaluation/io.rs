//! CSV emission for predictions, metrics, selections and gain curves.
//!
//! Column orders:
//! - `predictions.csv`: genotype_id, environment_id, y_pred, y_true
//! - `metrics.csv`: model, fold, replicate, n, rmse, mae, pearson_r, r_j, rho_j
//! - per-environment metrics: environment_id, n_genotypes, included, pearson, spearman
//! - `selection.csv`: strategy, fraction, eligible_count, selected_count,
//!   selected_cells, mean_yield_selected, mean_yield_all, mean_yield_eligible,
//!   gain, selected (ids joined by `;`)
//! - `gain_curve.csv`: strategy, fraction, gain, ci95_low, ci95_high
//!
//! Undefined values are written as empty fields.

use std::path::Path;

use super::{EnvironmentMetrics, GainPoint, MetricReport, PredictionRow, PredictionSet, SelectionReport};
use crate::data::io::{csv_err, fmt_f64, header_fields, open_reader, parse_err, parse_opt_f64, CsvOut};
use crate::Result;

pub const PREDICTIONS_HEADER: [&str; 4] = ["genotype_id", "environment_id", "y_pred", "y_true"];
const METRICS_HEADER: [&str; 9] = ["model", "fold", "replicate", "n", "rmse", "mae", "pearson_r", "r_j", "rho_j"];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_predictions(path: &Path, p: &PredictionSet) -> Result<()> {
    let mut out = CsvOut::create(path, &PREDICTIONS_HEADER)?;
    for r in p.rows() {
        out.row([
            r.genotype_id.clone(),
            r.environment_id.clone(),
            fmt_f64(r.y_pred),
            fmt_f64(r.y_true),
        ])?;
    }
    out.finish()
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let mut rdr = open_reader(path)?;
    let header = header_fields(path, &mut rdr)?;
    if header != PREDICTIONS_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("malformed header: expected {}", PREDICTIONS_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let value = |k: usize, name: &str| {
            parse_opt_f64(path, line, &row[k], name)?.ok_or_else(|| parse_err(path, line, format!("{name} is empty")))
        };
        rows.push(PredictionRow {
            genotype_id: row[0].trim().to_string(),
            environment_id: row[1].trim().to_string(),
            y_pred: value(2, "y_pred")?,
            y_true: value(3, "y_true")?,
        });
    }
    PredictionSet::new(rows).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// One line of an aggregated metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub fold: String,
    pub replicate: usize,
    pub n: usize,
    pub report: MetricReport,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = CsvOut::create(path, &METRICS_HEADER)?;
    for r in rows {
        let reg = &r.report.regression;
        out.row([
            r.model.clone(),
            r.fold.clone(),
            r.replicate.to_string(),
            r.n.to_string(),
            fmt_f64(reg.rmse),
            fmt_f64(reg.mae),
            opt(reg.pearson_r),
            opt(r.report.ranking.r_j),
            opt(r.report.ranking.rho_j),
        ])?;
    }
    out.finish()
}

pub fn write_environment_metrics(path: &Path, rows: &[EnvironmentMetrics]) -> Result<()> {
    let mut out = CsvOut::create(path, &["environment_id", "n_genotypes", "included", "pearson", "spearman"])?;
    for e in rows {
        out.row([
            e.environment_id.clone(),
            e.n_genotypes.to_string(),
            e.included.to_string(),
            opt(e.pearson),
            opt(e.spearman),
        ])?;
    }
    out.finish()
}

pub fn write_selection(path: &Path, reports: &[SelectionReport]) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        &[
            "strategy",
            "fraction",
            "eligible_count",
            "selected_count",
            "selected_cells",
            "mean_yield_selected",
            "mean_yield_all",
            "mean_yield_eligible",
            "gain",
            "selected",
        ],
    )?;
    for s in reports {
        out.row([
            s.strategy.name().to_string(),
            fmt_f64(s.fraction),
            s.eligible_count.to_string(),
            s.selected.len().to_string(),
            s.selected_cells.to_string(),
            fmt_f64(s.mean_yield_selected),
            fmt_f64(s.mean_yield_all),
            fmt_f64(s.mean_yield_eligible),
            fmt_f64(s.gain),
            s.selected.join(";"),
        ])?;
    }
    out.finish()
}

pub fn write_gain_curve(path: &Path, points: &[GainPoint]) -> Result<()> {
    let mut out = CsvOut::create(path, &["strategy", "fraction", "gain", "ci95_low", "ci95_high"])?;
    for g in points {
        out.row([
            g.strategy.name().to_string(),
            fmt_f64(g.fraction),
            fmt_f64(g.gain),
            opt(g.ci95.map(|c| c.0)),
            opt(g.ci95.map(|c| c.1)),
        ])?;
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::gain_curve;

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        let p = PredictionSet::from_tuples([("g1", "e1", 0.1 + 0.2, 3.0), ("g0", "e1", -1e-300, 1.0 / 3.0)]).unwrap();
        write_predictions(&path, &p).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), p);
    }

    #[test]
    fn gain_curve_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gain_curve.csv");
        let p = PredictionSet::from_tuples((0..4).map(|i| (format!("g{i}"), "e", i as f64, i as f64))).unwrap();
        write_gain_curve(&path, &gain_curve(&[p], &[1.0], 0.9).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "strategy,fraction,gain,ci95_low,ci95_high");
        assert_eq!(lines.next().unwrap(), "global,1,0,,");
    }

    #[test]
    fn missing_truth_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "genotype_id,environment_id,y_pred,y_true\ng,e,1,\n").unwrap();
        let err = read_predictions(&path).unwrap_err().to_string();
        assert!(err.contains("y_true"), "{err}");
    }
}
