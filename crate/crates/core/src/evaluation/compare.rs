use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

/// Replicate values of each metric for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelReplicates {
    pub model: String,
    pub metrics: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub model: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` below two replicates.
    pub sd: Option<f64>,
    pub is_best: bool,
    /// Welch test against the best model on this metric.
    pub p_vs_best: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiteratureTest {
    pub metric: String,
    pub model: String,
    pub reference: String,
    pub value: f64,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub summaries: Vec<MetricSummary>,
    pub literature: Vec<LiteratureTest>,
}

/// Lower is better for error metrics.
fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "rmse" | "mae" | "mse")
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        f64::NAN
    };
    (m, v)
}

fn two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

/// Two-sided Welch t-test p-value, or `None` with fewer than two values in
/// either sample.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Some(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    Some(two_sided(t, df))
}

/// Two-sided one-sample t-test of `a` against `mu0`.
pub fn one_sample_t_test(a: &[f64], mu0: f64) -> Option<f64> {
    if a.len() < 2 {
        return None;
    }
    let (m, v) = mean_var(a);
    let n = a.len() as f64;
    if v == 0.0 {
        return Some(if m == mu0 { 1.0 } else { 0.0 });
    }
    Some(two_sided((m - mu0) / (v / n).sqrt(), n - 1.0))
}

/// Per-metric means and standard deviations, the best model per metric,
/// Welch tests of every other model against it, and one-sample tests of the
/// best model against fixed `(reference, metric, value)` results.
pub fn compare_models(models: &[ModelReplicates], literature: &[(String, String, f64)]) -> Result<Comparison> {
    if models.is_empty() {
        return Err(Error::invalid("no models to compare"));
    }
    let mut metrics: Vec<&String> = models.iter().flat_map(|m| m.metrics.keys()).collect();
    metrics.sort();
    metrics.dedup();
    let mut summaries = Vec::new();
    let mut best_by_metric = BTreeMap::new();
    for metric in metrics {
        let present: Vec<(&ModelReplicates, &Vec<f64>)> = models
            .iter()
            .filter_map(|m| m.metrics.get(metric).filter(|v| !v.is_empty()).map(|v| (m, v)))
            .collect();
        let better = |a: f64, b: f64| if higher_is_better(metric) { a > b } else { a < b };
        let mut best: Option<(&ModelReplicates, &Vec<f64>, f64)> = None;
        for &(m, v) in &present {
            let mean = mean_var(v).0;
            if best.is_none_or(|(_, _, bm)| better(mean, bm)) {
                best = Some((m, v, mean));
            }
        }
        let Some((best_model, best_vals, _)) = best else { continue };
        best_by_metric.insert(metric.clone(), (best_model.model.clone(), best_vals.clone()));
        for (m, v) in present {
            let (mean, var) = mean_var(v);
            let is_best = m.model == best_model.model;
            summaries.push(MetricSummary {
                metric: metric.clone(),
                model: m.model.clone(),
                n: v.len(),
                mean,
                sd: (v.len() > 1).then(|| var.sqrt()),
                is_best,
                p_vs_best: if is_best { None } else { welch_t_test(v, best_vals) },
            });
        }
    }
    let literature = literature
        .iter()
        .filter_map(|(reference, metric, value)| {
            best_by_metric.get(metric).map(|(model, vals)| LiteratureTest {
                metric: metric.clone(),
                model: model.clone(),
                reference: reference.clone(),
                value: *value,
                p_value: one_sample_t_test(vals, *value),
            })
        })
        .collect();
    Ok(Comparison { summaries, literature })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists() {
        let a = [0.3, 0.35, 0.32, 0.31];
        assert!(welch_t_test(&a, &a).unwrap() > 0.99);
    }

    #[test]
    fn separated_means() {
        let a: Vec<f64> = (0..10).map(|k| 0.40 + 1e-6 * ((k % 3) as f64 - 1.0)).collect();
        let b: Vec<f64> = (0..10).map(|k| 0.30 + 1e-6 * ((k % 4) as f64 - 1.5)).collect();
        assert!(welch_t_test(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn one_sample_closed_form() {
        // mean 0.41, sd 0.003 exactly: alternating ±0.003·sqrt(9/10)
        let d = 0.003 * (0.9f64).sqrt();
        let a: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { 0.41 + d } else { 0.41 - d }).collect();
        let p = one_sample_t_test(&a, 0.38).unwrap();
        // t = 0.03 / (0.003 / sqrt(10)) = 31.62 on 9 df
        assert!(p < 1e-9);
        assert!(p < 0.05);
        let t = StudentsT::new(0.0, 1.0, 9.0).unwrap();
        assert!((p - 2.0 * t.cdf(-10.0 * 10f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn best_model_by_direction() {
        let m = |name: &str, r: Vec<f64>, rmse: Vec<f64>| ModelReplicates {
            model: name.into(),
            metrics: [("r_j".to_string(), r), ("rmse".to_string(), rmse)].into_iter().collect(),
        };
        let c = compare_models(
            &[m("a", vec![0.4, 0.41], vec![2.5, 2.6]), m("b", vec![0.3, 0.31], vec![2.3, 2.35])],
            &[("lit".into(), "r_j".into(), 0.38)],
        )
        .unwrap();
        let best: Vec<(&str, &str)> = c
            .summaries
            .iter()
            .filter(|s| s.is_best)
            .map(|s| (s.metric.as_str(), s.model.as_str()))
            .collect();
        assert_eq!(best, vec![("r_j", "a"), ("rmse", "b")]);
        assert_eq!(c.literature[0].model, "a");
    }
}
