use nalgebra::DMatrix;

use super::{EnvironmentTable, SEASON_DAYS};
use crate::{Error, Result};

/// Per-column affine standardization learned on training environments.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    /// Population standard deviations; zero marks a constant column.
    pub sds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut sds = Vec::with_capacity(x.ncols());
        for c in x.column_iter() {
            let m = c.sum() / n;
            let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            means.push(m);
            sds.push(v.sqrt());
        }
        Self { means, sds }
    }

    /// Constant columns map to zero.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::invalid(format!(
                "feature width {} does not match standardizer width {}",
                x.ncols(),
                self.means.len()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| {
            let sd = self.sds[c];
            if sd > 0.0 {
                (x[(r, c)] - self.means[c]) / sd
            } else {
                0.0
            }
        }))
    }
}

/// Unstandardized environment vectors: season-mean weather features, then
/// soil, then management. Requires imputed inputs.
pub fn raw_env_vectors(e: &EnvironmentTable) -> Result<DMatrix<f64>> {
    let (nw, ns, nm) = (e.weather_names.len(), e.soil_names.len(), e.management_names.len());
    let mut x = DMatrix::zeros(e.len(), nw + ns + nm);
    for i in 0..e.len() {
        let w = e.weather[i]
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("environment {} has no weather", e.ids[i])))?;
        for f in 0..nw {
            let mut sum = 0.0;
            for d in 0..SEASON_DAYS {
                sum += w.get(d, f).ok_or_else(|| {
                    Error::invalid(format!("environment {} has unimputed weather", e.ids[i]))
                })?;
            }
            x[(i, f)] = sum / SEASON_DAYS as f64;
        }
        for (k, v) in e.soil[i].iter().chain(&e.management[i]).enumerate() {
            x[(i, nw + k)] = v.ok_or_else(|| {
                Error::invalid(format!("environment {} has unimputed soil/management", e.ids[i]))
            })?;
        }
    }
    Ok(x)
}

/// Builds standardized environment vectors. With `stats = None` the
/// statistics are estimated from `e` itself (the training environments) and
/// returned for reuse; otherwise the given statistics are applied unchanged.
pub fn build_env_vectors(
    e: &EnvironmentTable,
    stats: Option<&Standardizer>,
) -> Result<(EnvironmentTable, Standardizer)> {
    let raw = raw_env_vectors(e)?;
    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let s = Standardizer::fit(&raw);
            for (c, sd) in s.sds.iter().enumerate() {
                if *sd == 0.0 {
                    log::warn!("environment feature column {c} is constant; standardized to zero");
                }
            }
            s
        }
    };
    let mut out = e.clone();
    out.env_vector = Some(stats.apply(&raw)?);
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WeatherSeries;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize, seed: u64) -> EnvironmentTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weather = Vec::new();
        for _ in 0..n {
            let mut w = WeatherSeries::empty(11);
            for d in 0..SEASON_DAYS {
                for f in 0..11 {
                    w.set(d, f, Some(rng.random_range(-5.0..30.0)));
                }
            }
            weather.push(Some(w));
        }
        EnvironmentTable {
            ids: (0..n).map(|i| format!("e{i}")).collect(),
            weather_names: (1..=11).map(|k| format!("f{k}")).collect(),
            soil_names: (1..=20).map(|k| format!("s{k}")).collect(),
            management_names: vec!["g1".into(), "g2".into()],
            weather,
            soil: (0..n).map(|_| (0..20).map(|_| Some(rng.random_range(0.0..100.0))).collect()).collect(),
            management: (0..n).map(|_| vec![Some(rng.random_range(1.0..3.0)), Some(7.0)]).collect(),
            coordinates: vec![None; n],
            env_vector: None,
        }
    }

    #[test]
    fn width_is_33_and_training_columns_centered() {
        let (e, stats) = build_env_vectors(&table(9, 1), None).unwrap();
        let x = e.env_vector.unwrap();
        assert_eq!(x.ncols(), 33);
        for (c, col) in x.column_iter().enumerate() {
            let mean = col.sum() / col.len() as f64;
            assert!(mean.abs() < 1e-12, "column {c} mean {mean}");
            if stats.sds[c] > 0.0 {
                let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
                assert!((var - 1.0).abs() < 1e-12);
            }
        }
        // g2 is constant
        assert_eq!(stats.sds[32], 0.0);
        assert!(x.column(32).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_weather_gives_its_value() {
        let mut e = table(2, 2);
        let w = e.weather[0].as_mut().unwrap();
        for d in 0..SEASON_DAYS {
            w.set(d, 3, Some(4.25));
        }
        let raw = raw_env_vectors(&e).unwrap();
        assert_eq!(raw[(0, 3)], 4.25);
    }

    #[test]
    fn test_environments_use_training_statistics() {
        let train = table(8, 3);
        let test = table(3, 4);
        let (_, stats) = build_env_vectors(&train, None).unwrap();
        let (t, again) = build_env_vectors(&test, Some(&stats)).unwrap();
        assert_eq!(again, stats);
        let raw = raw_env_vectors(&test).unwrap();
        let x = t.env_vector.unwrap();
        for r in 0..3 {
            for c in 0..33 {
                let expect = if stats.sds[c] > 0.0 {
                    (raw[(r, c)] - stats.means[c]) / stats.sds[c]
                } else {
                    0.0
                };
                assert_eq!(x[(r, c)], expect);
            }
        }
    }
}
