use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, GenotypeTable};
use crate::{Error, Result};

/// Removal counts from [`filter_dataset`], by cause. A record failing several
/// checks is counted under the first one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub missing_yield: usize,
    pub missing_markers: usize,
    pub missing_weather: usize,
    pub environments_removed: usize,
}

/// Drops records with a missing yield, records of genotypes without a marker
/// row, and environments (with their records) that have no weather data.
pub fn filter_dataset(d: &Dataset) -> Result<(Dataset, FilterReport)> {
    let mut report = FilterReport::default();
    let geno: HashSet<&str> = d.genotypes.ids.iter().map(String::as_str).collect();

    let keep_env: Vec<usize> = (0..d.environments.len())
        .filter(|&i| d.environments.weather[i].as_ref().is_some_and(|w| !w.is_empty()))
        .collect();
    report.environments_removed = d.environments.len() - keep_env.len();
    let environments = d.environments.select(&keep_env);
    let env: HashSet<&str> = environments.ids.iter().map(String::as_str).collect();

    let mut records = Vec::with_capacity(d.records.len());
    for r in &d.records {
        if r.yield_mg_ha.is_none() {
            report.missing_yield += 1;
        } else if !geno.contains(r.genotype_id.as_str()) {
            report.missing_markers += 1;
        } else if !env.contains(r.environment_id.as_str()) {
            report.missing_weather += 1;
        } else {
            records.push(r.clone());
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok((
        Dataset {
            records,
            genotypes: d.genotypes.clone(),
            environments,
        },
        report,
    ))
}

/// Column-filter thresholds for the marker matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerFilter {
    pub maf_min: f64,
    pub max_missing: f64,
    pub target_count: usize,
    pub seed: u64,
}

impl Default for MarkerFilter {
    fn default() -> Self {
        Self {
            maf_min: 0.01,
            max_missing: 0.10,
            target_count: 20_000,
            seed: 0,
        }
    }
}

/// Minor allele frequency of one column, counting -1 as two reference
/// alleles, 0 as one of each and 1 as two alternate alleles.
pub(crate) fn minor_allele_frequency(values: impl Iterator<Item = Option<i8>>) -> Option<f64> {
    let (mut alt, mut n) = (0u64, 0u64);
    for v in values.flatten() {
        alt += (v + 1) as u64;
        n += 2;
    }
    (n > 0).then(|| {
        let p = alt as f64 / n as f64;
        p.min(1.0 - p)
    })
}

/// Drops markers with low minor allele frequency or too many missing calls,
/// then downsamples the survivors to `target_count` columns. Column order of
/// the survivors is preserved.
pub fn filter_markers(g: &GenotypeTable, opts: &MarkerFilter) -> Result<GenotypeTable> {
    let n = g.markers.rows();
    if n == 0 {
        return Err(Error::invalid("marker table has no genotypes"));
    }
    // features with > 30% missing are dropped for every modality; the marker
    // threshold is the stricter of the two
    let max_missing = opts.max_missing.min(0.30);
    let mut keep = Vec::new();
    for j in 0..g.markers.cols() {
        let col = (0..n).map(|i| g.markers.get(i, j));
        let missing = (0..n).filter(|&i| g.markers.get(i, j).is_none()).count();
        if missing as f64 / n as f64 > max_missing {
            continue;
        }
        match minor_allele_frequency(col) {
            Some(maf) if maf >= opts.maf_min => keep.push(j),
            _ => {}
        }
    }
    if keep.is_empty() {
        return Err(Error::invalid("no marker survives filtering"));
    }
    if keep.len() > opts.target_count {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, keep.len(), opts.target_count)
            .into_iter()
            .map(|k| keep[k])
            .collect();
        picked.sort_unstable();
        keep = picked;
    }
    Ok(GenotypeTable {
        ids: g.ids.clone(),
        marker_names: keep.iter().map(|&j| g.marker_names[j].clone()).collect(),
        markers: g.markers.select_columns(&keep),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EnvironmentTable, MarkerMatrix, TrialRecord, WeatherSeries};

    fn table(cols: Vec<Vec<Option<i8>>>) -> GenotypeTable {
        let n = cols[0].len();
        let rows: Vec<Vec<Option<i8>>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        GenotypeTable {
            ids: (0..n).map(|i| format!("g{i}")).collect(),
            marker_names: (0..cols.len()).map(|j| format!("m{}", j + 1)).collect(),
            markers: MarkerMatrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn low_maf_column_removed() {
        // 100 genotypes, one heterozygote: alt frequency 1/200 = 0.5%
        let mut rare = vec![Some(-1i8); 100];
        rare[3] = Some(0);
        let common: Vec<Option<i8>> = (0..100).map(|i| Some((i % 3) as i8 - 1)).collect();
        let g = table(vec![rare, common]);
        let out = filter_markers(&g, &MarkerFilter::default()).unwrap();
        assert_eq!(out.marker_names, vec!["m2".to_string()]);
    }

    #[test]
    fn column_with_twelve_percent_missing_removed() {
        let mut col: Vec<Option<i8>> = (0..100).map(|i| Some((i % 3) as i8 - 1)).collect();
        for v in col.iter_mut().take(12) {
            *v = None;
        }
        let ok: Vec<Option<i8>> = (0..100).map(|i| Some((i % 3) as i8 - 1)).collect();
        let g = table(vec![col, ok]);
        let out = filter_markers(&g, &MarkerFilter::default()).unwrap();
        assert_eq!(out.marker_names, vec!["m2".to_string()]);
    }

    #[test]
    fn downsampling_is_deterministic() {
        let cols: Vec<Vec<Option<i8>>> = (0..50)
            .map(|j| (0..20).map(|i| Some(((i + j) % 3) as i8 - 1)).collect())
            .collect();
        let g = table(cols);
        let opts = MarkerFilter {
            target_count: 20,
            seed: 7,
            ..Default::default()
        };
        let a = filter_markers(&g, &opts).unwrap();
        let b = filter_markers(&g, &opts).unwrap();
        assert_eq!(a.marker_names.len(), 20);
        assert_eq!(a, b);
        let c = filter_markers(&g, &MarkerFilter { seed: 8, ..opts }).unwrap();
        assert_ne!(a.marker_names, c.marker_names);
    }

    #[test]
    fn nothing_surviving_is_an_error() {
        let g = table(vec![vec![Some(1); 10]]);
        assert!(filter_markers(&g, &MarkerFilter::default()).is_err());
    }

    fn small_dataset() -> Dataset {
        let mut w = WeatherSeries::empty(1);
        w.set(0, 0, Some(1.0));
        let environments = EnvironmentTable {
            ids: vec!["e1".into(), "e2".into()],
            weather_names: vec!["f1".into()],
            weather: vec![Some(w), None],
            soil: vec![vec![], vec![]],
            management: vec![vec![], vec![]],
            coordinates: vec![None, None],
            ..Default::default()
        };
        let rec = |g: &str, e: &str, y: Option<f64>| TrialRecord {
            genotype_id: g.into(),
            environment_id: e.into(),
            year: 2020,
            replicate: 1,
            yield_mg_ha: y,
        };
        Dataset {
            records: vec![
                rec("g0", "e1", Some(10.0)),
                rec("g1", "e1", None),
                rec("gX", "e1", Some(9.0)),
                rec("g1", "e2", Some(8.0)),
                rec("g1", "e1", Some(7.0)),
            ],
            genotypes: table(vec![vec![Some(0), Some(1)]]),
            environments,
        }
    }

    #[test]
    fn filter_counts_and_idempotence() {
        let d = small_dataset();
        let (f, report) = filter_dataset(&d).unwrap();
        assert_eq!(f.n_samples(), 2);
        assert_eq!(
            report,
            FilterReport {
                missing_yield: 1,
                missing_markers: 1,
                missing_weather: 1,
                environments_removed: 1
            }
        );
        f.validate().unwrap();
        let (ff, again) = filter_dataset(&f).unwrap();
        assert_eq!(ff, f);
        assert_eq!(again, FilterReport::default());
    }

    #[test]
    fn empty_result_is_an_error() {
        let mut d = small_dataset();
        d.records.retain(|r| r.yield_mg_ha.is_none());
        assert!(matches!(filter_dataset(&d), Err(Error::EmptyAfterFilter)));
    }
}
