//! Multi-environment trial data: record and feature tables, CSV ingest,
//! filtering, imputation, environment feature vectors and fold construction.

mod features;
mod filter;
mod folds;
mod impute;
pub mod io;

use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;

pub use features::{build_env_vectors, raw_env_vectors, Standardizer};
pub use filter::{filter_dataset, filter_markers, FilterReport, MarkerFilter};
pub use folds::{make_cv_folds, split_test_scenarios, Fold, FoldSpec, FoldSplit, ScenarioPartition};
pub use impute::{impute_environment, impute_markers, interpolate_series};
pub use io::{load_dataset, EnvPaths};

/// Number of daily weather positions, aligned from 7 days before sowing to
/// 132 days after.
pub const SEASON_DAYS: usize = 140;
/// First `day_index` of the aligned season.
pub const FIRST_DAY: i32 = -7;

/// One replicate plot observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub genotype_id: String,
    pub environment_id: String,
    pub year: i32,
    /// Replicate index, starting at 1.
    pub replicate: u32,
    /// Plot yield in Mg/ha; `None` when the field was empty.
    pub yield_mg_ha: Option<f64>,
}

/// Dense marker matrix with entries in {-1, 0, 1}; missing entries are stored
/// as [`MarkerMatrix::MISSING`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl MarkerMatrix {
    pub const MISSING: i8 = i8::MIN;

    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Self::MISSING; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Option<i8>>>) -> crate::Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(rows.len(), cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(crate::Error::invalid("ragged marker rows"));
            }
            for (j, v) in row.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<i8> {
        let v = self.data[i * self.cols + j];
        (v != Self::MISSING).then_some(v)
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Option<i8>) {
        self.data[i * self.cols + j] = v.unwrap_or(Self::MISSING);
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = Option<i8>> + '_ {
        self.data[i * self.cols..(i + 1) * self.cols]
            .iter()
            .map(|&v| (v != Self::MISSING).then_some(v))
    }

    pub fn has_missing(&self) -> bool {
        self.data.contains(&Self::MISSING)
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut out = Self::new(self.rows, cols.len());
        for i in 0..self.rows {
            for (k, &j) in cols.iter().enumerate() {
                out.data[i * cols.len() + k] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(&self.data[i * self.cols..(i + 1) * self.cols]);
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Real-valued copy; missing entries become 0.
    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j).map_or(0.0, f64::from)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeTable {
    pub ids: Vec<String>,
    pub marker_names: Vec<String>,
    pub markers: MarkerMatrix,
}

impl GenotypeTable {
    pub fn n_markers(&self) -> usize {
        self.markers.cols()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            marker_names: self.marker_names.clone(),
            markers: self.markers.select_rows(rows),
        }
    }

    /// Marker rows for the given genotype ids as reals.
    pub fn features_for(&self, ids: &[String]) -> crate::Result<DMatrix<f64>> {
        let index = self.index();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| crate::Error::invalid(format!("genotype {id} has no marker row")))
            })
            .collect::<crate::Result<Vec<_>>>()?;
        let m = self.markers.select_rows(&rows);
        Ok(m.to_f64())
    }
}

/// Daily weather for one environment: `SEASON_DAYS` rows by `features` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherSeries {
    pub features: usize,
    pub values: Vec<Option<f64>>,
}

impl WeatherSeries {
    pub fn empty(features: usize) -> Self {
        Self {
            features,
            values: vec![None; SEASON_DAYS * features],
        }
    }

    #[inline]
    pub fn get(&self, day: usize, feature: usize) -> Option<f64> {
        self.values[day * self.features + feature]
    }

    #[inline]
    pub fn set(&mut self, day: usize, feature: usize, v: Option<f64>) {
        self.values[day * self.features + feature] = v;
    }

    pub fn column(&self, feature: usize) -> Vec<Option<f64>> {
        (0..SEASON_DAYS).map(|d| self.get(d, feature)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(Option::is_none)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvironmentTable {
    pub ids: Vec<String>,
    pub weather_names: Vec<String>,
    pub soil_names: Vec<String>,
    pub management_names: Vec<String>,
    /// `None` when the environment has no weather rows at all.
    pub weather: Vec<Option<WeatherSeries>>,
    pub soil: Vec<Vec<Option<f64>>>,
    pub management: Vec<Vec<Option<f64>>>,
    /// (lat, lon) in degrees.
    pub coordinates: Vec<Option<(f64, f64)>>,
    /// Standardized feature vectors (weather means, soil, management), one
    /// row per environment, once built.
    pub env_vector: Option<DMatrix<f64>>,
}

impl EnvironmentTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.weather_names.len() + self.soil_names.len() + self.management_names.len()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            weather_names: self.weather_names.clone(),
            soil_names: self.soil_names.clone(),
            management_names: self.management_names.clone(),
            weather: rows.iter().map(|&i| self.weather[i].clone()).collect(),
            soil: rows.iter().map(|&i| self.soil[i].clone()).collect(),
            management: rows.iter().map(|&i| self.management[i].clone()).collect(),
            coordinates: rows.iter().map(|&i| self.coordinates[i]).collect(),
            env_vector: self
                .env_vector
                .as_ref()
                .map(|m| DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])),
        }
    }

    /// Built feature vectors for the given environment ids.
    pub fn features_for(&self, ids: &[String]) -> crate::Result<DMatrix<f64>> {
        let x = self
            .env_vector
            .as_ref()
            .ok_or_else(|| crate::Error::invalid("environment vectors have not been built"))?;
        let index = self.index();
        let mut out = DMatrix::zeros(ids.len(), x.ncols());
        for (r, id) in ids.iter().enumerate() {
            let i = *index
                .get(id.as_str())
                .ok_or_else(|| crate::Error::invalid(format!("unknown environment {id}")))?;
            out.row_mut(r).copy_from(&x.row(i));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<TrialRecord>,
    pub genotypes: GenotypeTable,
    pub environments: EnvironmentTable,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.records.len()
    }

    /// Same tables, different records.
    pub fn with_records(&self, records: Vec<TrialRecord>) -> Self {
        Self {
            records,
            genotypes: self.genotypes.clone(),
            environments: self.environments.clone(),
        }
    }

    pub fn genotype_ids_in_records(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.genotype_id.clone()).collect()
    }

    pub fn environment_ids_in_records(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.environment_id.clone()).collect()
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.records.iter().map(|r| r.year).collect()
    }

    /// Checks the record-level invariants: unique (genotype, environment,
    /// replicate) keys, finite non-negative yields and resolvable ids.
    pub fn validate(&self) -> crate::Result<()> {
        let gi = self.genotypes.index();
        let ei = self.environments.index();
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert((&r.genotype_id, &r.environment_id, r.replicate)) {
                return Err(crate::Error::invalid(format!(
                    "duplicate record ({}, {}, {})",
                    r.genotype_id, r.environment_id, r.replicate
                )));
            }
            if let Some(y) = r.yield_mg_ha {
                if !y.is_finite() || y < 0.0 {
                    return Err(crate::Error::invalid(format!(
                        "yield {y} for ({}, {}) is not a finite non-negative number",
                        r.genotype_id, r.environment_id
                    )));
                }
            }
            if !gi.contains_key(r.genotype_id.as_str()) {
                return Err(crate::Error::invalid(format!("genotype {} has no marker row", r.genotype_id)));
            }
            if !ei.contains_key(r.environment_id.as_str()) {
                return Err(crate::Error::invalid(format!(
                    "environment {} has no feature row",
                    r.environment_id
                )));
            }
        }
        Ok(())
    }
}
