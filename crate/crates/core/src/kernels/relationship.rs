use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::data::{EnvironmentTable, GenotypeTable};
use crate::{Error, Result};

/// Trace-normalized linear kernel over genotypes or environments.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipMatrix {
    pub ids: Vec<String>,
    pub k: DMatrix<f64>,
}

impl RelationshipMatrix {
    /// `XX' / (tr(XX')/n)`, optionally after centering the columns of `x`.
    pub fn from_features(ids: Vec<String>, x: &DMatrix<f64>, centered: bool) -> Result<Self> {
        if ids.len() != x.nrows() {
            return Err(Error::invalid(format!("{} ids for {} feature rows", ids.len(), x.nrows())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain missing or non-finite values"));
        }
        let mut x = x.clone();
        if centered {
            for mut c in x.column_iter_mut() {
                let m = c.mean();
                c.add_scalar_mut(-m);
            }
        }
        let mut k = &x * x.transpose();
        let tr = k.trace();
        if !(tr > 0.0) {
            return Err(Error::invalid("feature matrix is all zero, relationship matrix is undefined"));
        }
        k *= x.nrows() as f64 / tr;
        // exact symmetry
        for i in 0..k.nrows() {
            for j in 0..i {
                k[(j, i)] = k[(i, j)];
            }
        }
        Ok(Self { ids, k })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// Requires imputed markers.
pub fn genomic_relationship(g: &GenotypeTable, centered: bool) -> Result<RelationshipMatrix> {
    if g.markers.has_missing() {
        return Err(Error::invalid("markers must be imputed before building the relationship matrix"));
    }
    RelationshipMatrix::from_features(g.ids.clone(), &g.markers.to_f64(), centered)
}

/// Uses the environment vectors, which must already be built.
pub fn environmental_relationship(e: &EnvironmentTable, centered: bool) -> Result<RelationshipMatrix> {
    let x = e
        .env_vector
        .as_ref()
        .ok_or_else(|| Error::invalid("environment vectors have not been built"))?;
    RelationshipMatrix::from_features(e.ids.clone(), x, centered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MarkerMatrix;

    fn table(rows: Vec<Vec<i8>>) -> GenotypeTable {
        let n = rows.len();
        let d = rows[0].len();
        GenotypeTable {
            ids: (0..n).map(|i| format!("g{i}")).collect(),
            marker_names: (0..d).map(|m| format!("m{m}")).collect(),
            markers: MarkerMatrix::from_rows(rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect())
                .unwrap(),
        }
    }

    #[test]
    fn hand_computed_three_by_two() {
        // X = [1 0; 0 1; 1 1], XX' = [1 0 1; 0 1 1; 1 1 2], trace 4, scale 3/4
        let k = genomic_relationship(&table(vec![vec![1, 0], vec![0, 1], vec![1, 1]]), false).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0]) * 0.75;
        assert!((&k.k - expect).amax() < 1e-15);
        // centered: X - mean = [1/3 -2/3; -2/3 1/3; 1/3 1/3]
        let k = genomic_relationship(&table(vec![vec![1, 0], vec![0, 1], vec![1, 1]]), true).unwrap();
        let xc = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, -2.0, 1.0, 1.0, 1.0]) / 3.0;
        let raw = &xc * xc.transpose();
        let expect = &raw * (3.0 / raw.trace());
        assert!((&k.k - expect).amax() < 1e-14);
    }

    #[test]
    fn trace_and_duplicates() {
        let g = table(vec![vec![1, -1, 0, 1], vec![0, 0, 1, -1], vec![1, -1, 0, 1], vec![-1, 1, 1, 0]]);
        for centered in [false, true] {
            let k = genomic_relationship(&g, centered).unwrap();
            assert!((k.k.trace() - 4.0).abs() < 1e-9);
            assert_eq!(k.k.row(0), k.k.row(2));
            assert_eq!(k.k.column(0), k.k.column(2));
        }
    }

    #[test]
    fn all_zero_markers() {
        assert!(genomic_relationship(&table(vec![vec![0, 0], vec![0, 0]]), false).is_err());
    }

    #[test]
    fn orthogonal_environments_give_identity() {
        let e = EnvironmentTable {
            ids: vec!["a".into(), "b".into()],
            env_vector: Some(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])),
            ..Default::default()
        };
        let k = environmental_relationship(&e, false).unwrap();
        assert_eq!(k.k, DMatrix::identity(2, 2));
    }
}
