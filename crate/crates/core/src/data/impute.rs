use std::cmp::Ordering;

use super::{EnvironmentTable, GenotypeTable, SEASON_DAYS};
use crate::{Error, Result};

/// Replaces every missing marker call by the column mode; ties go to the
/// numerically smallest value.
pub fn impute_markers(g: &GenotypeTable) -> Result<GenotypeTable> {
    let mut out = g.clone();
    let n = g.markers.rows();
    for j in 0..g.markers.cols() {
        let mut counts = [0usize; 3];
        let mut missing = false;
        for i in 0..n {
            match g.markers.get(i, j) {
                Some(v) => counts[(v + 1) as usize] += 1,
                None => missing = true,
            }
        }
        if !missing {
            continue;
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "marker {} has no observed calls",
                g.marker_names[j]
            )));
        }
        // iterating -1, 0, 1 with a strict comparison keeps the smallest on ties
        let mut mode = 0usize;
        for k in 1..3 {
            if counts[k] > counts[mode] {
                mode = k;
            }
        }
        let fill = mode as i8 - 1;
        for i in 0..n {
            if g.markers.get(i, j).is_none() {
                out.markers.set(i, j, Some(fill));
            }
        }
    }
    Ok(out)
}

/// Fills interior gaps by linear interpolation between the nearest observed
/// neighbours and leading/trailing gaps with the nearest observed value.
/// Returns `None` when nothing is observed.
pub fn interpolate_series(v: &[Option<f64>]) -> Option<Vec<f64>> {
    let observed: Vec<usize> = (0..v.len()).filter(|&i| v[i].is_some()).collect();
    let (&first, &last) = (observed.first()?, observed.last()?);
    let mut out = vec![0.0; v.len()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = match v[i] {
            Some(x) => x,
            None if i < first => v[first].unwrap(),
            None if i > last => v[last].unwrap(),
            None => {
                let hi = observed.partition_point(|&k| k < i);
                let (a, b) = (observed[hi - 1], observed[hi]);
                let (ya, yb) = (v[a].unwrap(), v[b].unwrap());
                let t = (i - a) as f64 / (b - a) as f64;
                ya + t * (yb - ya)
            }
        };
    }
    Some(out)
}

fn mode_f64(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut best: Option<(f64, usize)> = None;
    let mut i = 0;
    while i < v.len() {
        let mut k = i;
        while k < v.len() && v[k] == v[i] {
            k += 1;
        }
        if best.is_none_or(|(_, c)| k - i > c) {
            best = Some((v[i], k - i));
        }
        i = k;
    }
    best.map(|(x, _)| x)
}

/// Imputes environment features:
///
/// * daily weather gaps by [`interpolate_series`] per feature; environments
///   without weather, or with a weather feature never observed, are removed;
/// * missing soil values from the geographically nearest environment with a
///   complete soil row (Euclidean on lat/lon, ties to the smaller id);
/// * missing management values by the column mode.
pub fn impute_environment(e: &EnvironmentTable) -> Result<EnvironmentTable> {
    let mut keep = Vec::new();
    let mut weather = Vec::new();
    for (i, w) in e.weather.iter().enumerate() {
        let Some(w) = w else { continue };
        let mut filled = w.clone();
        let mut complete = true;
        for f in 0..w.features {
            match interpolate_series(&w.column(f)) {
                Some(col) => {
                    for (d, x) in col.into_iter().enumerate().take(SEASON_DAYS) {
                        filled.set(d, f, Some(x));
                    }
                }
                None => complete = false,
            }
        }
        if complete {
            keep.push(i);
            weather.push(Some(filled));
        } else {
            log::warn!("environment {} dropped: incomplete weather", e.ids[i]);
        }
    }
    let mut out = e.select(&keep);
    out.weather = weather;

    // soil
    let donors: Vec<usize> = (0..out.len())
        .filter(|&i| out.coordinates[i].is_some() && out.soil[i].iter().all(Option::is_some))
        .collect();
    let needs: Vec<usize> = (0..out.len())
        .filter(|&i| out.soil[i].iter().any(Option::is_none))
        .collect();
    if !needs.is_empty() && donors.is_empty() {
        return Err(Error::invalid("soil imputation has no donor environments"));
    }
    for i in needs {
        let (lat, lon) = out.coordinates[i].ok_or_else(|| {
            Error::invalid(format!("environment {} needs soil imputation but has no coordinates", out.ids[i]))
        })?;
        let donor = donors
            .iter()
            .copied()
            .map(|k| {
                let (a, b) = out.coordinates[k].unwrap();
                ((a - lat).powi(2) + (b - lon).powi(2), k)
            })
            .min_by(|x, y| {
                x.0.partial_cmp(&y.0)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| out.ids[x.1].cmp(&out.ids[y.1]))
            })
            .map(|(_, k)| k)
            .unwrap();
        let src = out.soil[donor].clone();
        for (v, s) in out.soil[i].iter_mut().zip(src) {
            if v.is_none() {
                *v = s;
            }
        }
    }

    // management
    for k in 0..out.management_names.len() {
        if out.management.iter().all(|row| row[k].is_some()) {
            continue;
        }
        let fill = mode_f64(out.management.iter().filter_map(|row| row[k])).ok_or_else(|| {
            Error::invalid(format!("management feature {} is never observed", out.management_names[k]))
        })?;
        for row in out.management.iter_mut() {
            row[k].get_or_insert(fill);
        }
    }
    Ok(out)
}
