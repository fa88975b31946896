use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, TrialRecord};
use crate::{Error, Result};

/// Shrinks a training set to about `fraction` of its records: replicates are
/// collapsed to the smallest replicate index of each cell, then random
/// records of the most frequently observed genotypes are dropped. With
/// `fraction = 1` the dataset is returned unchanged.
pub fn subsample_for_budget(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subsample fraction {fraction} is outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(d.clone());
    }
    let target = (fraction * d.records.len() as f64).round() as usize;

    let mut first: BTreeMap<(&str, &str), &TrialRecord> = BTreeMap::new();
    for r in &d.records {
        let slot = first.entry((&r.genotype_id, &r.environment_id)).or_insert(r);
        if r.replicate < slot.replicate {
            *slot = r;
        }
    }
    let mut keep: Vec<TrialRecord> = first.into_values().cloned().collect();
    if keep.len() <= target {
        return Ok(d.with_records(keep));
    }

    let mut per_g: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut per_e: HashMap<String, usize> = HashMap::new();
    for (i, r) in keep.iter().enumerate() {
        per_g.entry(r.genotype_id.clone()).or_default().push(i);
        *per_e.entry(r.environment_id.clone()).or_default() += 1;
    }
    let mut removed = vec![false; keep.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining = keep.len();
    while remaining > target {
        let top = per_g.values().map(Vec::len).max().unwrap_or(0);
        let candidates: Vec<String> = per_g
            .iter()
            .filter(|(_, v)| v.len() == top)
            .map(|(g, _)| g.clone())
            .collect();
        if top <= 1 {
            return Err(Error::invalid(format!(
                "subsample fraction {fraction} would remove every record of some genotype"
            )));
        }
        let g = candidates.choose(&mut rng).unwrap();
        let rows = per_g.get_mut(g).unwrap();
        let removable: Vec<usize> = (0..rows.len())
            .filter(|&p| per_e[&keep[rows[p]].environment_id] > 1)
            .collect();
        let Some(&p) = removable.choose(&mut rng) else {
            return Err(Error::invalid(format!(
                "subsample fraction {fraction} would remove every record of some environment"
            )));
        };
        let idx = rows.swap_remove(p);
        removed[idx] = true;
        *per_e.get_mut(&keep[idx].environment_id).unwrap() -= 1;
        remaining -= 1;
    }
    let mut i = 0;
    keep.retain(|_| {
        i += 1;
        !removed[i - 1]
    });
    Ok(d.with_records(keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EnvironmentTable, GenotypeTable, MarkerMatrix};

    fn dataset(counts: &[(usize, usize)], reps: u32) -> Dataset {
        // (genotype, number of environments observed)
        let mut records = Vec::new();
        for &(g, n_env) in counts {
            for e in 0..n_env {
                for k in 1..=reps {
                    records.push(TrialRecord {
                        genotype_id: format!("g{g}"),
                        environment_id: format!("e{e}"),
                        year: 2020,
                        replicate: k,
                        yield_mg_ha: Some(1.0 + k as f64),
                    });
                }
            }
        }
        Dataset {
            records,
            genotypes: GenotypeTable {
                ids: vec![],
                marker_names: vec![],
                markers: MarkerMatrix::new(0, 0),
            },
            environments: EnvironmentTable::default(),
        }
    }

    #[test]
    fn full_fraction_is_identity() {
        let d = dataset(&[(0, 3), (1, 2)], 2);
        assert_eq!(subsample_for_budget(&d, 1.0, 1).unwrap(), d);
    }

    #[test]
    fn forty_percent_and_replicate_collapse() {
        let d = dataset(&[(0, 10), (1, 10), (2, 10), (3, 10), (4, 10)], 2);
        let s = subsample_for_budget(&d, 0.4, 7).unwrap();
        assert_eq!(s.n_samples(), 40);
        assert!(s.records.iter().all(|r| r.replicate == 1));
        let s = subsample_for_budget(&d, 0.6, 7).unwrap();
        assert_eq!(s.n_samples(), 50);
    }

    #[test]
    fn most_frequent_genotypes_lose_records_first() {
        let d = dataset(&[(0, 10), (1, 8), (2, 3)], 1);
        let s = subsample_for_budget(&d, 15.0 / 21.0, 3).unwrap();
        let count = |g: &str| s.records.iter().filter(|r| r.genotype_id == g).count();
        assert_eq!((count("g0"), count("g1"), count("g2")), (6, 6, 3));
        assert_eq!(s, subsample_for_budget(&d, 15.0 / 21.0, 3).unwrap());
    }

    #[test]
    fn too_small_fraction() {
        let d = dataset(&[(0, 2), (1, 2)], 1);
        assert!(subsample_for_budget(&d, 0.25, 1).is_err());
        assert!(subsample_for_budget(&d, 0.0, 1).is_err());
    }
}
