mod support;

use std::collections::HashMap;

use gxe_core::data::{build_env_vectors, Dataset, EnvironmentTable, GenotypeTable, MarkerMatrix, TrialRecord};
use gxe_core::kernels::{
    environmental_relationship, fit_gblup, fit_gxeblup, genomic_relationship, FixedVariances, KernelOptions,
    RelationshipMatrix, VarianceComponents,
};
use gxe_core::mixed::{restricted_log_likelihood, solve_mme, FaParams};
use gxe_core::simgen::{simulate, SimConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{fa_mme, fa_reml, kernel_oracle, lower_loadings, KernelVars, Obs};

fn grid_dataset(cells: &[(usize, usize, f64)]) -> Dataset {
    Dataset {
        records: cells
            .iter()
            .enumerate()
            .map(|(k, &(g, e, y))| TrialRecord {
                genotype_id: format!("g{g:02}"),
                environment_id: format!("e{e:02}"),
                year: 2020,
                replicate: k as u32 + 1,
                yield_mg_ha: Some(y),
            })
            .collect(),
        genotypes: GenotypeTable {
            ids: vec![],
            marker_names: vec![],
            markers: MarkerMatrix::new(0, 0),
        },
        environments: EnvironmentTable::default(),
    }
}

fn random_params(ne: usize, rank: usize, rng: &mut ChaCha8Rng) -> FaParams {
    FaParams {
        mu: 0.0,
        env_fixed: vec![0.0; ne],
        sigma_g2: rng.random_range(0.3..1.5),
        lambda: DMatrix::from_fn(ne, rank, |a, k| if k > a { 0.0 } else { rng.random_range(-1.0..1.0) }),
        psi: (0..ne).map(|_| rng.random_range(0.05..0.4)).collect(),
        resid_vars: (0..ne).map(|_| rng.random_range(0.2..0.8)).collect(),
    }
}

/// Observations of `d` indexed by position in the given id lists.
fn observations(d: &Dataset, gids: &[String], eids: &[String]) -> Vec<Obs> {
    let gi: HashMap<&str, usize> = gids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let ei: HashMap<&str, usize> = eids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    d.records
        .iter()
        .filter_map(|r| Some((gi[r.genotype_id.as_str()], ei[r.environment_id.as_str()], r.yield_mg_ha?)))
        .collect()
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fa_likelihood_matches_dense_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let (ng, ne) = (6, 3);
        let mut cells = Vec::new();
        for g in 0..ng {
            for e in 0..ne {
                // the last trials drop cells and vary the replicate count
                let reps = if trial < 3 { 2 } else { rng.random_range(0..3) };
                for _ in 0..reps {
                    cells.push((g, e, 5.0 + e as f64 + rng.random_range(-2.0..2.0)));
                }
            }
        }
        let d = grid_dataset(&cells);
        let p = random_params(ne, 2, &mut rng);
        let ours = restricted_log_likelihood(&d, &p).unwrap();
        let obs: Vec<Obs> = cells.clone();
        let dense = fa_reml(&obs, ne, p.sigma_g2, &p.env_cov(), &p.resid_vars);
        assert!((ours - dense).abs() < 1e-6, "trial {trial}: {ours} vs {dense}");
    }
}

#[test]
fn mme_matches_dense_solve_at_simulated_truth() {
    for (seed, missing) in [(1, 0.0), (2, 0.25)] {
        let cfg = SimConfig {
            n_g: 15,
            n_e: 5,
            missing_cell_fraction: missing,
            ..SimConfig::desk(seed)
        };
        let (d, t) = simulate(&cfg).unwrap();
        let order: Vec<usize> = d
            .environment_ids_in_records()
            .iter()
            .map(|id| t.environment_ids.iter().position(|x| x == id).unwrap())
            .collect();
        let env_cov = t.env_cov();
        let cov = DMatrix::from_fn(5, 5, |a, b| env_cov[(order[a], order[b])]);
        let resid: Vec<f64> = order.iter().map(|&j| t.resid_vars[j]).collect();
        let lam_sorted = DMatrix::from_fn(5, t.lambda.ncols(), |a, k| t.lambda[(order[a], k)]);
        let p = FaParams {
            mu: 0.0,
            env_fixed: vec![0.0; 5],
            sigma_g2: cfg.sigma_g2,
            lambda: lower_loadings(&lam_sorted),
            psi: order.iter().map(|&j| t.psi[j]).collect(),
            resid_vars: resid.clone(),
        };
        let sol = solve_mme(&d, &p).unwrap();
        let obs = observations(&d, &sol.genotype_ids, &sol.environment_ids);
        let dense = fa_mme(&obs, 15, 5, cfg.sigma_g2, &cov, &resid);
        let beta: Vec<f64> = sol.env_fixed.iter().map(|e| sol.mu + e).collect();
        assert!(max_abs_diff(&beta, dense.beta.iter()) < 1e-8);
        assert!(max_abs_diff(sol.blup_g.iter(), dense.g.iter()) < 1e-8);
        assert!(max_abs_diff(sol.blup_ge.iter(), dense.ge.iter()) < 1e-8);
    }
}

fn fixed(v: VarianceComponents) -> KernelOptions {
    KernelOptions {
        fixed: FixedVariances::all(&v),
        ..KernelOptions::default()
    }
}

fn kernel_data(seed: u64, n_g: usize, d_g: usize) -> (Dataset, RelationshipMatrix, RelationshipMatrix) {
    let cfg = SimConfig {
        n_g,
        n_e: 5,
        d_g,
        n_causal_markers: 1,
        missing_cell_fraction: 0.2,
        ..SimConfig::desk(seed)
    };
    let (mut d, _) = simulate(&cfg).unwrap();
    d.environments = build_env_vectors(&d.environments, None).unwrap().0;
    let kg = genomic_relationship(&d.genotypes, false).unwrap();
    let ke = environmental_relationship(&d.environments, false).unwrap();
    (d, kg, ke)
}

#[test]
fn gblup_matches_dense_solution() {
    let (d, kg, _) = kernel_data(3, 20, 3);
    let v = VarianceComponents {
        sigma_g2: 0.7,
        sigma_e2: None,
        sigma_ge2: None,
        sigma_eps2: 0.9,
    };
    let fit = fit_gblup(&d, &kg, &fixed(v)).unwrap();
    let obs = observations(&d, &kg.ids, &d.environments.ids);
    let o = kernel_oracle(&obs, &kg.k, None, KernelVars { g: 0.7, e: None, ge: None, eps: 0.9 });
    assert!((fit.reml_loglik - o.loglik).abs() < 1e-8, "{} vs {}", fit.reml_loglik, o.loglik);
    assert!((fit.mu - o.mu).abs() < 1e-8);
    assert!(max_abs_diff(fit.blup_g.iter(), o.g.iter()) < 1e-8);
}

#[test]
fn gxeblup_matches_dense_kronecker_solution() {
    let (d, kg, ke) = kernel_data(4, 15, 30);
    let v = VarianceComponents {
        sigma_g2: 0.6,
        sigma_e2: Some(1.3),
        sigma_ge2: Some(0.4),
        sigma_eps2: 0.5,
    };
    let fit = fit_gxeblup(&d, &kg, &ke, &fixed(v)).unwrap();
    let obs = observations(&d, &kg.ids, &ke.ids);
    let o = kernel_oracle(
        &obs,
        &kg.k,
        Some(&ke.k),
        KernelVars {
            g: 0.6,
            e: Some(1.3),
            ge: Some(0.4),
            eps: 0.5,
        },
    );
    assert!((fit.reml_loglik - o.loglik).abs() < 1e-8, "{} vs {}", fit.reml_loglik, o.loglik);
    assert!((fit.mu - o.mu).abs() < 1e-8);
    assert!(max_abs_diff(fit.blup_g.iter(), o.g.iter()) < 1e-8);
    assert!(max_abs_diff(fit.blup_e.as_ref().unwrap().iter(), o.e.as_ref().unwrap().iter()) < 1e-8);
    assert!(max_abs_diff(fit.blup_ge.as_ref().unwrap().iter(), o.ge.as_ref().unwrap().iter()) < 1e-8);
}

#[test]
fn zero_interaction_variance_nests_the_additive_model() {
    let (d, kg, ke) = kernel_data(5, 15, 30);
    let v = VarianceComponents {
        sigma_g2: 0.8,
        sigma_e2: Some(1.1),
        sigma_ge2: Some(0.0),
        sigma_eps2: 0.6,
    };
    let fit = fit_gxeblup(&d, &kg, &ke, &fixed(v)).unwrap();
    let obs = observations(&d, &kg.ids, &ke.ids);
    let o = kernel_oracle(
        &obs,
        &kg.k,
        Some(&ke.k),
        KernelVars {
            g: 0.8,
            e: Some(1.1),
            ge: None,
            eps: 0.6,
        },
    );
    assert!((fit.reml_loglik - o.loglik).abs() < 1e-8);
    assert!(fit.blup_ge.as_ref().unwrap().iter().all(|x| x.abs() < 1e-12));
    assert!(max_abs_diff(fit.blup_e.as_ref().unwrap().iter(), o.e.as_ref().unwrap().iter()) < 1e-8);
}

#[test]
fn estimated_gblup_variances_maximize_the_dense_likelihood() {
    let (d, kg, _) = kernel_data(6, 40, 60);
    let fit = fit_gblup(&d, &kg, &KernelOptions::default()).unwrap();
    let vc = fit.variance_components;
    let obs = observations(&d, &kg.ids, &d.environments.ids);
    let at = |g: f64, eps: f64| kernel_oracle(&obs, &kg.k, None, KernelVars { g, e: None, ge: None, eps }).loglik;
    let best = at(vc.sigma_g2, vc.sigma_eps2);
    assert!((best - fit.reml_loglik).abs() < 1e-8);
    for (fg, fe) in [(1.05, 1.0), (0.95, 1.0), (1.0, 1.05), (1.0, 0.95)] {
        assert!(at(vc.sigma_g2 * fg, vc.sigma_eps2 * fe) <= best + 1e-9);
    }
}
