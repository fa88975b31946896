use gxe_core::data::{build_env_vectors, Dataset};
use gxe_core::mixed::{anova_labels, LabelSets};
use gxe_core::neural::*;
use gxe_core::simgen::{simulate, GroundTruth, SimConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn planted_linear(n: usize, d: usize, seed: u64) -> (EncoderData, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1..=1) as f64);
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) / (d as f64).sqrt()).collect();
    let y = (0..n).map(|i| (0..d).map(|j| x[(i, j)] * w[j]).sum()).collect();
    (EncoderData::new(x, y).unwrap(), w)
}

fn sim(cfg: &SimConfig) -> (Dataset, GroundTruth) {
    let (mut d, truth) = simulate(cfg).unwrap();
    d.environments = build_env_vectors(&d.environments, None).unwrap().0;
    (d, truth)
}

#[test]
fn planted_linear_map_is_learned() {
    let (data, _) = planted_linear(100, 500, 1);
    // dropout is a regularizer; the check is about the optimizer reaching the map
    let enc = EncoderConfig {
        dropout: 0.0,
        ..EncoderConfig::genotype(Profile::Desk)
    };
    let mut m = build_genotype_encoder(500, &enc, 3).unwrap();
    let cfg = StructuredConfig::profile(Profile::Paper).genotype_training;
    assert_eq!(cfg.epochs, 250);
    let trace = train(&mut m, &data, None, &cfg).unwrap();
    let last = trace.last().unwrap().train_mse;
    assert!(last < 1e-3, "final training MSE {last}");
}

#[test]
fn label_shift_moves_predictions() {
    let (data, _) = planted_linear(100, 200, 5);
    let enc = EncoderConfig {
        dropout: 0.0,
        ..EncoderConfig::genotype(Profile::Desk)
    };
    let cfg = StructuredConfig::profile(Profile::Paper).genotype_training;
    let fit = |shift: f64| {
        let y = data.y.iter().map(|v| v + shift).collect();
        let d = EncoderData::new(data.x.clone(), y).unwrap();
        let mut m = build_genotype_encoder(200, &enc, 3).unwrap();
        train(&mut m, &d, None, &cfg).unwrap();
        m.predict(&data.x).unwrap()
    };
    let (base, moved) = (fit(0.0), fit(1.0));
    let shift = moved.iter().zip(&base).map(|(a, b)| a - b).sum::<f64>() / base.len() as f64;
    assert!((shift - 1.0).abs() < 0.1, "recovered shift {shift}");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (data, _) = planted_linear(60, 500, 2);
    let g = build_genotype_encoder(500, &EncoderConfig::genotype(Profile::Desk), 7).unwrap();
    let err = gradient_check(&g, &data, 10, 1e-5, 3).unwrap();
    assert!(err < 1e-4, "genotype encoder: {err}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xe = DMatrix::from_fn(40, 33, |_, _| rng.random_range(-2.0..2.0));
    let ye = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e_data = EncoderData::new(xe, ye).unwrap();
    let e = build_env_encoder(33, &EncoderConfig::environment(Profile::Desk), 8).unwrap();
    let err = gradient_check(&e, &e_data, 10, 1e-5, 3).unwrap();
    assert!(err < 1e-4, "environment encoder: {err}");
}

#[test]
fn two_tower_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xg = DMatrix::from_fn(30, 120, |_, _| rng.random_range(-1..=1) as f64);
    let xe = DMatrix::from_fn(6, 33, |_, _| rng.random_range(-2.0..2.0));
    let pairs: Vec<(usize, usize)> = (0..30).flat_map(|i| (0..6).map(move |j| (i, j))).collect();
    let y = pairs.iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    let data = PairData::new(xg, xe, pairs, y).unwrap();
    let g = build_genotype_encoder(120, &EncoderConfig::genotype(Profile::Desk), 1).unwrap();
    let e = build_env_encoder(33, &EncoderConfig::environment(Profile::Desk), 2).unwrap();
    let t = TwoTowerModel::from_encoders(&g, &e, EMBEDDING_DIM, 3).unwrap();
    let err = gradient_check(&t, &data, 10, 1e-5, 5).unwrap();
    assert!(err < 1e-4, "two-tower: {err}");
}

fn all_cells(l: &LabelSets) -> Vec<(String, String)> {
    l.genotype_ids
        .iter()
        .flat_map(|g| l.environment_ids.iter().map(move |e| (g.clone(), e.clone())))
        .collect()
}

#[test]
fn zero_interaction_labels_give_small_interaction() {
    let cfg = SimConfig {
        missing_cell_fraction: 0.3,
        ..SimConfig::desk(21)
    };
    let (d, _) = sim(&cfg);
    let mut labels = anova_labels(&d).unwrap();
    labels.y_ge.fill(0.0);
    let fit = structured_fit(&d, &labels, &StructuredConfig::profile(Profile::Desk).with_seed(2)).unwrap();
    let observed: std::collections::BTreeSet<(String, String)> = d
        .records
        .iter()
        .map(|r| (r.genotype_id.clone(), r.environment_id.clone()))
        .collect();
    let held: Vec<(String, String)> = all_cells(&labels).into_iter().filter(|c| !observed.contains(c)).collect();
    assert!(!held.is_empty());
    let gids: Vec<String> = held.iter().map(|c| c.0.clone()).collect();
    let eids: Vec<String> = held.iter().map(|c| c.1.clone()).collect();
    let ge = fit
        .model
        .f_ge
        .predict(
            &d.genotypes.features_for(&gids).unwrap(),
            &d.environments.features_for(&eids).unwrap(),
        )
        .unwrap();
    let y: Vec<f64> = d.records.iter().filter_map(|r| r.yield_mg_ha).collect();
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64).sqrt();
    let mean_abs = ge.iter().map(|v| v.abs()).sum::<f64>() / ge.len() as f64;
    assert!(mean_abs < 0.05 * sd, "mean |f_ge| {mean_abs}, yield sd {sd}");
}

#[test]
fn noise_free_additive_data_are_recovered() {
    let cfg = SimConfig {
        lambda_scale: 0.0,
        psi_range: (0.0, 0.0),
        resid_range: (0.0, 0.0),
        ..SimConfig::desk(8)
    };
    let (d, truth) = sim(&cfg);
    // REML has no interior optimum at zero residual variance; fixed-effect
    // labels are exact for a noise-free additive full grid
    let labels = anova_labels(&d).unwrap();
    // nothing to regularize against: no dropout, and faster encoder rates
    let mut c = StructuredConfig::profile(Profile::Desk).with_seed(1);
    c.genotype_encoder.dropout = 0.0;
    c.environment_encoder.dropout = 0.0;
    c.genotype_training.learning_rate = 1e-2;
    c.environment_training.learning_rate = 1e-2;
    let fit = structured_fit(&d, &labels, &c).unwrap();
    let cells = all_cells(&labels);
    let pred = fit
        .model
        .predict_cells(&d.genotypes, &d.environments, &cells, Recomposition::Full)
        .unwrap();
    let gi: std::collections::HashMap<&str, usize> =
        truth.genotype_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let ei: std::collections::HashMap<&str, usize> =
        truth.environment_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let truth_vals: Vec<f64> = cells
        .iter()
        .map(|(g, e)| truth.cell_mean(gi[g.as_str()], ei[e.as_str()]))
        .collect();
    let rmse = (pred.iter().zip(&truth_vals).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt();
    let y: Vec<f64> = d.records.iter().filter_map(|r| r.yield_mg_ha).collect();
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64).sqrt();
    assert!(rmse < 0.1 * sd, "rmse {rmse}, yield sd {sd}");
}
