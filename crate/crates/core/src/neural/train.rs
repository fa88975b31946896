use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Network, Samples};
use crate::data::io::{fmt_f64, CsvOut};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Adaptive moments (0.9, 0.999, 1e-8) with decoupled weight decay.
    #[default]
    AdamW,
    /// Plain gradient descent with decoupled weight decay; combined with a
    /// batch size covering the data this is full-batch descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay {} is invalid", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    /// Eval-mode MSE on the training samples after the epoch.
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn step(opt: Optimizer, state: &mut AdamState, p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
    let decay = 1.0 - lr * wd;
    match opt {
        Optimizer::Sgd => {
            for (p, g) in p.iter_mut().zip(g) {
                *p = *p * decay - lr * g;
            }
        }
        Optimizer::AdamW => {
            state.t += 1;
            let c1 = 1.0 - BETA1.powi(state.t);
            let c2 = 1.0 - BETA2.powi(state.t);
            for k in 0..p.len() {
                state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g[k];
                state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mh = state.m[k] / c1;
                let vh = state.v[k] / c2;
                p[k] = p[k] * decay - lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Eval-mode MSE over all samples.
pub fn evaluate_mse<N: Network>(m: &N, data: &N::Data) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let pred = m.predict_samples(data, chunk);
        total += pred.iter().zip(chunk).map(|(p, &i)| (p - data.targets()[i]).powi(2)).sum::<f64>();
    }
    total / data.len() as f64
}

/// Minimizes the MSE with seeded shuffling and dropout active during
/// training only. Runs every epoch (no early stopping) and returns the loss
/// trace.
pub fn train<N: Network>(m: &mut N, data: &N::Data, validation: Option<&N::Data>, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    m.check_data(data)?;
    if let Some(v) = validation {
        m.check_data(v)?;
    }
    let n = m.params().len();
    let mut state = AdamState {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let loss = m.batch_loss(data, batch, Some(&mut drop_rng), Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss in epoch {epoch} at learning rate {}; lower the learning rate",
                    cfg.learning_rate
                )));
            }
            step(cfg.optimizer, &mut state, m.params_mut(), &grad, cfg.learning_rate, cfg.weight_decay);
        }
        let train_mse = evaluate_mse(m, data);
        if !train_mse.is_finite() {
            return Err(Error::Diverged(format!(
                "training MSE is {train_mse} after epoch {epoch} at learning rate {}; lower the learning rate",
                cfg.learning_rate
            )));
        }
        let val_mse = validation.filter(|v| !v.is_empty()).map(|v| evaluate_mse(m, v));
        log::debug!("epoch {epoch}: train {train_mse:.6}");
        trace.push(TraceRow {
            epoch,
            train_mse,
            val_mse,
        });
    }
    Ok(trace)
}

/// Writes `epoch,train_mse,val_mse`; `stage` adds a leading column when
/// several traces share one file.
pub fn write_trace(path: &Path, traces: &[(&str, &[TraceRow])]) -> Result<()> {
    let mut out = CsvOut::create(path, &["stage", "epoch", "train_mse", "val_mse"])?;
    for (stage, rows) in traces {
        for r in *rows {
            out.row([
                stage.to_string(),
                r.epoch.to_string(),
                fmt_f64(r.train_mse),
                r.val_mse.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
    }
    out.finish()
}

const KINK_MARGIN: f64 = 1e-3;

/// Draws `n_points` random samples whose ReLU inputs all stay at least 1e-3
/// from zero, then compares the analytic gradient of their eval-mode MSE
/// with central differences. Returns the largest relative error, where
/// denominators below 1e-6 are clamped to 1e-6.
pub fn gradient_check<N: Network + Clone>(m: &N, data: &N::Data, n_points: usize, epsilon: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    let mut candidates: Vec<usize> = (0..data.len()).collect();
    candidates.shuffle(&mut rng);
    for i in candidates {
        if points.len() == n_points {
            break;
        }
        if m.relu_margin(data, &[i]) >= KINK_MARGIN {
            points.push(i);
        }
    }
    if points.len() < n_points {
        return Err(Error::invalid(format!(
            "only {} of {n_points} samples are away from ReLU kinks",
            points.len()
        )));
    }
    Ok(gradient_error(m, data, &points, epsilon))
}

/// Largest relative error between analytic and central-difference gradients
/// of the eval-mode MSE over `idx`.
pub fn gradient_error<N: Network + Clone>(m: &N, data: &N::Data, idx: &[usize], epsilon: f64) -> f64 {
    let mut grad = vec![0.0; m.params().len()];
    m.batch_loss(data, idx, None, Some(&mut grad));
    let mut probe = m.clone();
    let mut worst = 0.0f64;
    for k in 0..grad.len() {
        let orig = probe.params()[k];
        probe.params_mut()[k] = orig + epsilon;
        let up = probe.batch_loss(data, idx, None, None);
        probe.params_mut()[k] = orig - epsilon;
        let down = probe.batch_loss(data, idx, None, None);
        probe.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::neural::model::{build_genotype_encoder, EncoderConfig, EncoderData, Profile};

    fn linear_data(n: usize, d: usize, seed: u64) -> EncoderData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1..=1) as f64);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) / (d as f64).sqrt()).collect();
        let y = (0..n).map(|i| (0..d).map(|j| x[(i, j)] * w[j]).sum()).collect();
        EncoderData::new(x, y).unwrap()
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            weight_decay: 3e-4,
            optimizer: Optimizer::AdamW,
            seed: 11,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let data = linear_data(40, 20, 1);
        let mut m = build_genotype_encoder(20, &EncoderConfig::genotype(Profile::Desk), 2).unwrap();
        let before = m.clone();
        let trace = train(&mut m, &data, None, &cfg(5, 0.0)).unwrap();
        assert_eq!(m, before);
        assert!(trace.iter().all(|r| r.train_mse == trace[0].train_mse));
    }

    #[test]
    fn same_seed_same_trace() {
        let data = linear_data(40, 20, 1);
        let run = || {
            let mut m = build_genotype_encoder(20, &EncoderConfig::genotype(Profile::Desk), 2).unwrap();
            train(&mut m, &data, Some(&data), &cfg(5, 1e-3)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learning_reduces_loss() {
        let data = linear_data(60, 20, 4);
        let mut m = build_genotype_encoder(20, &EncoderConfig::genotype(Profile::Desk), 2).unwrap();
        let before = evaluate_mse(&m, &data);
        train(&mut m, &data, None, &cfg(60, 1e-3)).unwrap();
        assert!(evaluate_mse(&m, &data) < 0.5 * before);
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let data = linear_data(50, 20, 6);
        let enc = EncoderConfig {
            dropout: 0.0,
            ..EncoderConfig::genotype(Profile::Desk)
        };
        let mut m = build_genotype_encoder(20, &enc, 3).unwrap();
        let c = TrainConfig {
            epochs: 30,
            batch_size: 50,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            optimizer: Optimizer::Sgd,
            seed: 1,
        };
        let trace = train(&mut m, &data, None, &c).unwrap();
        for w in trace.windows(2) {
            assert!(w[1].train_mse <= w[0].train_mse);
        }
    }

    #[test]
    fn overflowing_learning_rate_diverges() {
        let mut data = linear_data(30, 20, 2);
        for y in &mut data.y {
            *y *= 1e300;
        }
        let mut m = build_genotype_encoder(20, &EncoderConfig::genotype(Profile::Desk), 2).unwrap();
        let err = train(&mut m, &data, None, &cfg(3, 1e300)).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }

    #[test]
    fn stationary_output_bias() {
        let data = linear_data(5, 20, 8);
        let m = build_genotype_encoder(20, &EncoderConfig::genotype(Profile::Desk), 2).unwrap();
        let pred = m.predict(&data.x).unwrap();
        let fitted = EncoderData::new(data.x.clone(), pred).unwrap();
        let mut g = vec![0.0; m.n_params()];
        let idx: Vec<usize> = (0..5).collect();
        m.batch_loss(&fitted, &idx, None, Some(&mut g));
        assert!(g[m.output_bias_index().unwrap()].abs() < 1e-10);
    }
}
