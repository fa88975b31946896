use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{gather_rows, Activation, Arch, Dense, MlpSpec, OutputKind};
use crate::{Error, Result};

/// Common embedding length of the two projections.
pub const EMBEDDING_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

/// Hidden-layer layout of an encoder: `layers` hidden layers of `width`
/// nodes, the last of which has half the width and a sigmoid activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub layer_norm: bool,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn genotype(profile: Profile) -> Self {
        Self {
            width: match profile {
                Profile::Paper => 256,
                Profile::Desk => 64,
            },
            layers: 2,
            layer_norm: true,
            dropout: 0.5,
        }
    }

    pub fn environment(profile: Profile) -> Self {
        Self {
            width: match profile {
                Profile::Paper => 48,
                Profile::Desk => 12,
            },
            layers: 3,
            layer_norm: true,
            dropout: 0.5,
        }
    }

    pub fn spec(&self, input_dim: usize) -> Result<MlpSpec> {
        if self.layers == 0 {
            return Err(Error::invalid("an encoder needs at least one hidden layer"));
        }
        let mut hidden = vec![(self.width, Activation::Relu); self.layers - 1];
        hidden.push(((self.width / 2).max(1), Activation::Sigmoid));
        let spec = MlpSpec {
            input_dim,
            hidden,
            layer_norm: self.layer_norm,
            dropout: self.dropout,
            output: OutputKind::Scalar,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Samples a network is trained on.
pub trait Samples {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn targets(&self) -> &[f64];
}

/// A network with a flat parameter vector and a mean-squared-error loss.
pub trait Network {
    type Data: Samples;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Mean squared error over the samples `idx`, with its gradient added to
    /// `grad` when given. Dropout is active only when `rng` is given.
    fn batch_loss(
        &self,
        data: &Self::Data,
        idx: &[usize],
        rng: Option<&mut ChaCha8Rng>,
        grad: Option<&mut [f64]>,
    ) -> f64;

    /// Eval-mode predictions for the samples `idx`.
    fn predict_samples(&self, data: &Self::Data, idx: &[usize]) -> Vec<f64>;

    /// Smallest |ReLU input| over the samples `idx` in eval mode.
    fn relu_margin(&self, data: &Self::Data, idx: &[usize]) -> f64;

    /// Checks that `data` fits the network's input widths.
    fn check_data(&self, data: &Self::Data) -> Result<()>;
}

fn mse_grad(pred: &[f64], y: impl Iterator<Item = f64>) -> (f64, DMatrix<f64>) {
    let n = pred.len() as f64;
    let resid: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let dout = DMatrix::from_iterator(resid.len(), 1, resid.iter().map(|r| 2.0 * r / n));
    (loss, dout)
}

/// One row of features per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl EncoderData {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!("{} feature rows for {} targets", x.nrows(), y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("training data contain non-finite values"));
        }
        Ok(Self { x, y })
    }
}

impl Samples for EncoderData {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn targets(&self) -> &[f64] {
        &self.y
    }
}

/// Genotype/environment pairs indexing into per-genotype and
/// per-environment feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub xg: DMatrix<f64>,
    pub xe: DMatrix<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub y: Vec<f64>,
}

impl PairData {
    pub fn new(xg: DMatrix<f64>, xe: DMatrix<f64>, pairs: Vec<(usize, usize)>, y: Vec<f64>) -> Result<Self> {
        if pairs.len() != y.len() {
            return Err(Error::invalid(format!("{} pairs for {} targets", pairs.len(), y.len())));
        }
        if pairs.iter().any(|&(i, j)| i >= xg.nrows() || j >= xe.nrows()) {
            return Err(Error::invalid("pair index out of range"));
        }
        if xg.iter().chain(xe.iter()).chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("training data contain non-finite values"));
        }
        Ok(Self { xg, xe, pairs, y })
    }
}

impl Samples for PairData {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn targets(&self) -> &[f64] {
        &self.y
    }
}

/// Feed-forward regressor; houses f_g and f_e.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub(crate) arch: Arch,
    pub(crate) params: Vec<f64>,
}

impl EncoderModel {
    /// Fan-in-scaled uniform initialization.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        let arch = Arch::new(spec)?;
        let mut params = vec![0.0; arch.n_params];
        arch.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { arch, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        let arch = Arch::new(spec)?;
        if params.len() != arch.n_params {
            return Err(Error::invalid(format!(
                "{} parameters for a network with {}",
                params.len(),
                arch.n_params
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.arch.spec
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params
    }

    /// Widths of the hidden layers.
    pub fn widths(&self) -> Vec<usize> {
        self.arch.spec.hidden.iter().map(|h| h.0).collect()
    }

    /// Eval-mode outputs, one per row of `x` (first column for embeddings).
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.arch.spec.input_dim {
            return Err(Error::invalid(format!(
                "feature length {} does not match network input {}",
                x.ncols(),
                self.arch.spec.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.arch.predict(&self.params, x).column(0).iter().copied().collect())
    }

    /// Output-layer bias offset, if the network has an output layer.
    pub fn output_bias_index(&self) -> Option<usize> {
        self.arch.out.map(|d| d.b)
    }
}

impl Network for EncoderModel {
    type Data = EncoderData;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn batch_loss(&self, data: &EncoderData, idx: &[usize], rng: Option<&mut ChaCha8Rng>, grad: Option<&mut [f64]>) -> f64 {
        let x = gather_rows(&data.x, idx.iter().copied());
        let cache = self.arch.forward(&self.params, &x, rng);
        let out = Arch::output(&cache);
        let (loss, dout) = mse_grad(out.column(0).as_slice(), idx.iter().map(|&i| data.y[i]));
        if let Some(g) = grad {
            self.arch.backward(&self.params, &cache, &dout, g);
        }
        loss
    }

    fn predict_samples(&self, data: &EncoderData, idx: &[usize]) -> Vec<f64> {
        let x = gather_rows(&data.x, idx.iter().copied());
        self.arch.predict(&self.params, &x).column(0).iter().copied().collect()
    }

    fn relu_margin(&self, data: &EncoderData, idx: &[usize]) -> f64 {
        let x = gather_rows(&data.x, idx.iter().copied());
        self.arch.forward(&self.params, &x, None).min_relu_margin(&self.arch)
    }

    fn check_data(&self, data: &EncoderData) -> Result<()> {
        if data.x.ncols() != self.arch.spec.input_dim {
            return Err(Error::invalid(format!(
                "feature length {} does not match network input {}",
                data.x.ncols(),
                self.arch.spec.input_dim
            )));
        }
        Ok(())
    }
}

/// Two embedding towers, per-tower linear projections (with bias) to a
/// common length and dot-product fusion; houses f_ge.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub(crate) g: Arch,
    pub(crate) e: Arch,
    pub(crate) proj_g: Dense,
    pub(crate) proj_e: Dense,
    pub(crate) params: Vec<f64>,
}

impl TwoTowerModel {
    fn layout(g: MlpSpec, e: MlpSpec, dim: usize) -> Result<(Arch, Arch, Dense, Dense)> {
        if dim == 0 {
            return Err(Error::invalid("embedding length must be positive"));
        }
        let g = Arch::new(MlpSpec {
            output: OutputKind::Embedding,
            ..g
        })?;
        let e = Arch::new(MlpSpec {
            output: OutputKind::Embedding,
            ..e
        })?;
        let off = g.n_params + e.n_params;
        let wg = g.spec.output_dim();
        let we = e.spec.output_dim();
        let proj_g = Dense {
            n_in: wg,
            n_out: dim,
            w: off,
            b: off + wg * dim,
            ln: None,
        };
        let off = proj_g.b + dim;
        let proj_e = Dense {
            n_in: we,
            n_out: dim,
            w: off,
            b: off + we * dim,
            ln: None,
        };
        Ok((g, e, proj_g, proj_e))
    }

    /// Towers copied from trained encoders with their output layers dropped;
    /// projections freshly initialized.
    pub fn from_encoders(g: &EncoderModel, e: &EncoderModel, dim: usize, seed: u64) -> Result<Self> {
        let (ga, ea, proj_g, proj_e) = Self::layout(g.arch.spec.clone(), e.arch.spec.clone(), dim)?;
        let mut params = vec![0.0; proj_e.b + dim];
        params[..ga.n_params].copy_from_slice(&g.params[..ga.n_params]);
        params[ga.n_params..ga.n_params + ea.n_params].copy_from_slice(&e.params[..ea.n_params]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in [&proj_g, &proj_e] {
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for v in &mut params[d.w..d.b + d.n_out] {
                *v = rand::Rng::random_range(&mut rng, -bound..bound);
            }
        }
        Ok(Self {
            g: ga,
            e: ea,
            proj_g,
            proj_e,
            params,
        })
    }

    pub fn from_params(g: MlpSpec, e: MlpSpec, dim: usize, params: Vec<f64>) -> Result<Self> {
        let (g, e, proj_g, proj_e) = Self::layout(g, e, dim)?;
        if params.len() != proj_e.b + dim {
            return Err(Error::invalid(format!(
                "{} parameters for a two-tower network with {}",
                params.len(),
                proj_e.b + dim
            )));
        }
        Ok(Self {
            g,
            e,
            proj_g,
            proj_e,
            params,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.proj_g.n_out
    }

    pub fn genotype_spec(&self) -> &MlpSpec {
        &self.g.spec
    }

    pub fn environment_spec(&self) -> &MlpSpec {
        &self.e.spec
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn tower_params(&self) -> (&[f64], &[f64], &[f64]) {
        let (g, rest) = self.params.split_at(self.g.n_params);
        let (e, _) = rest.split_at(self.e.n_params);
        (g, e, &self.params)
    }

    /// Zeroes both projections (weights and biases), leaving a network
    /// whose output is identically zero.
    pub fn zero_projections(&mut self) {
        let start = self.proj_g.w;
        self.params[start..].fill(0.0);
    }

    /// Projected embeddings of eval-mode tower outputs.
    pub fn embeddings(&self, xg: &DMatrix<f64>, xe: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_widths(xg.ncols(), xe.ncols())?;
        let (pg, pe, all) = self.tower_params();
        let ug = self.g.predict(pg, xg);
        let ue = self.e.predict(pe, xe);
        Ok((self.proj_g.apply(all, &ug), self.proj_e.apply(all, &ue)))
    }

    /// Eval-mode f_ge for row-aligned genotype and environment features.
    pub fn predict(&self, xg: &DMatrix<f64>, xe: &DMatrix<f64>) -> Result<Vec<f64>> {
        if xg.nrows() != xe.nrows() {
            return Err(Error::invalid(format!(
                "{} genotype rows but {} environment rows",
                xg.nrows(),
                xe.nrows()
            )));
        }
        if xg.nrows() == 0 {
            self.check_widths(xg.ncols(), xe.ncols())?;
            return Ok(Vec::new());
        }
        let (eg, ee) = self.embeddings(xg, xe)?;
        Ok((0..eg.nrows()).map(|r| eg.row(r).dot(&ee.row(r))).collect())
    }

    fn check_widths(&self, dg: usize, de: usize) -> Result<()> {
        if dg != self.g.spec.input_dim || de != self.e.spec.input_dim {
            return Err(Error::invalid(format!(
                "feature lengths ({dg}, {de}) do not match network inputs ({}, {})",
                self.g.spec.input_dim, self.e.spec.input_dim
            )));
        }
        Ok(())
    }
}

impl Network for TwoTowerModel {
    type Data = PairData;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn batch_loss(&self, data: &PairData, idx: &[usize], mut rng: Option<&mut ChaCha8Rng>, grad: Option<&mut [f64]>) -> f64 {
        let xg = gather_rows(&data.xg, idx.iter().map(|&k| data.pairs[k].0));
        let xe = gather_rows(&data.xe, idx.iter().map(|&k| data.pairs[k].1));
        let (pg, pe, all) = self.tower_params();
        let cg = self.g.forward(pg, &xg, rng.as_deref_mut());
        let ce = self.e.forward(pe, &xe, rng);
        let ug = Arch::output(&cg);
        let ue = Arch::output(&ce);
        let eg = self.proj_g.apply(all, ug);
        let ee = self.proj_e.apply(all, ue);
        let pred: Vec<f64> = (0..eg.nrows()).map(|r| eg.row(r).dot(&ee.row(r))).collect();
        let (loss, dout) = mse_grad(&pred, idx.iter().map(|&k| data.y[k]));
        if let Some(grad) = grad {
            let mut deg = ee.clone();
            let mut dee = eg;
            for r in 0..deg.nrows() {
                deg.row_mut(r).scale_mut(dout[r]);
                dee.row_mut(r).scale_mut(dout[r]);
            }
            let dug = self.proj_g.backward(all, ug, &deg, grad, true).unwrap();
            let due = self.proj_e.backward(all, ue, &dee, grad, true).unwrap();
            let (gg, rest) = grad.split_at_mut(self.g.n_params);
            self.g.backward(pg, &cg, &dug, gg);
            self.e.backward(pe, &ce, &due, &mut rest[..self.e.n_params]);
        }
        loss
    }

    fn predict_samples(&self, data: &PairData, idx: &[usize]) -> Vec<f64> {
        let xg = gather_rows(&data.xg, idx.iter().map(|&k| data.pairs[k].0));
        let xe = gather_rows(&data.xe, idx.iter().map(|&k| data.pairs[k].1));
        self.predict(&xg, &xe).unwrap_or_default()
    }

    fn relu_margin(&self, data: &PairData, idx: &[usize]) -> f64 {
        let xg = gather_rows(&data.xg, idx.iter().map(|&k| data.pairs[k].0));
        let xe = gather_rows(&data.xe, idx.iter().map(|&k| data.pairs[k].1));
        let (pg, pe, _) = self.tower_params();
        let mg = self.g.forward(pg, &xg, None).min_relu_margin(&self.g);
        let me = self.e.forward(pe, &xe, None).min_relu_margin(&self.e);
        mg.min(me)
    }

    fn check_data(&self, data: &PairData) -> Result<()> {
        self.check_widths(data.xg.ncols(), data.xe.ncols())
    }
}

/// Genotype encoder f_g for `d_g` markers.
pub fn build_genotype_encoder(d_g: usize, cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::new(cfg.spec(d_g)?, seed)
}

/// Environment encoder f_e for `d_e` environment features.
pub fn build_env_encoder(d_e: usize, cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::new(cfg.spec(d_e)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paper_and_desk_widths() {
        let g = build_genotype_encoder(40, &EncoderConfig::genotype(Profile::Paper), 1).unwrap();
        assert_eq!(g.widths(), vec![256, 128]);
        assert_eq!(g.spec().hidden[1].1, Activation::Sigmoid);
        assert_eq!(g.spec().hidden[0].1, Activation::Relu);
        let e = build_env_encoder(33, &EncoderConfig::environment(Profile::Paper), 1).unwrap();
        assert_eq!(e.widths(), vec![48, 48, 24]);
        assert_eq!(e.spec().hidden[2].1, Activation::Sigmoid);
        let g = build_genotype_encoder(40, &EncoderConfig::genotype(Profile::Desk), 1).unwrap();
        assert_eq!(g.widths(), vec![64, 32]);
        let e = build_env_encoder(33, &EncoderConfig::environment(Profile::Desk), 1).unwrap();
        assert_eq!(e.widths(), vec![12, 12, 6]);
        assert!(g.spec().layer_norm && g.spec().dropout == 0.5);
    }

    #[test]
    fn batch_shape_and_width_mismatch() {
        let e = build_env_encoder(33, &EncoderConfig::environment(Profile::Desk), 2).unwrap();
        let x = DMatrix::from_fn(32, 33, |i, j| ((i * 7 + j) % 5) as f64 - 2.0);
        assert_eq!(e.predict(&x).unwrap().len(), 32);
        assert!(e.predict(&DMatrix::zeros(3, 32)).is_err());
    }

    #[test]
    fn zero_feature_column_is_inert() {
        let e = build_env_encoder(4, &EncoderConfig::environment(Profile::Desk), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        x.column_mut(2).fill(0.0);
        let base = e.predict(&x).unwrap();
        let mut e2 = e.clone();
        // weights leaving the zero column cannot matter
        let w = e2.arch.hidden[0];
        for j in 0..w.n_out {
            e2.params[w.w + j * w.n_in + 2] = 123.0;
        }
        assert_eq!(base, e2.predict(&x).unwrap());
    }

    fn tower(seed: u64) -> TwoTowerModel {
        let g = build_genotype_encoder(10, &EncoderConfig::genotype(Profile::Desk), seed).unwrap();
        let e = build_env_encoder(5, &EncoderConfig::environment(Profile::Desk), seed + 1).unwrap();
        TwoTowerModel::from_encoders(&g, &e, EMBEDDING_DIM, seed + 2).unwrap()
    }

    #[test]
    fn towers_copy_encoder_hidden_layers() {
        let g = build_genotype_encoder(10, &EncoderConfig::genotype(Profile::Desk), 4).unwrap();
        let e = build_env_encoder(5, &EncoderConfig::environment(Profile::Desk), 5).unwrap();
        let t = TwoTowerModel::from_encoders(&g, &e, EMBEDDING_DIM, 6).unwrap();
        assert_eq!(&t.params[..t.g.n_params], &g.params[..t.g.n_params]);
        assert_eq!(t.g.n_params, g.n_params() - 33);
        assert_eq!(t.embedding_dim(), 8);
        let (eg, ee) = t.embeddings(&DMatrix::zeros(2, 10), &DMatrix::zeros(2, 5)).unwrap();
        assert_eq!((eg.ncols(), ee.ncols()), (8, 8));
    }

    #[test]
    fn embedding_length_independent_of_widths() {
        let wide = EncoderConfig {
            width: 30,
            ..EncoderConfig::genotype(Profile::Desk)
        };
        let g = build_genotype_encoder(10, &wide, 1).unwrap();
        let e = build_env_encoder(5, &EncoderConfig::environment(Profile::Paper), 1).unwrap();
        let t = TwoTowerModel::from_encoders(&g, &e, EMBEDDING_DIM, 1).unwrap();
        let (eg, ee) = t.embeddings(&DMatrix::zeros(1, 10), &DMatrix::zeros(1, 5)).unwrap();
        assert_eq!((eg.ncols(), ee.ncols()), (8, 8));
    }

    #[test]
    fn batch_invariance_and_permutation() {
        let t = tower(9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xg = DMatrix::from_fn(7, 10, |_, _| rng.random_range(-1..=1) as f64);
        let xe = DMatrix::from_fn(7, 5, |_, _| rng.random_range(-2.0..2.0));
        let all = t.predict(&xg, &xe).unwrap();
        for r in 0..7 {
            let one = t
                .predict(&xg.rows(r, 1).into_owned(), &xe.rows(r, 1).into_owned())
                .unwrap();
            assert!((one[0] - all[r]).abs() <= 1e-12);
        }
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pg = gather_rows(&xg, perm.iter().copied());
        let pe = gather_rows(&xe, perm.iter().copied());
        let p = t.predict(&pg, &pe).unwrap();
        for (k, &r) in perm.iter().enumerate() {
            assert!((p[k] - all[r]).abs() <= 1e-12);
        }
    }

    #[test]
    fn dot_fusion_is_symmetric() {
        let t = tower(3);
        let xg = DMatrix::from_fn(4, 10, |i, j| ((i + 2 * j) % 3) as f64 - 1.0);
        let xe = DMatrix::from_fn(4, 5, |i, j| (i as f64 - j as f64) * 0.3);
        let (eg, ee) = t.embeddings(&xg, &xe).unwrap();
        let out = t.predict(&xg, &xe).unwrap();
        for r in 0..4 {
            assert_eq!(out[r], eg.row(r).dot(&ee.row(r)));
            assert_eq!(ee.row(r).dot(&eg.row(r)), eg.row(r).dot(&ee.row(r)));
        }
    }

    #[test]
    fn zeroed_projections_give_zero() {
        let mut t = tower(1);
        t.zero_projections();
        let out = t.predict(&DMatrix::from_element(3, 10, 1.0), &DMatrix::from_element(3, 5, -0.5)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }
}
