use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Linear layer to a single value.
    Scalar,
    /// No output layer; the last hidden activations are the output.
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub layer_norm: bool,
    pub dropout: f64,
    pub output: OutputKind,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("network input dimension must be positive"));
        }
        if self.hidden.iter().any(|(w, _)| *w == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        if self.output == OutputKind::Embedding && self.hidden.is_empty() {
            return Err(Error::invalid("an embedding network needs a hidden layer"));
        }
        Ok(())
    }

    /// Width of the network output.
    pub fn output_dim(&self) -> usize {
        match self.output {
            OutputKind::Scalar => 1,
            OutputKind::Embedding => self.hidden.last().map_or(0, |h| h.0),
        }
    }
}

/// Offsets of one affine layer (weights stored `in × out`, column-major)
/// and of its optional layer-norm gain and offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: usize,
    pub b: usize,
    pub ln: Option<(usize, usize)>,
}

impl Dense {
    pub fn weights<'a>(&self, p: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(&p[self.w..self.w + self.n_in * self.n_out], self.n_in, self.n_out)
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.n_out]
    }

    /// `x W + 1 b'`
    pub fn apply(&self, p: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weights(p);
        let b = self.bias(p);
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(b[j]);
        }
        z
    }

    /// Accumulates weight and bias gradients and returns the gradient with
    /// respect to `x`.
    pub fn backward(&self, p: &[f64], x: &DMatrix<f64>, dz: &DMatrix<f64>, grad: &mut [f64], need_dx: bool) -> Option<DMatrix<f64>> {
        let dw = x.transpose() * dz;
        for (g, d) in grad[self.w..self.w + self.n_in * self.n_out].iter_mut().zip(dw.as_slice()) {
            *g += d;
        }
        for (j, col) in dz.column_iter().enumerate() {
            grad[self.b + j] += col.sum();
        }
        need_dx.then(|| dz * self.weights(p).transpose())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Arch {
    pub spec: MlpSpec,
    pub hidden: Vec<Dense>,
    pub out: Option<Dense>,
    pub n_params: usize,
}

/// Intermediate values of one hidden layer kept for the backward pass.
pub(crate) struct HiddenCache {
    input: DMatrix<f64>,
    /// Normalized pre-activations and per-row inverse standard deviations.
    xhat: Option<(DMatrix<f64>, Vec<f64>)>,
    /// Activation input (after the optional layer norm).
    pre: DMatrix<f64>,
    /// Activation output before dropout.
    act: DMatrix<f64>,
    /// Inverted-dropout multipliers.
    mask: Option<DMatrix<f64>>,
}

pub(crate) struct ForwardCache {
    layers: Vec<HiddenCache>,
    last: DMatrix<f64>,
}

impl ForwardCache {
    /// Smallest |pre-activation| over ReLU layers, to keep finite-difference
    /// checks away from kinks.
    pub fn min_relu_margin(&self, arch: &Arch) -> f64 {
        let mut m = f64::INFINITY;
        for (c, (_, act)) in self.layers.iter().zip(&arch.spec.hidden) {
            if *act == Activation::Relu {
                m = c.pre.iter().fold(m, |m, v| m.min(v.abs()));
            }
        }
        m
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Arch {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut off = 0;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut n_in = spec.input_dim;
        for &(w, _) in &spec.hidden {
            let d = Dense {
                n_in,
                n_out: w,
                w: off,
                b: off + n_in * w,
                ln: spec.layer_norm.then_some((off + n_in * w + w, off + n_in * w + 2 * w)),
            };
            off += n_in * w + w + if spec.layer_norm { 2 * w } else { 0 };
            hidden.push(d);
            n_in = w;
        }
        let out = (spec.output == OutputKind::Scalar).then(|| {
            let d = Dense {
                n_in,
                n_out: 1,
                w: off,
                b: off + n_in,
                ln: None,
            };
            off += n_in + 1;
            d
        });
        Ok(Self {
            spec,
            hidden,
            out,
            n_params: off,
        })
    }

    /// Uniform(±1/√fan_in) weights and biases; layer norms start at the
    /// identity.
    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        for d in self.hidden.iter().chain(&self.out) {
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for v in &mut p[d.w..d.b + d.n_out] {
                *v = rng.random_range(-bound..bound);
            }
            if let Some((g, b)) = d.ln {
                p[g..g + d.n_out].fill(1.0);
                p[b..b + d.n_out].fill(0.0);
            }
        }
    }

    /// `x` is `batch × input_dim`. Dropout is applied only when `rng` is
    /// given (training mode).
    pub fn forward(&self, p: &[f64], x: &DMatrix<f64>, mut rng: Option<&mut ChaCha8Rng>) -> ForwardCache {
        let mut layers = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for (d, &(_, act)) in self.hidden.iter().zip(&self.spec.hidden) {
            let z = d.apply(p, &h);
            let (pre, xhat) = match d.ln {
                Some((gi, bi)) => {
                    let n = z.ncols() as f64;
                    let mut xhat = z.clone();
                    let mut inv = Vec::with_capacity(z.nrows());
                    for mut row in xhat.row_iter_mut() {
                        let m = row.sum() / n;
                        row.add_scalar_mut(-m);
                        let var = row.norm_squared() / n;
                        let s = 1.0 / (var + LN_EPS).sqrt();
                        row *= s;
                        inv.push(s);
                    }
                    let mut pre = xhat.clone();
                    for (j, mut col) in pre.column_iter_mut().enumerate() {
                        col *= p[gi + j];
                        col.add_scalar_mut(p[bi + j]);
                    }
                    (pre, Some((xhat, inv)))
                }
                None => (z, None),
            };
            let a = match act {
                Activation::Relu => pre.map(|v| v.max(0.0)),
                Activation::Sigmoid => pre.map(sigmoid),
            };
            let keep = 1.0 - self.spec.dropout;
            let mask = match rng.as_deref_mut() {
                Some(r) if self.spec.dropout > 0.0 => Some(DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| {
                    if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })),
                _ => None,
            };
            let next = match &mask {
                Some(m) => a.component_mul(m),
                None => a.clone(),
            };
            layers.push(HiddenCache {
                input: h,
                xhat,
                pre,
                act: a,
                mask,
            });
            h = next;
        }
        let last = match &self.out {
            Some(d) => {
                let y = d.apply(p, &h);
                layers.push(HiddenCache {
                    input: h,
                    xhat: None,
                    pre: DMatrix::zeros(0, 0),
                    act: DMatrix::zeros(0, 0),
                    mask: None,
                });
                y
            }
            None => h,
        };
        ForwardCache { layers, last }
    }

    pub fn output(cache: &ForwardCache) -> &DMatrix<f64> {
        &cache.last
    }

    /// Back-propagates `dout` (same shape as the output) and accumulates
    /// parameter gradients into `grad`.
    pub fn backward(&self, p: &[f64], cache: &ForwardCache, dout: &DMatrix<f64>, grad: &mut [f64]) {
        let mut dh = dout.clone();
        let n_hidden = self.hidden.len();
        if let Some(d) = &self.out {
            let c = &cache.layers[n_hidden];
            dh = d.backward(p, &c.input, &dh, grad, n_hidden > 0).unwrap_or(dh);
        }
        for l in (0..n_hidden).rev() {
            let d = &self.hidden[l];
            let c = &cache.layers[l];
            if let Some(m) = &c.mask {
                dh.component_mul_assign(m);
            }
            let dpre = match self.spec.hidden[l].1 {
                Activation::Relu => dh.zip_map(&c.pre, |g, z| if z > 0.0 { g } else { 0.0 }),
                Activation::Sigmoid => dh.zip_map(&c.act, |g, s| g * s * (1.0 - s)),
            };
            let dz = match (d.ln, &c.xhat) {
                (Some((gi, bi)), Some((xhat, inv))) => {
                    let n = dpre.ncols() as f64;
                    let mut dxhat = dpre.clone();
                    for j in 0..dpre.ncols() {
                        grad[gi + j] += dpre.column(j).dot(&xhat.column(j));
                        grad[bi + j] += dpre.column(j).sum();
                        dxhat.column_mut(j).scale_mut(p[gi + j]);
                    }
                    let mut dz = dxhat.clone();
                    for r in 0..dz.nrows() {
                        let row = dxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_d = row.sum() / n;
                        let mean_dx = row.dot(&xr) / n;
                        for j in 0..dz.ncols() {
                            dz[(r, j)] = inv[r] * (row[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    dz
                }
                _ => dpre,
            };
            match d.backward(p, &c.input, &dz, grad, l > 0) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, p: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(p, x, None).last
    }
}

/// Rows of `x` selected by `idx`.
pub(crate) fn gather_rows(x: &DMatrix<f64>, idx: impl ExactSizeIterator<Item = usize>) -> DMatrix<f64> {
    let n = idx.len();
    let mut out = DMatrix::zeros(n, x.ncols());
    for (r, i) in idx.enumerate() {
        out.row_mut(r).copy_from(&x.row(i));
    }
    out
}
