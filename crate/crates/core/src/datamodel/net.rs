//! Context network `g_φ(c) = [θ(c); θ0(c)]` with hand-written backprop.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::context::{Context, ContextEncoding};
use super::linear::{IndicatorVector, LinearDatamodel};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const FORMAT_TAG: &str = "deepc-context-net";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Unknown {
                what: "activation",
                name: other.into(),
            }),
        }
    }
}

/// Affine layer `z = W a + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// MLP mapping a standardized context to `M + 1` outputs.
///
/// The first `M` outputs are the influence coefficients, the last is the bias.
/// Raw outputs are mapped to cost units by `output_scale` (and `output_offset`
/// on the bias); both default to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextNet {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub encoding: ContextEncoding,
    pub input_mean: DVector<f64>,
    pub input_std: DVector<f64>,
    pub output_scale: f64,
    pub output_offset: f64,
}

/// One training example `(c, s, J)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSample {
    pub context: DVector<f64>,
    pub indicator: IndicatorVector,
    pub cost: f64,
}

/// Gradient of the loss with respect to every `(W_l, b_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl ContextNet {
    /// Network with layer widths `sizes = [d_in, hidden.., M + 1]` and
    /// Glorot-uniform weights; biases start at zero.
    pub fn new(sizes: &[usize], activation: Activation, encoding: ContextEncoding, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param("layer sizes", "need at least input and output widths, all positive"));
        }
        if *sizes.last().unwrap() < 2 {
            return Err(Error::param("layer sizes", "output layer must have M + 1 ≥ 2 units"));
        }
        let mut rng = rng_from_seed(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit)),
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation,
            encoding,
            input_mean: DVector::zeros(sizes[0]),
            input_std: DVector::from_element(sizes[0], 1.0),
            output_scale: 1.0,
            output_offset: 0.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    /// Number of Hankel columns `M` the network scores.
    pub fn columns(&self) -> usize {
        self.layers.last().unwrap().w.nrows() - 1
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.w.nrows()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.w.norm_squared() + l.b.norm_squared()).sum()
    }

    /// Sets standardization statistics from raw contexts (one per column).
    pub fn fit_input_normalization(&mut self, contexts: &DMatrix<f64>) {
        let n = contexts.ncols().max(1) as f64;
        self.input_mean = contexts.column_mean();
        self.input_std = DVector::from_fn(contexts.nrows(), |i, _| {
            let mu = self.input_mean[i];
            let var = contexts.row(i).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        });
    }

    fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.input_mean[i]) / self.input_std[i])
    }

    /// Forward pass over a batch of raw contexts (one per column), returning
    /// pre-activations and activations for every layer. The last entry of
    /// `acts` is the raw output.
    fn forward_cached(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut acts = vec![self.standardize(x)];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            let a = if l == last {
                z.clone()
            } else {
                z.map(|v| self.activation.apply(v))
            };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Outputs in cost units for a batch of contexts, shape `(M + 1) × B`.
    pub fn forward_batch(&self, contexts: &DMatrix<f64>) -> DMatrix<f64> {
        let (_, mut acts) = self.forward_cached(contexts);
        let mut out = acts.pop().unwrap();
        out *= self.output_scale;
        let m = self.columns();
        for mut col in out.column_iter_mut() {
            col[m] += self.output_offset;
        }
        out
    }

    /// The linear datamodel this network predicts at one context.
    pub fn datamodel_at(&self, context: &DVector<f64>) -> Result<LinearDatamodel> {
        if context.len() != self.input_dim() {
            return Err(Error::dims(format!(
                "context has {} entries, network expects {}",
                context.len(),
                self.input_dim()
            )));
        }
        let x = DMatrix::from_column_slice(context.len(), 1, context.as_slice());
        let out = self.forward_batch(&x);
        let m = self.columns();
        Ok(LinearDatamodel {
            theta: out.column(0).rows(0, m).into_owned(),
            theta0: out[(m, 0)],
        })
    }
}

/// `(θ(c), θ0(c))` for a single context.
pub fn net_forward(net: &ContextNet, c: &Context) -> Result<(DVector<f64>, f64)> {
    let dm = net.datamodel_at(&c.vector)?;
    Ok((dm.theta, dm.theta0))
}

/// Mean squared datamodel residual plus `λ_φ‖φ‖²`, and its exact gradient.
///
/// For sample `i` the residual `eᵢ = θ(cᵢ)ᵀsᵢ + θ0(cᵢ) - Jᵢ` enters the output
/// layer through the slot weights `[sᵢ; 1]`.
pub fn net_loss_grad(net: &ContextNet, batch: &[NetSample], lambda_phi: f64) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let m = net.columns();
    let d = net.input_dim();
    let bsz = batch.len();
    let mut x = DMatrix::zeros(d, bsz);
    let mut slots = DMatrix::zeros(m + 1, bsz);
    for (i, smp) in batch.iter().enumerate() {
        if smp.context.len() != d || smp.indicator.len() != m {
            return Err(Error::dims(format!(
                "sample {i}: context {} / indicator {} vs network ({d}, {m})",
                smp.context.len(),
                smp.indicator.len()
            )));
        }
        x.column_mut(i).copy_from(&smp.context);
        for (j, &b) in smp.indicator.bits().iter().enumerate() {
            if b {
                slots[(j, i)] = 1.0;
            }
        }
        slots[(m, i)] = 1.0;
    }

    let (pre, acts) = net.forward_cached(&x);
    let raw = acts.last().unwrap();
    let mut residuals = Vec::with_capacity(bsz);
    for (i, smp) in batch.iter().enumerate() {
        let pred = net.output_scale * raw.column(i).dot(&slots.column(i)) + net.output_offset;
        let e = pred - smp.cost;
        if !e.is_finite() {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        residuals.push(e);
    }
    let data_loss = residuals.iter().map(|e| e * e).sum::<f64>() / bsz as f64;
    let loss = data_loss + lambda_phi * net.squared_norm();

    // dL/d(raw output) column i = (2/B) eᵢ · scale · [sᵢ; 1]
    let mut delta = slots;
    for (i, e) in residuals.iter().enumerate() {
        delta.column_mut(i).scale_mut(2.0 * e * net.output_scale / bsz as f64);
    }
    let mut grads: Vec<Layer> = Vec::with_capacity(net.layers.len());
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let mut gw = &delta * acts[l].transpose();
        let mut gb = delta.column_sum();
        if lambda_phi != 0.0 {
            gw += &layer.w * (2.0 * lambda_phi);
            gb += &layer.b * (2.0 * lambda_phi);
        }
        grads.push(Layer { w: gw, b: gb });
        if l > 0 {
            let back = layer.w.tr_mul(&delta);
            let act = net.activation;
            delta = back.zip_map(&pre[l - 1], |g, z| g * act.derivative(z));
        }
    }
    grads.reverse();
    Ok((loss, Gradients { layers: grads }))
}

/// A network plus the training metadata persisted with it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: ContextNet,
    /// Bernoulli inclusion probability of the training subsets.
    pub alpha: f64,
    pub validation_loss: f64,
    pub init_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    version: u32,
    columns: usize,
    alpha: f64,
    validation_loss: Option<f64>,
    init_seed: u64,
    activation: Activation,
    encoding: ContextEncoding,
    layer_sizes: Vec<usize>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    output_scale: f64,
    output_offset: f64,
    layers: Vec<LayerRecord>,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        let net = &self.net;
        let rec = ModelRecord {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            columns: net.columns(),
            alpha: self.alpha,
            validation_loss: self.validation_loss.is_finite().then_some(self.validation_loss),
            init_seed: self.init_seed,
            activation: net.activation,
            encoding: net.encoding,
            layer_sizes: net.layer_sizes(),
            input_mean: net.input_mean.as_slice().to_vec(),
            input_std: net.input_std.as_slice().to_vec(),
            output_scale: net.output_scale,
            output_offset: net.output_offset,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.transpose().as_slice().to_vec(),
                    bias: l.b.as_slice().to_vec(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string(&rec)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ModelRecord = serde_json::from_str(text)?;
        if rec.format != FORMAT_TAG || rec.version != FORMAT_VERSION {
            return Err(Error::format(
                "model file",
                format!("unsupported format {} v{}", rec.format, rec.version),
            ));
        }
        let mut layers = Vec::with_capacity(rec.layers.len());
        for (i, l) in rec.layers.into_iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::format("model file", format!("layer {i} has inconsistent sizes")));
            }
            layers.push(Layer {
                w: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                b: DVector::from_vec(l.bias),
            });
        }
        let net = ContextNet {
            layers,
            activation: rec.activation,
            encoding: rec.encoding,
            input_mean: DVector::from_vec(rec.input_mean),
            input_std: DVector::from_vec(rec.input_std),
            output_scale: rec.output_scale,
            output_offset: rec.output_offset,
        };
        let chained = net.layers.windows(2).all(|w| w[0].w.nrows() == w[1].w.ncols());
        if net.layers.is_empty()
            || !chained
            || net.layer_sizes() != rec.layer_sizes
            || net.columns() != rec.columns
            || net.input_mean.len() != net.input_dim()
            || net.input_std.len() != net.input_dim()
        {
            return Err(Error::format("model file", "layer sizes disagree with the header"));
        }
        Ok(Self {
            net,
            alpha: rec.alpha,
            validation_loss: rec.validation_loss.unwrap_or(f64::NAN),
            init_seed: rec.init_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_net(sizes: &[usize], act: Activation, seed: u64) -> ContextNet {
        let mut net = ContextNet::new(sizes, act, ContextEncoding::Direct, seed).unwrap();
        let mut rng = rng_from_seed(seed + 1000);
        for l in &mut net.layers {
            l.b = DVector::from_fn(l.b.len(), |_, _| rng.random_range(-0.5..0.5));
        }
        net
    }

    fn random_batch(net: &ContextNet, n: usize, seed: u64) -> Vec<NetSample> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| NetSample {
                context: DVector::from_fn(net.input_dim(), |_, _| rng.random_range(-1.0..1.0)),
                indicator: IndicatorVector::new((0..net.columns()).map(|_| rng.random_bool(0.5)).collect()),
                cost: rng.random_range(0.0..3.0),
            })
            .collect()
    }

    /// Forward pass written directly from the layer equations, one sample at
    /// a time.
    fn reference_forward(net: &ContextNet, c: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, v)| (v - net.input_mean[i]) / net.input_std[i])
            .collect();
        for (l, layer) in net.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.w.nrows()];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut z = layer.b[o];
                for (i, ai) in a.iter().enumerate() {
                    z += layer.w[(o, i)] * ai;
                }
                *slot = if l + 1 == net.layers.len() {
                    z
                } else {
                    match net.activation {
                        Activation::Relu => {
                            if z > 0.0 {
                                z
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => z.tanh(),
                    }
                };
            }
            a = next;
        }
        a
    }

    #[test]
    fn zero_weights_emit_final_bias() {
        let mut net = ContextNet::new(&[3, 5, 4], Activation::Relu, ContextEncoding::Direct, 0).unwrap();
        for l in &mut net.layers {
            l.w.fill(0.0);
        }
        net.layers[1].b = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let c = Context {
            encoding: ContextEncoding::Direct,
            vector: DVector::from_vec(vec![9.0, -4.0, 2.0]),
        };
        let (theta, theta0) = net_forward(&net, &c).unwrap();
        assert_eq!(theta.as_slice(), &[1.0, -2.0, 3.0]);
        assert_eq!(theta0, 0.5);
    }

    #[test]
    fn relu_dead_zone_ignores_input() {
        let mut net = random_net(&[3, 4, 3], Activation::Relu, 3);
        net.layers[0].w.fill(0.0);
        net.layers[0].w.column_mut(0).fill(1.0);
        net.layers[0].b.fill(-10.0);
        let a = net.datamodel_at(&DVector::from_vec(vec![0.5, 1.0, -1.0])).unwrap();
        let b = net.datamodel_at(&DVector::from_vec(vec![-3.0, 7.0, 2.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_reference_forward() {
        let mut net = random_net(&[5, 7, 6, 4], Activation::Tanh, 11);
        net.input_mean = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 1.0]);
        net.input_std = DVector::from_vec(vec![1.0, 2.0, 0.5, 1.5, 3.0]);
        let mut rng = rng_from_seed(5);
        for _ in 0..10 {
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let want = reference_forward(&net, &c);
            let dm = net.datamodel_at(&DVector::from_vec(c)).unwrap();
            for (t, w) in dm.theta.iter().zip(&want) {
                assert!((t - w).abs() < 1e-12);
            }
            assert!((dm.theta0 - want[3]).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_fit_at_origin() {
        let mut net = ContextNet::new(&[2, 3, 3], Activation::Relu, ContextEncoding::Direct, 1).unwrap();
        for l in &mut net.layers {
            l.w.fill(0.0);
        }
        let batch = vec![NetSample {
            context: DVector::from_vec(vec![0.3, -0.8]),
            indicator: IndicatorVector::zeros(2),
            cost: 0.0,
        }];
        let (loss, grads) = net_loss_grad(&net, &batch, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.layers.iter().all(|l| l.w.amax() == 0.0 && l.b.amax() == 0.0));
    }

    #[test]
    fn duplicated_sample_keeps_mean_loss() {
        let net = random_net(&[3, 4, 3], Activation::Tanh, 2);
        let batch = random_batch(&net, 1, 8);
        let doubled = vec![batch[0].clone(), batch[0].clone()];
        let (a, _) = net_loss_grad(&net, &batch, 0.0).unwrap();
        let (b, _) = net_loss_grad(&net, &doubled, 0.0).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    fn finite_difference_check(act: Activation, lambda_phi: f64, seed: u64) {
        let mut net = random_net(&[4, 4, 3], act, seed);
        net.output_scale = 1.7;
        net.output_offset = 0.3;
        let batch = random_batch(&net, 3, seed + 7);
        let (_, grads) = net_loss_grad(&net, &batch, lambda_phi).unwrap();
        let h = 1e-6;
        let loss_at = |n: &ContextNet| net_loss_grad(n, &batch, lambda_phi).unwrap().0;
        for l in 0..net.layers.len() {
            for idx in 0..net.layers[l].w.len() + net.layers[l].b.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let nw = net.layers[l].w.len();
                if idx < nw {
                    plus.layers[l].w[idx] += h;
                    minus.layers[l].w[idx] -= h;
                } else {
                    plus.layers[l].b[idx - nw] += h;
                    minus.layers[l].b[idx - nw] -= h;
                }
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let analytic = if idx < nw {
                    grads.layers[l].w[idx]
                } else {
                    grads.layers[l].b[idx - nw]
                };
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-5, "{act:?} layer {l} param {idx}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        finite_difference_check(Activation::Tanh, 0.0, 1);
        finite_difference_check(Activation::Tanh, 0.05, 2);
        finite_difference_check(Activation::Relu, 0.01, 3);
    }

    #[test]
    fn model_file_round_trip() {
        let mut net = random_net(&[3, 5, 4], Activation::Relu, 4);
        net.input_std = DVector::from_vec(vec![0.1, 1.0 / 3.0, 7.0]);
        net.output_scale = 2.5;
        let model = TrainedModel {
            net,
            alpha: 0.05,
            validation_loss: 0.125,
            init_seed: 99,
        };
        let text = model.to_json().unwrap();
        assert_eq!(TrainedModel::from_json(&text).unwrap(), model);
        assert!(TrainedModel::from_json(&text.replace("deepc-context-net", "other")).is_err());
    }
}
