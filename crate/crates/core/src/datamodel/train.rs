//! Mini-batch Adam training of the context network.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use super::net::{net_loss_grad, ContextNet, Layer, NetSample};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Decoupled weight decay coefficient.
    pub lambda_phi: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Refit input standardization and output scaling from the training split.
    pub fit_normalization: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            lambda_phi: 0.0,
            seed: 0,
            validation_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            fit_normalization: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean data loss over the mini-batches of each epoch.
    pub train_loss: Vec<f64>,
    /// Data loss on the held-out split after each epoch (empty without one).
    pub val_loss: Vec<f64>,
    pub validation_indices: Vec<usize>,
}

impl TrainReport {
    pub fn final_validation_loss(&self) -> f64 {
        self.val_loss.last().copied().unwrap_or(f64::NAN)
    }
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    step: i32,
}

impl Adam {
    fn new(net: &ContextNet) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| Layer {
                    w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                    b: DVector::zeros(l.b.len()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, net: &mut ContextNet, grads: &[Layer], o: &TrainOptions) {
        self.step += 1;
        let c1 = 1.0 - o.beta1.powi(self.step);
        let c2 = 1.0 - o.beta2.powi(self.step);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[l], &mut self.v[l]);
            adam_step(
                layer.w.as_mut_slice(),
                grads[l].w.as_slice(),
                m.w.as_mut_slice(),
                v.w.as_mut_slice(),
                c1,
                c2,
                o,
            );
            adam_step(
                layer.b.as_mut_slice(),
                grads[l].b.as_slice(),
                m.b.as_mut_slice(),
                v.b.as_mut_slice(),
                c1,
                c2,
                o,
            );
        }
    }
}

fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], c1: f64, c2: f64, o: &TrainOptions) {
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
        let step = (m[i] / c1) / ((v[i] / c2).sqrt() + o.eps);
        param[i] -= o.lr * (step + o.lambda_phi * param[i]);
    }
}

/// Mean squared datamodel residual of `net` on `data`.
pub fn data_loss(net: &ContextNet, data: &[NetSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in data.chunks(256) {
        let (loss, _) = net_loss_grad(net, chunk, 0.0)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains `net` on `data` with Adam and decoupled weight decay.
///
/// A seeded `validation_fraction` of the samples is held out. Shuffling is
/// seeded, so two runs with the same options produce identical networks.
pub fn train_net(mut net: ContextNet, data: &[NetSample], opts: &TrainOptions) -> Result<(ContextNet, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if opts.batch_size == 0 {
        return Err(Error::param("batch_size", "must be positive"));
    }
    let mut rng = rng_from_seed(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 {
        ((data.len() as f64 * opts.validation_fraction).round() as usize).min(data.len() - 1)
    } else {
        0
    };
    let mut validation_indices = order[..n_val].to_vec();
    validation_indices.sort_unstable();
    let train_idx: Vec<usize> = order[n_val..].to_vec();
    let val: Vec<NetSample> = validation_indices.iter().map(|&i| data[i].clone()).collect();

    if opts.fit_normalization {
        let d = net.input_dim();
        let x = DMatrix::from_fn(d, train_idx.len(), |r, c| data[train_idx[c]].context[r]);
        if x.nrows() != d {
            return Err(Error::dims("context size differs from the network input"));
        }
        net.fit_input_normalization(&x);
        let costs = DVector::from_iterator(train_idx.len(), train_idx.iter().map(|&i| data[i].cost));
        let mean = costs.mean();
        let std = (costs.map(|c| (c - mean).powi(2)).sum() / costs.len() as f64).sqrt();
        net.output_offset = mean;
        net.output_scale = if std > 1e-12 { std } else { 1.0 };
    }

    let mut adam = Adam::new(&net);
    let mut shuffled = train_idx;
    let mut train_loss = Vec::with_capacity(opts.epochs);
    let mut val_loss = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        shuffled.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in shuffled.chunks(opts.batch_size) {
            let batch: Vec<NetSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = net_loss_grad(&net, &batch, 0.0).map_err(|e| Error::Divergence {
                epoch,
                detail: e.to_string(),
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("mini-batch loss {loss}"),
                });
            }
            weighted += loss * chunk.len() as f64;
            adam.update(&mut net, &grads.layers, opts);
        }
        train_loss.push(weighted / shuffled.len() as f64);
        if !val.is_empty() {
            let v = data_loss(&net, &val)?;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("validation loss {v}"),
                });
            }
            val_loss.push(v);
        }
        log::debug!("epoch {epoch}: train {:.6e}", train_loss[epoch]);
    }
    Ok((
        net,
        TrainReport {
            train_loss,
            val_loss,
            validation_indices,
        },
    ))
}
