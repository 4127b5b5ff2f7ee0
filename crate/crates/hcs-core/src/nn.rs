//! Small feed-forward networks with hand-rolled analytic backpropagation,
//! the classification losses, the density-ratio weight model, and RMSProp.
//!
//! Four networks share this machinery: the representation, the weight model,
//! and the two classification heads. Inputs may be dense or sparse; sparse
//! rows only touch the first layer's columns they reference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predictions are clipped into [PRED_CLIP, 1 - PRED_CLIP] before logs.
pub const PRED_CLIP: f64 = 1e-7;

/// Scale of the bounded pre-activation in the weight model head:
/// w_raw = softplus(W_HEAD_SCALE * tanh(z)). Bounding the softplus argument
/// keeps the head's gradient alive everywhere; an unbounded argument lets
/// the inner loop push entire regions into the flat tail of softplus, where
/// they can never recover.
pub const W_HEAD_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Softplus => 1.0 - (-a).exp(),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Borrowed view of one input row.
#[derive(Debug, Clone, Copy)]
pub enum FeatureRef<'a> {
    Dense(&'a [f64]),
    Sparse { indices: &'a [u32], values: &'a [f64] },
}

impl<'a> FeatureRef<'a> {
    pub fn max_index_exclusive(&self) -> usize {
        match self {
            FeatureRef::Dense(v) => v.len(),
            FeatureRef::Sparse { indices, .. } => {
                indices.last().map(|&i| i as usize + 1).unwrap_or(0)
            }
        }
    }
}

/// Dense rows viewed as inputs.
pub fn dense_refs(batch: &[Vec<f64>]) -> Vec<FeatureRef<'_>> {
    batch.iter().map(|v| FeatureRef::Dense(v)).collect()
}

/// One affine layer followed by an elementwise activation. Weights are
/// row-major (d_out x d_in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn affine_dense(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (o, row) in out.iter_mut().zip(self.weight.chunks(self.d_in)) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn affine_sparse(&self, indices: &[u32], values: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (&idx, &v) in indices.iter().zip(values) {
            let idx = idx as usize;
            for (o, row) in out.iter_mut().zip(self.weight.chunks(self.d_in)) {
                *o += row[idx] * v;
            }
        }
    }
}

/// Feed-forward network. Layer dims are implied by the layers themselves;
/// consecutive dims must agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weight: Vec<Vec<f64>>,
    pub d_bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            d_weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            d_bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.d_weight.iter_mut().zip(&other.d_weight) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.d_weight.iter_mut().chain(self.d_bias.iter_mut()) {
            for x in a.iter_mut() {
                *x *= c;
            }
        }
    }
}

/// Post-activation outputs of every layer for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    outputs: Vec<Vec<Vec<f64>>>,
}

impl ForwardCache {
    /// Final layer outputs, one row per sample.
    pub fn output(&self) -> &[Vec<f64>] {
        self.outputs.last().expect("network has at least one layer")
    }

    pub fn into_output(mut self) -> Vec<Vec<f64>> {
        self.outputs.pop().expect("network has at least one layer")
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Gradients,
    /// Gradient with respect to the network input, when requested.
    pub input_grad: Option<Vec<Vec<f64>>>,
}

impl Mlp {
    /// Builds a network with the given layer dims and activations.
    /// Weights start uniform in +/- sqrt(6 / (d_in + d_out)), biases at zero.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut ChaCha8Rng) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::invalid("dims", "need at least input and output dims"));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::DimensionMismatch {
                expected: dims.len() - 1,
                got: activations.len(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("dims", "layer dims must be positive"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, &act) in activations.iter().enumerate() {
            let (d_in, d_out) = (dims[i], dims[i + 1]);
            let lim = (6.0 / (d_in + d_out) as f64).sqrt();
            let weight = (0..d_in * d_out).map(|_| rng.gen_range(-lim..lim)).collect();
            layers.push(Layer {
                d_in,
                d_out,
                weight,
                bias: vec![0.0; d_out],
                activation: act,
            });
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.d_in).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.d_out));
        dims
    }

    /// Forward pass over a batch; keeps every layer's outputs for backward.
    pub fn forward(&self, xs: &[FeatureRef]) -> Result<ForwardCache> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("forward batch"));
        }
        let d_in = self.input_dim();
        for x in xs {
            match x {
                FeatureRef::Dense(v) if v.len() != d_in => {
                    return Err(Error::DimensionMismatch {
                        expected: d_in,
                        got: v.len(),
                    })
                }
                FeatureRef::Sparse { .. } if x.max_index_exclusive() > d_in => {
                    return Err(Error::DimensionMismatch {
                        expected: d_in,
                        got: x.max_index_exclusive(),
                    })
                }
                _ => {}
            }
        }
        let mut outputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let mut layer_out = Vec::with_capacity(xs.len());
            for (si, x) in xs.iter().enumerate() {
                let mut z = vec![0.0; layer.d_out];
                if li == 0 {
                    match x {
                        FeatureRef::Dense(v) => layer.affine_dense(v, &mut z),
                        FeatureRef::Sparse { indices, values } => {
                            layer.affine_sparse(indices, values, &mut z)
                        }
                    }
                } else {
                    layer.affine_dense(&outputs[li - 1][si], &mut z);
                }
                for v in z.iter_mut() {
                    *v = layer.activation.apply(*v);
                }
                layer_out.push(z);
            }
            outputs.push(layer_out);
        }
        Ok(ForwardCache { outputs })
    }

    /// Convenience: forward pass returning only the outputs.
    pub fn forward_output(&self, xs: &[FeatureRef]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(xs)?.into_output())
    }

    /// Backpropagates `d_out` (gradient of the loss with respect to the
    /// network outputs, one row per sample) through the cached pass.
    /// Per-sample normalization is the caller's business: parameter grads are
    /// plain sums over the batch.
    pub fn backward(
        &self,
        xs: &[FeatureRef],
        cache: &ForwardCache,
        d_out: &[Vec<f64>],
        want_input_grad: bool,
    ) -> Result<Backward> {
        let batch = xs.len();
        if cache.outputs.len() != self.layers.len()
            || cache.outputs.iter().any(|o| o.len() != batch)
            || d_out.len() != batch
        {
            return Err(Error::invalid("cache", "forward cache does not match batch"));
        }
        let mut grads = Gradients::zeros_like(self);
        // delta[s] = dL/d(post-activation of current layer), walked backwards.
        let mut delta: Vec<Vec<f64>> = d_out.to_vec();
        let mut input_grad = None;

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let dw = &mut grads.d_weight[li];
            let db = &mut grads.d_bias[li];
            let mut next_delta: Option<Vec<Vec<f64>>> = if li > 0 {
                Some(vec![vec![0.0; layer.d_in]; batch])
            } else if want_input_grad {
                Some(vec![vec![0.0; layer.d_in]; batch])
            } else {
                None
            };
            for s in 0..batch {
                let out = &cache.outputs[li][s];
                // dz = dL/d(pre-activation)
                let dz: Vec<f64> = delta[s]
                    .iter()
                    .zip(out)
                    .map(|(d, a)| d * layer.activation.deriv_from_output(*a))
                    .collect();
                for (o, &dzo) in dz.iter().enumerate() {
                    db[o] += dzo;
                }
                if li == 0 {
                    match xs[s] {
                        FeatureRef::Dense(v) => {
                            for (o, &dzo) in dz.iter().enumerate() {
                                let row = &mut dw[o * layer.d_in..(o + 1) * layer.d_in];
                                for (w, &xv) in row.iter_mut().zip(v) {
                                    *w += dzo * xv;
                                }
                            }
                        }
                        FeatureRef::Sparse { indices, values } => {
                            for (o, &dzo) in dz.iter().enumerate() {
                                let base = o * layer.d_in;
                                for (&idx, &xv) in indices.iter().zip(values) {
                                    dw[base + idx as usize] += dzo * xv;
                                }
                            }
                        }
                    }
                } else {
                    let input = &cache.outputs[li - 1][s];
                    for (o, &dzo) in dz.iter().enumerate() {
                        let row = &mut dw[o * layer.d_in..(o + 1) * layer.d_in];
                        for (w, &xv) in row.iter_mut().zip(input) {
                            *w += dzo * xv;
                        }
                    }
                }
                if let Some(nd) = next_delta.as_mut() {
                    let target = &mut nd[s];
                    for (o, &dzo) in dz.iter().enumerate() {
                        let row = &layer.weight[o * layer.d_in..(o + 1) * layer.d_in];
                        for (t, &w) in target.iter_mut().zip(row) {
                            *t += dzo * w;
                        }
                    }
                }
            }
            if li > 0 {
                delta = next_delta.expect("inner layers always propagate");
            } else {
                input_grad = next_delta;
            }
        }
        Ok(Backward { grads, input_grad })
    }

    /// All parameters flattened in layer order, weights then bias per layer.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            l.weight.copy_from_slice(&params[offset..offset + l.weight.len()]);
            offset += l.weight.len();
            l.bias.copy_from_slice(&params[offset..offset + l.bias.len()]);
            offset += l.bias.len();
        }
        Ok(())
    }
}

/// Elementwise RMSProp update over flat arrays:
/// acc <- rho * acc + (1 - rho) * g^2; p <- p - lr * g / sqrt(acc + eps).
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    acc: &mut [f64],
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != acc.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len().max(acc.len()),
        });
    }
    for ((p, &g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
        *a = rho * *a + (1.0 - rho) * g * g;
        *p -= lr * g / (*a + eps).sqrt();
    }
    Ok(())
}

/// RMSProp state for one network.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc: Vec<f64>,
}

impl RmsProp {
    pub fn new(lr: f64, param_count: usize) -> Self {
        RmsProp {
            lr,
            rho: 0.9,
            eps: 1e-8,
            acc: vec![0.0; param_count],
        }
    }

    /// One update over the whole network.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.d_weight.len() != net.layers.len() {
            return Err(Error::invalid("grads", "layer count mismatch"));
        }
        let mut offset = 0;
        for (layer, (dw, db)) in net
            .layers
            .iter_mut()
            .zip(grads.d_weight.iter().zip(&grads.d_bias))
        {
            let n_w = layer.weight.len();
            rmsprop_step(
                &mut layer.weight,
                dw,
                &mut self.acc[offset..offset + n_w],
                self.lr,
                self.rho,
                self.eps,
            )?;
            offset += n_w;
            let n_b = layer.bias.len();
            rmsprop_step(
                &mut layer.bias,
                db,
                &mut self.acc[offset..offset + n_b],
                self.lr,
                self.rho,
                self.eps,
            )?;
            offset += n_b;
        }
        Ok(())
    }
}

/// Weighted binary cross-entropy, averaged over the batch, with the gradient
/// with respect to the predictions. Predictions are clipped before logs.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad_pred: Vec<f64>,
}

pub fn weighted_cross_entropy(pred: &[f64], labels: &[u8], weights: &[f64]) -> Result<CrossEntropy> {
    if pred.len() != labels.len() || pred.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            got: labels.len().max(weights.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    let b = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for ((&p, &y), &w) in pred.iter().zip(labels).zip(weights) {
        let p = p.clamp(PRED_CLIP, 1.0 - PRED_CLIP);
        let y = f64::from(y);
        loss += w * (-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()));
        grad.push(w * (p - y) / (p * (1.0 - p)) / b);
    }
    loss /= b;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite cross-entropy: {loss}")));
    }
    Ok(CrossEntropy {
        loss,
        grad_pred: grad,
    })
}

/// Output of the weight model on a batch: strictly positive weights with
/// batch mean exactly one, plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct WeightApply {
    pub weights: Vec<f64>,
    net_out: Vec<f64>,
    mean: f64,
}

impl WeightApply {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Applies the weight network to a batch of representations. The network's
/// scalar outputs pass through a bounded softplus for strict positivity and
/// are then rescaled so the batch mean equals one.
pub fn weight_model_apply(
    net: &Mlp,
    h: &[FeatureRef],
) -> Result<(WeightApply, ForwardCache)> {
    if h.is_empty() {
        return Err(Error::EmptyInput("weight model batch"));
    }
    if net.output_dim() != 1 {
        return Err(Error::invalid("weight model", "output dim must be 1"));
    }
    let cache = net.forward(h)?;
    let net_out: Vec<f64> = cache.output().iter().map(|row| row[0]).collect();
    let raw: Vec<f64> = net_out
        .iter()
        .map(|&z| softplus(W_HEAD_SCALE * z.tanh()))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let weights = raw.iter().map(|&r| r / mean).collect();
    Ok((
        WeightApply {
            weights,
            net_out,
            mean,
        },
        cache,
    ))
}

/// Gradient of a loss with respect to the weight network's parameters, given
/// the gradient with respect to the normalized weights. Chains through the
/// mean normalization and the bounded softplus head.
pub fn weight_model_backward(
    net: &Mlp,
    h: &[FeatureRef],
    cache: &ForwardCache,
    apply: &WeightApply,
    d_weights: &[f64],
) -> Result<Gradients> {
    let n = apply.weights.len();
    if d_weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: d_weights.len(),
        });
    }
    // w_i = r_i / mean(r):
    // dL/dr_j = (dL/dw_j - mean_i(dL/dw_i * w_i)) / mean(r)
    let coupled = d_weights
        .iter()
        .zip(&apply.weights)
        .map(|(d, w)| d * w)
        .sum::<f64>()
        / n as f64;
    let d_out: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let d_raw = (d_weights[j] - coupled) / apply.mean;
            // r = softplus(c * tanh(z)): dr/dz = c * sigmoid(c * tanh(z)) * (1 - tanh(z)^2)
            let t = apply.net_out[j].tanh();
            let dr_dz = W_HEAD_SCALE * sigmoid(W_HEAD_SCALE * t) * (1.0 - t * t);
            vec![d_raw * dr_dz]
        })
        .collect();
    Ok(net.backward(h, cache, &d_out, false)?.grads)
}

/// Evaluates the weight model as a transferable function: raw bounded
/// softplus outputs at `h_eval`, normalized by the mean raw output over a
/// calibration batch (the source sample the ratio was fitted against).
pub fn weight_model_eval_calibrated(
    net: &Mlp,
    h_eval: &[FeatureRef],
    h_calibration: &[FeatureRef],
) -> Result<Vec<f64>> {
    if h_eval.is_empty() || h_calibration.is_empty() {
        return Err(Error::EmptyInput("weight model batch"));
    }
    let raw = |refs: &[FeatureRef]| -> Result<Vec<f64>> {
        Ok(net
            .forward_output(refs)?
            .iter()
            .map(|row| softplus(W_HEAD_SCALE * row[0].tanh()))
            .collect())
    };
    let eval = raw(h_eval)?;
    let cal = raw(h_calibration)?;
    let mean = cal.iter().sum::<f64>() / cal.len() as f64;
    Ok(eval.into_iter().map(|r| r / mean).collect())
}

/// Central-difference gradient check over a flat parameter vector. Returns
/// the worst relative error between `analytic` and finite differences of
/// `loss` at step `h`.
pub fn grad_check<F>(params: &[f64], analytic: &[f64], h: f64, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss(&probe);
        probe[i] = params[i] - h;
        let down = loss(&probe);
        probe[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}
