//! Feed-forward building blocks, losses and optimizers.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{
    matmul_at_unchecked, matmul_bt_unchecked, matmul_unchecked, softmax_unchecked, ParamTensor,
    Parameterized, Tensor,
};

/// Affine map `y = W x + b` applied to each row of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: ParamTensor,
    /// `out`
    pub bias: ParamTensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Linear {
            weight: ParamTensor::new(format!("{name}.weight"), Tensor::matrix(output, input, w)),
            bias: ParamTensor::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weight.shape().len() != 2 || weight.rows() != bias.len() {
            return Err(Error::shape("linear weight rows must equal bias length"));
        }
        Ok(Linear {
            weight: ParamTensor::new(format!("{name}.weight"), weight),
            bias: ParamTensor::new(format!("{name}.bias"), Tensor::vector(bias)),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.rows()
    }

    /// `x: n × in` → `n × out`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "{}: input width {} != {}",
                self.weight.name,
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &Tensor) -> Tensor {
        let x = if x.shape().len() == 1 {
            Tensor::matrix(1, x.len(), x.data().to_vec())
        } else {
            x.clone()
        };
        let mut y = matmul_bt_unchecked(&x, &self.weight.value);
        let b = self.bias.value.data();
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Tensor::vector(x.to_vec()))?.into_data())
    }

    /// Accumulate parameter gradients and return `dL/dx`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let x = if x.shape().len() == 1 {
            Tensor::matrix(1, x.len(), x.data().to_vec())
        } else {
            x.clone()
        };
        let dy = if dy.shape().len() == 1 {
            Tensor::matrix(1, dy.len(), dy.data().to_vec())
        } else {
            dy.clone()
        };
        let dw = matmul_at_unchecked(&dy, &x);
        self.weight.grad.add_assign(&dw);
        let db = self.bias.grad.data_mut();
        for r in 0..dy.rows() {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        matmul_unchecked(&dy, &self.weight.value)
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamTensor,
    pub bias: ParamTensor,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        let mut gain = ParamTensor::zeros(format!("{name}.gain"), &[dim]);
        gain.value.fill(1.0);
        LayerNorm {
            gain,
            bias: ParamTensor::zeros(format!("{name}.bias"), &[dim]),
            epsilon: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.value.len()
    }

    /// Normalize each row of `x` (population variance).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "{}: width {} != {}",
                self.gain.name,
                x.cols(),
                self.dim()
            )));
        }
        let (r, d) = (x.rows(), x.cols());
        let mut normalized = Vec::with_capacity(r * d);
        let mut out = Vec::with_capacity(r * d);
        let mut inv_std = Vec::with_capacity(r);
        let (g, b) = (self.gain.value.data(), self.bias.value.data());
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.epsilon).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                normalized.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        Ok((
            Tensor::matrix(r, d, out),
            LayerNormCache {
                normalized: Tensor::matrix(r, d, normalized),
                inv_std,
            },
        ))
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Tensor::matrix(1, x.len(), x.to_vec()))?.0.into_data())
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let (r, d) = (dy.rows(), dy.cols());
        let g = self.gain.value.data().to_vec();
        let mut dx = vec![0.0; r * d];
        for i in 0..r {
            let xh = cache.normalized.row(i);
            let dyr = dy.row(i);
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..d {
                self.gain.grad.data_mut()[j] += dyr[j] * xh[j];
                self.bias.grad.data_mut()[j] += dyr[j];
                let dxh = dyr[j] * g[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            for j in 0..d {
                let dxh = dyr[j] * g[j];
                dx[i * d + j] = cache.inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        Tensor::matrix(r, d, dx)
    }
}

impl Parameterized for LayerNorm {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.gain, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-component scale factors of an inverted-dropout draw (0 or 1/(1−p)).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn apply(&self, x: &mut [f64]) {
        for (v, m) in x.iter_mut().zip(&self.0) {
            *v *= m;
        }
    }
}

pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, mode: Mode, rng: &mut R) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(DropoutMask(vec![1.0; len]));
    }
    let keep = 1.0 / (1.0 - p);
    Ok(DropoutMask(
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect(),
    ))
}

/// Inverted dropout: identity in eval mode.
pub fn dropout<R: Rng + ?Sized>(x: &[f64], p: f64, mode: Mode, rng: &mut R) -> Result<Vec<f64>> {
    let mask = dropout_mask(x.len(), p, mode, rng)?;
    let mut out = x.to_vec();
    mask.apply(&mut out);
    Ok(out)
}

pub const PROB_FLOOR: f64 = 1e-12;

/// `−Σ yᵢ ln ŷᵢ` with `ŷᵢ` clamped below at 1e-12.
pub fn cross_entropy(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::shape(format!(
            "cross_entropy: {} predictions vs {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    Ok(-predicted
        .iter()
        .zip(gold)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| y * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

pub fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Softmax followed by cross-entropy against a class index.
/// Returns `(loss, probabilities, dL/dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], gold: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let probs = softmax_unchecked(logits);
    let loss = -probs[gold].max(PROB_FLOOR).ln();
    let mut grad = probs.clone();
    grad[gold] -= 1.0;
    (loss, probs, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" | "rms-prop" => Ok(OptimizerKind::RmsProp),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Argument(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

/// First/second moment accumulators keyed by parameter position.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    names: Vec<String>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            step: 0,
            names: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn ensure_state<M: Parameterized + ?Sized>(&mut self, model: &M) {
        if !self.names.is_empty() {
            return;
        }
        for p in model.params() {
            self.names.push(p.name.clone());
            self.first.push(vec![0.0; p.value.len()]);
            self.second.push(vec![0.0; p.value.len()]);
        }
    }

    /// Apply one update using the gradients currently stored in `model`.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        self.ensure_state(model);
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr;
        for (i, p) in model.params_mut().into_iter().enumerate() {
            debug_assert_eq!(p.name, self.names[i]);
            if p.frozen {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let grad = p.grad.data();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for j in 0..value.len() {
                        let g = grad[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        value[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::RmsProp => {
                    for j in 0..value.len() {
                        let g = grad[j];
                        v[j] = RMSPROP_DECAY * v[j] + (1.0 - RMSPROP_DECAY) * g * g;
                        value[j] -= lr * g / (v[j].sqrt() + RMSPROP_EPS);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..value.len() {
                        value[j] -= lr * grad[j];
                    }
                }
            }
        }
    }
}

pub fn adam_step<M: Parameterized + ?Sized>(state: &mut OptimizerState, params: &mut M) {
    debug_assert_eq!(state.kind, OptimizerKind::Adam);
    state.step(params);
}

pub fn rmsprop_step<M: Parameterized + ?Sized>(state: &mut OptimizerState, params: &mut M) {
    debug_assert_eq!(state.kind, OptimizerKind::RmsProp);
    state.step(params);
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<M: Parameterized + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = model
        .params()
        .iter()
        .filter(|p| !p.frozen)
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in model.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}
