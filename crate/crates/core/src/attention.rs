//! Scaled dot-product and multi-head attention, post-LN transformer encoder
//! blocks, sinusoidal positions, label attention and the co-interactive layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{relu, LayerNorm, LayerNormCache, Linear};
use crate::numerics::{
    matmul_at_unchecked, matmul_bt_unchecked, matmul_unchecked, softmax_rows,
    softmax_rows_backward, ParamTensor, Parameterized, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub layers: usize,
    pub feedforward: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig::new(64, 2, 2, 128).expect("valid defaults")
    }
}

impl AttentionConfig {
    /// `d_k = d_v = d_model / heads`.
    pub fn new(d_model: usize, heads: usize, layers: usize, feedforward: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Argument(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let c = AttentionConfig {
            d_model,
            d_k: d_model / heads,
            d_v: d_model / heads,
            heads,
            layers,
            feedforward,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.d_k, self.d_v, self.heads, self.layers, self.feedforward];
        if dims.contains(&0) {
            return Err(Error::Argument(format!("attention dimensions must be positive: {self:?}")));
        }
        if self.heads * self.d_k != self.d_model {
            return Err(Error::Argument(format!(
                "heads·d_k = {} must equal d_model = {}",
                self.heads * self.d_k,
                self.d_model
            )));
        }
        Ok(())
    }
}

/// `softmax(Q Kᵀ / √d_k) V`. Returns the output and the weight matrix.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::shape("attention operands must be matrices"));
    }
    if q.cols() != k.cols() {
        return Err(Error::shape(format!("query width {} != key width {}", q.cols(), k.cols())));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    Ok(attend(q, k, v))
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = matmul_bt_unchecked(q, k).scale(scale);
    let weights = softmax_rows(&scores);
    (matmul_unchecked(&weights, v), weights)
}

/// Gradients of [`scaled_dot_attention`] with respect to `(Q, K, V)`.
pub fn scaled_dot_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = matmul_at_unchecked(weights, d_out);
    let dw = matmul_bt_unchecked(d_out, v);
    let ds = softmax_rows_backward(weights, &dw).scale(scale);
    let dq = matmul_unchecked(&ds, k);
    let dk = matmul_at_unchecked(&ds, q);
    (dq, dk, dv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct MultiHeadCache {
    xq: Tensor,
    xk: Tensor,
    xv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    concat: Tensor,
    weights: Vec<Tensor>,
}

impl MultiHeadCache {
    /// Attention weights of each head.
    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(name: &str, config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(MultiHeadAttention {
            config,
            query: Linear::new(&format!("{name}.query"), d, config.heads * config.d_k, rng),
            key: Linear::new(&format!("{name}.key"), d, config.heads * config.d_k, rng),
            value: Linear::new(&format!("{name}.value"), d, config.heads * config.d_v, rng),
            output: Linear::new(&format!("{name}.output"), config.heads * config.d_v, d, rng),
        })
    }

    pub fn forward(&self, xq: &Tensor, xk: &Tensor, xv: &Tensor) -> Result<(Tensor, MultiHeadCache)> {
        let d = self.config.d_model;
        for x in [xq, xk, xv] {
            if x.shape().len() != 2 || x.cols() != d {
                return Err(Error::shape(format!("attention input must be ·×{d}, got {:?}", x.shape())));
            }
        }
        if xk.rows() != xv.rows() {
            return Err(Error::shape("key and value inputs must have the same number of rows"));
        }
        let q = self.query.forward_unchecked(xq);
        let k = self.key.forward_unchecked(xk);
        let v = self.value.forward_unchecked(xv);
        let (dk, dv) = (self.config.d_k, self.config.d_v);
        let mut concat = Tensor::zeros(&[xq.rows(), self.config.heads * dv]);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (qh, kh, vh) = (
                q.slice_cols(h * dk, (h + 1) * dk),
                k.slice_cols(h * dk, (h + 1) * dk),
                v.slice_cols(h * dv, (h + 1) * dv),
            );
            let (oh, wh) = attend(&qh, &kh, &vh);
            for r in 0..oh.rows() {
                concat.row_mut(r)[h * dv..(h + 1) * dv].copy_from_slice(oh.row(r));
            }
            weights.push(wh);
        }
        let out = self.output.forward_unchecked(&concat);
        Ok((
            out,
            MultiHeadCache {
                xq: xq.clone(),
                xk: xk.clone(),
                xv: xv.clone(),
                q,
                k,
                v,
                concat,
                weights,
            },
        ))
    }

    /// Returns gradients with respect to the query, key and value inputs.
    pub fn backward(&mut self, cache: &MultiHeadCache, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
        let d_concat = self.output.backward(&cache.concat, d_out);
        let (dk, dv) = (self.config.d_k, self.config.d_v);
        let mut dq_all = Tensor::zeros(cache.q.shape());
        let mut dk_all = Tensor::zeros(cache.k.shape());
        let mut dv_all = Tensor::zeros(cache.v.shape());
        for h in 0..self.config.heads {
            let (qh, kh, vh) = (
                cache.q.slice_cols(h * dk, (h + 1) * dk),
                cache.k.slice_cols(h * dk, (h + 1) * dk),
                cache.v.slice_cols(h * dv, (h + 1) * dv),
            );
            let d_oh = d_concat.slice_cols(h * dv, (h + 1) * dv);
            let (gq, gk, gv) = scaled_dot_attention_backward(&qh, &kh, &vh, &cache.weights[h], &d_oh);
            for r in 0..gq.rows() {
                dq_all.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(gq.row(r));
            }
            for r in 0..gk.rows() {
                dk_all.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(gk.row(r));
                dv_all.row_mut(r)[h * dv..(h + 1) * dv].copy_from_slice(gv.row(r));
            }
        }
        let dxq = self.query.backward(&cache.xq, &dq_all);
        let dxk = self.key.backward(&cache.xk, &dk_all);
        let dxv = self.value.backward(&cache.xv, &dv_all);
        (dxq, dxk, dxv)
    }
}

impl Parameterized for MultiHeadAttention {
    fn params(&self) -> Vec<&ParamTensor> {
        [&self.query, &self.key, &self.value, &self.output]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.query.params_mut();
        out.extend(self.key.params_mut());
        out.extend(self.value.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

/// `LN(X + SelfAttn(X))` followed by `LN(· + FFN(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderBlockCache {
    attn: MultiHeadCache,
    norm1: LayerNormCache,
    mid: Tensor,
    pre_relu: Tensor,
    hidden: Tensor,
    norm2: LayerNormCache,
}

impl EncoderBlockCache {
    pub fn attention(&self) -> &MultiHeadCache {
        &self.attn
    }
}

impl EncoderBlock {
    pub fn new<R: Rng>(name: &str, config: AttentionConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        Ok(EncoderBlock {
            attention: MultiHeadAttention::new(&format!("{name}.attn"), config, rng)?,
            norm1: LayerNorm::new(&format!("{name}.norm1"), d),
            ff1: Linear::new(&format!("{name}.ff1"), d, config.feedforward, rng),
            ff2: Linear::new(&format!("{name}.ff2"), config.feedforward, d, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), d),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, EncoderBlockCache)> {
        let (a, attn) = self.attention.forward(x, x, x)?;
        let (mid, norm1) = self.norm1.forward(&x.add(&a)?)?;
        let pre_relu = self.ff1.forward_unchecked(&mid);
        let hidden = Tensor::matrix(
            pre_relu.rows(),
            pre_relu.cols(),
            pre_relu.data().iter().map(|&v| relu(v)).collect(),
        );
        let f = self.ff2.forward_unchecked(&hidden);
        let (out, norm2) = self.norm2.forward(&mid.add(&f)?)?;
        Ok((
            out,
            EncoderBlockCache {
                attn,
                norm1,
                mid,
                pre_relu,
                hidden,
                norm2,
            },
        ))
    }

    pub fn backward(&mut self, cache: &EncoderBlockCache, d_out: &Tensor) -> Tensor {
        let d_sum2 = self.norm2.backward(&cache.norm2, d_out);
        let d_hidden = self.ff2.backward(&cache.hidden, &d_sum2);
        let d_pre = Tensor::matrix(
            d_hidden.rows(),
            d_hidden.cols(),
            d_hidden
                .data()
                .iter()
                .zip(cache.pre_relu.data())
                .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
                .collect(),
        );
        let mut d_mid = self.ff1.backward(&cache.mid, &d_pre);
        d_mid.add_assign(&d_sum2);
        let d_sum1 = self.norm1.backward(&cache.norm1, &d_mid);
        let (dq, dk, dv) = self.attention.backward(&cache.attn, &d_sum1);
        let mut dx = d_sum1;
        dx.add_assign(&dq);
        dx.add_assign(&dk);
        dx.add_assign(&dv);
        dx
    }
}

impl Parameterized for EncoderBlock {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.attention.params();
        out.extend(self.norm1.params());
        out.extend(self.ff1.params());
        out.extend(self.ff2.params());
        out.extend(self.norm2.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.attention.params_mut();
        out.extend(self.norm1.params_mut());
        out.extend(self.ff1.params_mut());
        out.extend(self.ff2.params_mut());
        out.extend(self.norm2.params_mut());
        out
    }
}

/// A stack of encoder blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerEncoder {
    pub config: AttentionConfig,
    pub blocks: Vec<EncoderBlock>,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(name: &str, config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(&format!("{name}.block{i}"), config, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { config, blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<EncoderBlockCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&h)?;
            caches.push(c);
            h = next;
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: &[EncoderBlockCache], d_out: &Tensor) -> Tensor {
        let mut d = d_out.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            d = b.backward(c, &d);
        }
        d
    }
}

impl Parameterized for TransformerEncoder {
    fn params(&self) -> Vec<&ParamTensor> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

/// Sinusoidal encodings: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(n: usize, d_model: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[n.max(1), d_model.max(1)]);
    for p in 0..n {
        for j in 0..d_model {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d_model as f64);
            pe.set(p, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// `A = softmax(H W)`, `H_v = H + A Wᵀ` for `H: n × d`, `W: d × m`.
pub fn label_attention(h: &Tensor, labels: &Tensor) -> Result<(Tensor, Tensor)> {
    if h.shape().len() != 2 || labels.shape().len() != 2 || h.cols() != labels.rows() {
        return Err(Error::shape(format!(
            "label attention: H {:?} incompatible with labels {:?}",
            h.shape(),
            labels.shape()
        )));
    }
    let a = softmax_rows(&matmul_unchecked(h, labels));
    let mut out = matmul_bt_unchecked(&a, labels);
    out.add_assign(h);
    Ok((out, a))
}

/// Learned label embeddings, one column per label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAttention {
    pub labels: ParamTensor,
}

#[derive(Clone, Debug)]
pub struct LabelAttentionCache {
    h: Tensor,
    weights: Tensor,
}

impl LabelAttentionCache {
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

impl LabelAttention {
    pub fn new<R: Rng>(name: &str, dim: usize, num_labels: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (dim + num_labels) as f64).sqrt();
        let w = (0..dim * num_labels).map(|_| rng.gen_range(-bound..=bound)).collect();
        LabelAttention {
            labels: ParamTensor::new(format!("{name}.labels"), Tensor::matrix(dim, num_labels, w)),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.value.cols()
    }

    pub fn forward(&self, h: &Tensor) -> Result<(Tensor, LabelAttentionCache)> {
        let (out, weights) = label_attention(h, &self.labels.value)?;
        Ok((out, LabelAttentionCache { h: h.clone(), weights }))
    }

    pub fn backward(&mut self, cache: &LabelAttentionCache, d_out: &Tensor) -> Tensor {
        let w = &self.labels.value;
        let a = &cache.weights;
        let da = matmul_unchecked(d_out, w);
        let mut dw = matmul_at_unchecked(d_out, a);
        let ds = softmax_rows_backward(a, &da);
        let mut dh = d_out.clone();
        dh.add_assign(&matmul_bt_unchecked(&ds, w));
        dw.add_assign(&matmul_at_unchecked(&cache.h, &ds));
        self.labels.grad.add_assign(&dw);
        dh
    }
}

impl Parameterized for LabelAttention {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.labels]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.labels]
    }
}

/// Paired cross-attention: the entity stream queries the intent stream and
/// the intent stream queries the entity stream, each followed by a residual
/// connection and layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct CoInteractive {
    pub query_s: Linear,
    pub key_s: Linear,
    pub value_s: Linear,
    pub query_i: Linear,
    pub key_i: Linear,
    pub value_i: Linear,
    pub norm_s: LayerNorm,
    pub norm_i: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct CoInteractiveCache {
    hs: Tensor,
    hi: Tensor,
    qs: Tensor,
    ks: Tensor,
    vs: Tensor,
    qi: Tensor,
    ki: Tensor,
    vi: Tensor,
    weights_s: Tensor,
    weights_i: Tensor,
    norm_s: LayerNormCache,
    norm_i: LayerNormCache,
}

impl CoInteractiveCache {
    /// Weights of the entity stream over intent positions, and vice versa.
    pub fn weights(&self) -> (&Tensor, &Tensor) {
        (&self.weights_s, &self.weights_i)
    }
}

impl CoInteractive {
    pub fn new<R: Rng>(name: &str, dim: usize, rng: &mut R) -> Self {
        let lin = |n: &str, rng: &mut R| Linear::new(&format!("{name}.{n}"), dim, dim, rng);
        CoInteractive {
            query_s: lin("query_s", rng),
            key_s: lin("key_s", rng),
            value_s: lin("value_s", rng),
            query_i: lin("query_i", rng),
            key_i: lin("key_i", rng),
            value_i: lin("value_i", rng),
            norm_s: LayerNorm::new(&format!("{name}.norm_s"), dim),
            norm_i: LayerNorm::new(&format!("{name}.norm_i"), dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm_s.dim()
    }

    pub fn forward(&self, hs: &Tensor, hi: &Tensor) -> Result<(Tensor, Tensor, CoInteractiveCache)> {
        let d = self.dim();
        if hs.shape().len() != 2 || hs.shape() != hi.shape() || hs.cols() != d {
            return Err(Error::shape(format!(
                "co-interactive inputs must both be n×{d}, got {:?} and {:?}",
                hs.shape(),
                hi.shape()
            )));
        }
        let qs = self.query_s.forward_unchecked(hs);
        let ks = self.key_s.forward_unchecked(hs);
        let vs = self.value_s.forward_unchecked(hs);
        let qi = self.query_i.forward_unchecked(hi);
        let ki = self.key_i.forward_unchecked(hi);
        let vi = self.value_i.forward_unchecked(hi);
        let (cs, weights_s) = attend(&qs, &ki, &vi);
        let (ci, weights_i) = attend(&qi, &ks, &vs);
        let (out_s, norm_s) = self.norm_s.forward(&hs.add(&cs)?)?;
        let (out_i, norm_i) = self.norm_i.forward(&hi.add(&ci)?)?;
        Ok((
            out_s,
            out_i,
            CoInteractiveCache {
                hs: hs.clone(),
                hi: hi.clone(),
                qs,
                ks,
                vs,
                qi,
                ki,
                vi,
                weights_s,
                weights_i,
                norm_s,
                norm_i,
            },
        ))
    }

    /// Returns `(dL/dH_S, dL/dH_I)`.
    pub fn backward(&mut self, cache: &CoInteractiveCache, d_out_s: &Tensor, d_out_i: &Tensor) -> (Tensor, Tensor) {
        let d_sum_s = self.norm_s.backward(&cache.norm_s, d_out_s);
        let d_sum_i = self.norm_i.backward(&cache.norm_i, d_out_i);
        let (dqs, dki, dvi) =
            scaled_dot_attention_backward(&cache.qs, &cache.ki, &cache.vi, &cache.weights_s, &d_sum_s);
        let (dqi, dks, dvs) =
            scaled_dot_attention_backward(&cache.qi, &cache.ks, &cache.vs, &cache.weights_i, &d_sum_i);
        let mut dhs = d_sum_s;
        dhs.add_assign(&self.query_s.backward(&cache.hs, &dqs));
        dhs.add_assign(&self.key_s.backward(&cache.hs, &dks));
        dhs.add_assign(&self.value_s.backward(&cache.hs, &dvs));
        let mut dhi = d_sum_i;
        dhi.add_assign(&self.query_i.backward(&cache.hi, &dqi));
        dhi.add_assign(&self.key_i.backward(&cache.hi, &dki));
        dhi.add_assign(&self.value_i.backward(&cache.hi, &dvi));
        (dhs, dhi)
    }
}

impl Parameterized for CoInteractive {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = Vec::new();
        for l in [&self.query_s, &self.key_s, &self.value_s, &self.query_i, &self.key_i, &self.value_i] {
            out.extend(l.params());
        }
        out.extend(self.norm_s.params());
        out.extend(self.norm_i.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = Vec::new();
        out.extend(self.query_s.params_mut());
        out.extend(self.key_s.params_mut());
        out.extend(self.value_s.params_mut());
        out.extend(self.query_i.params_mut());
        out.extend(self.key_i.params_mut());
        out.extend(self.value_i.params_mut());
        out.extend(self.norm_s.params_mut());
        out.extend(self.norm_i.params_mut());
        out
    }
}
