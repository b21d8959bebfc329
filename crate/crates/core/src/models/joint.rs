use rand::Rng;

use super::ner::new_crf;
use super::{argmax, eval_rng, Example, InputCache, InputLayer, ModelConfig, Vocabularies, WordSource};
use crate::attention::{positional_encoding, EncoderBlockCache, TransformerEncoder};
use crate::crf::Crf;
use crate::error::Result;
use crate::layers::{cross_entropy, one_hot, LayerNorm, LayerNormCache, Linear, Mode, PROB_FLOOR};
use crate::numerics::{softmax_rows, softmax_unchecked, ParamTensor, Parameterized, Tensor};

/// `(1/n) Σ_t CE(probs_t, gold_t)`.
pub(crate) fn mean_token_cross_entropy(probs: &Tensor, tags: &[usize]) -> Result<f64> {
    let k = probs.cols();
    let mut total = 0.0;
    for (t, &g) in tags.iter().enumerate() {
        total += cross_entropy(probs.row(t), &one_hot(k, g))?;
    }
    Ok(total / tags.len() as f64)
}

/// Gradient of [`mean_token_cross_entropy`] with respect to the logits.
pub(crate) fn mean_token_cross_entropy_grad(probs: &Tensor, tags: &[usize]) -> Tensor {
    let n = tags.len() as f64;
    let mut g = probs.clone();
    for (t, &y) in tags.iter().enumerate() {
        let row = g.row_mut(t);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    g
}

/// Transformer encoder over `[CLS; tokens]`. The CLS output feeds the intent
/// head, token outputs feed the slot head (softmax, or a CRF when enabled).
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransformerModel {
    pub input: InputLayer,
    /// Present when the input width differs from `d_model`.
    pub embed: Option<Linear>,
    pub cls: ParamTensor,
    pub embed_norm: LayerNorm,
    pub encoder: TransformerEncoder,
    pub intent: Linear,
    pub slot: Linear,
    pub crf: Option<Crf>,
}

#[derive(Clone, Debug)]
pub struct JointOutput {
    /// Intent distribution `y^i`.
    pub intent_probs: Vec<f64>,
    /// `n × k` slot logits.
    pub slot_logits: Tensor,
    /// `n × k` per-token slot distributions `y^s`.
    pub slot_probs: Tensor,
    x: Tensor,
    input: InputCache,
    norm: LayerNormCache,
    blocks: Vec<EncoderBlockCache>,
    hidden: Tensor,
}

impl JointTransformerModel {
    pub fn new<R: Rng>(config: &ModelConfig, vocab: &Vocabularies, words: WordSource, rng: &mut R) -> Result<Self> {
        let attention = config.attention()?;
        let d = attention.d_model;
        let input = InputLayer::new(config, vocab, words, rng)?;
        let embed = (input.output_dim() != d).then(|| Linear::new("embed", input.output_dim(), d, rng));
        let bound = (3.0 / d as f64).sqrt();
        let cls = ParamTensor::new(
            "cls",
            Tensor::vector((0..d).map(|_| rng.gen_range(-bound..=bound)).collect()),
        );
        let encoder = TransformerEncoder::new("encoder", attention, rng)?;
        let intent = Linear::new("intent", d, vocab.intents.len(), rng);
        let slot = Linear::new("slot", d, vocab.tags.len(), rng);
        Ok(JointTransformerModel {
            input,
            embed,
            cls,
            embed_norm: LayerNorm::new("embed_norm", d),
            encoder,
            intent,
            slot,
            crf: config.crf.then(|| new_crf(config, vocab)),
        })
    }

    pub fn d_model(&self) -> usize {
        self.encoder.config.d_model
    }

    pub fn forward<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<JointOutput> {
        let (x, input) = self.input.forward(ex, mode, rng)?;
        let e = match &self.embed {
            Some(l) => l.forward(&x)?,
            None => x.clone(),
        };
        let n = e.rows();
        let d = self.d_model();
        let pe = positional_encoding(n + 1, d);
        let mut seq = Vec::with_capacity((n + 1) * d);
        seq.extend_from_slice(self.cls.value.data());
        seq.extend_from_slice(e.data());
        for (s, p) in seq.iter_mut().zip(pe.data()) {
            *s += p;
        }
        let (u, norm) = self.embed_norm.forward(&Tensor::matrix(n + 1, d, seq))?;
        let (hidden, blocks) = self.encoder.forward(&u)?;
        let intent_probs = softmax_unchecked(&self.intent.forward_vec(hidden.row(0))?);
        let slot_logits = self.slot.forward(&hidden.slice_rows(1, n + 1))?;
        let slot_probs = softmax_rows(&slot_logits);
        Ok(JointOutput {
            intent_probs,
            slot_logits,
            slot_probs,
            x,
            input,
            norm,
            blocks,
            hidden,
        })
    }

    /// `log y^i[gold] + Σ_t log y^s_t[gold_t]` (the CRF variant uses the
    /// CRF sequence log-probability for the slot term).
    pub fn joint_log_prob(&self, ex: &Example) -> Result<f64> {
        let out = self.forward(ex, Mode::Eval, &mut eval_rng())?;
        let tags = ex.gold_tags()?;
        let intent = out.intent_probs[ex.gold_intent()?].max(PROB_FLOOR).ln();
        let slots = match &self.crf {
            Some(crf) => crf.log_prob(&out.slot_logits, tags)?,
            None => tags
                .iter()
                .enumerate()
                .map(|(t, &g)| out.slot_probs.get(t, g).max(PROB_FLOOR).ln())
                .sum(),
        };
        Ok(intent + slots)
    }

    fn slot_loss(&self, out: &JointOutput, tags: &[usize]) -> Result<f64> {
        match &self.crf {
            Some(crf) => crf.loss(&out.slot_logits, tags),
            None => mean_token_cross_entropy(&out.slot_probs, tags),
        }
    }

    /// Intent cross-entropy plus the mean token cross-entropy (or CRF NLL).
    pub fn loss<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        let out = self.forward(ex, mode, rng)?;
        let gold = ex.gold_intent()?;
        let intent = cross_entropy(&out.intent_probs, &one_hot(out.intent_probs.len(), gold))?;
        Ok(intent + self.slot_loss(&out, ex.gold_tags()?)?)
    }

    pub fn loss_and_grad<R: Rng + ?Sized>(&mut self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        let out = self.forward(ex, mode, rng)?;
        let gold = ex.gold_intent()?;
        let tags = ex.gold_tags()?;
        let n = tags.len();
        let d = self.d_model();
        let intent = cross_entropy(&out.intent_probs, &one_hot(out.intent_probs.len(), gold))?;

        let (slots, d_logits) = match &mut self.crf {
            Some(crf) => crf.nll(&out.slot_logits, tags)?,
            None => (
                mean_token_cross_entropy(&out.slot_probs, tags)?,
                mean_token_cross_entropy_grad(&out.slot_probs, tags),
            ),
        };

        let mut d_hidden = Tensor::zeros(&[n + 1, d]);
        let mut d_intent = out.intent_probs.clone();
        d_intent[gold] -= 1.0;
        let d_cls_out = self
            .intent
            .backward(&Tensor::vector(out.hidden.row(0).to_vec()), &Tensor::vector(d_intent));
        d_hidden.row_mut(0).copy_from_slice(d_cls_out.data());
        let d_tokens = self.slot.backward(&out.hidden.slice_rows(1, n + 1), &d_logits);
        for t in 0..n {
            d_hidden.row_mut(t + 1).copy_from_slice(d_tokens.row(t));
        }
        let d_u = self.encoder.backward(&out.blocks, &d_hidden);
        let d_seq = self.embed_norm.backward(&out.norm, &d_u);
        self.cls.grad.add_assign(&Tensor::vector(d_seq.row(0).to_vec()));
        let d_e = d_seq.slice_rows(1, n + 1);
        let dx = match &mut self.embed {
            Some(l) => l.backward(&out.x, &d_e),
            None => d_e,
        };
        self.input.backward(&out.input, &dx);
        Ok(intent + slots)
    }

    /// Slot tags (per-token argmax, or Viterbi with a CRF) and the intent.
    pub fn predict(&self, ex: &Example) -> Result<(Vec<usize>, usize)> {
        let out = self.forward(ex, Mode::Eval, &mut eval_rng())?;
        let tags = match &self.crf {
            Some(crf) => crf.decode(&out.slot_logits)?.path,
            None => (0..out.slot_logits.rows()).map(|t| argmax(out.slot_logits.row(t))).collect(),
        };
        Ok((tags, argmax(&out.intent_probs)))
    }
}

impl Parameterized for JointTransformerModel {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.input.params();
        if let Some(l) = &self.embed {
            out.extend(l.params());
        }
        out.push(&self.cls);
        out.extend(self.embed_norm.params());
        out.extend(self.encoder.params());
        out.extend(self.intent.params());
        out.extend(self.slot.params());
        if let Some(c) = &self.crf {
            out.extend(c.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.input.params_mut();
        if let Some(l) = &mut self.embed {
            out.extend(l.params_mut());
        }
        out.push(&mut self.cls);
        out.extend(self.embed_norm.params_mut());
        out.extend(self.encoder.params_mut());
        out.extend(self.intent.params_mut());
        out.extend(self.slot.params_mut());
        if let Some(c) = &mut self.crf {
            out.extend(c.params_mut());
        }
        out
    }
}
