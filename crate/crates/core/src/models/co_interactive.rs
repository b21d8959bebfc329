use rand::Rng;

use super::joint::{mean_token_cross_entropy, mean_token_cross_entropy_grad};
use super::ner::new_crf;
use super::{argmax, eval_rng, Example, InputCache, InputLayer, ModelConfig, Vocabularies, WordSource};
use crate::attention::{CoInteractive, CoInteractiveCache, LabelAttention, LabelAttentionCache};
use crate::crf::Crf;
use crate::error::Result;
use crate::layers::{cross_entropy, one_hot, Linear, Mode};
use crate::numerics::{softmax_rows, softmax_unchecked, ParamTensor, Parameterized, Tensor};
use crate::recurrent::{BiLstm, BiLstmOutput};

/// Bi-LSTM encoder, label attention over entity and intent label
/// embeddings, then the co-interactive layer. Slots come from `H_S'`, the
/// intent from the mean of `H_I'` over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CoInteractiveModel {
    pub input: InputLayer,
    pub encoder: BiLstm,
    pub slot_labels: LabelAttention,
    pub intent_labels: LabelAttention,
    pub co: CoInteractive,
    pub slot: Linear,
    pub intent: Linear,
    pub crf: Option<Crf>,
}

#[derive(Clone, Debug)]
pub struct CoInteractiveOutput {
    pub slot_logits: Tensor,
    pub slot_probs: Tensor,
    pub intent_probs: Vec<f64>,
    /// `H`, `H_S`, `H_I`, `H_S'`, `H_I'`: every one `n × d`.
    pub h: Tensor,
    pub hs: Tensor,
    pub hi: Tensor,
    pub hs_out: Tensor,
    pub hi_out: Tensor,
    pooled: Vec<f64>,
    input: InputCache,
    encoded: BiLstmOutput,
    slot_cache: LabelAttentionCache,
    intent_cache: LabelAttentionCache,
    co_cache: CoInteractiveCache,
}

impl CoInteractiveModel {
    pub fn new<R: Rng>(config: &ModelConfig, vocab: &Vocabularies, words: WordSource, rng: &mut R) -> Result<Self> {
        let input = InputLayer::new(config, vocab, words, rng)?;
        let encoder = BiLstm::new("encoder", input.output_dim(), config.hidden, rng);
        let d = encoder.output_dim();
        Ok(CoInteractiveModel {
            input,
            encoder,
            slot_labels: LabelAttention::new("slot_labels", d, vocab.tags.len(), rng),
            intent_labels: LabelAttention::new("intent_labels", d, vocab.intents.len(), rng),
            co: CoInteractive::new("co", d, rng),
            slot: Linear::new("slot", d, vocab.tags.len(), rng),
            intent: Linear::new("intent", d, vocab.intents.len(), rng),
            crf: config.crf.then(|| new_crf(config, vocab)),
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<CoInteractiveOutput> {
        let (x, input) = self.input.forward(ex, mode, rng)?;
        let encoded = self.encoder.encode(&x)?;
        let h = encoded.states.clone();
        let (hs, slot_cache) = self.slot_labels.forward(&h)?;
        let (hi, intent_cache) = self.intent_labels.forward(&h)?;
        let (hs_out, hi_out, co_cache) = self.co.forward(&hs, &hi)?;
        let slot_logits = self.slot.forward(&hs_out)?;
        let slot_probs = softmax_rows(&slot_logits);
        let n = hi_out.rows() as f64;
        let mut pooled = vec![0.0; hi_out.cols()];
        for r in 0..hi_out.rows() {
            for (p, v) in pooled.iter_mut().zip(hi_out.row(r)) {
                *p += v / n;
            }
        }
        let intent_probs = softmax_unchecked(&self.intent.forward_vec(&pooled)?);
        Ok(CoInteractiveOutput {
            slot_logits,
            slot_probs,
            intent_probs,
            h,
            hs,
            hi,
            hs_out,
            hi_out,
            pooled,
            input,
            encoded,
            slot_cache,
            intent_cache,
            co_cache,
        })
    }

    fn slot_loss(&self, out: &CoInteractiveOutput, tags: &[usize]) -> Result<f64> {
        match &self.crf {
            Some(crf) => crf.loss(&out.slot_logits, tags),
            None => mean_token_cross_entropy(&out.slot_probs, tags),
        }
    }

    /// Intent cross-entropy plus the slot term (mean token cross-entropy or CRF NLL).
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
        let intent = cross_entropy(&out.intent_probs, &one_hot(out.intent_probs.len(), gold))?;
        let (slots, d_logits) = match &mut self.crf {
            Some(crf) => crf.nll(&out.slot_logits, tags)?,
            None => (
                mean_token_cross_entropy(&out.slot_probs, tags)?,
                mean_token_cross_entropy_grad(&out.slot_probs, tags),
            ),
        };

        let mut d_intent = out.intent_probs.clone();
        d_intent[gold] -= 1.0;
        let d_pooled = self
            .intent
            .backward(&Tensor::vector(out.pooled.clone()), &Tensor::vector(d_intent));
        let (n, d) = (out.hi_out.rows(), out.hi_out.cols());
        let share: Vec<f64> = d_pooled.data().iter().map(|g| g / n as f64).collect();
        let d_hi_out = Tensor::matrix(n, d, share.repeat(n));
        let d_hs_out = self.slot.backward(&out.hs_out, &d_logits);
        let (d_hs, d_hi) = self.co.backward(&out.co_cache, &d_hs_out, &d_hi_out);
        let mut d_h = self.slot_labels.backward(&out.slot_cache, &d_hs);
        d_h.add_assign(&self.intent_labels.backward(&out.intent_cache, &d_hi));
        let dx = self.encoder.backward_pass(&out.encoded, &d_h);
        self.input.backward(&out.input, &dx);
        Ok(intent + slots)
    }

    pub fn predict(&self, ex: &Example) -> Result<(Vec<usize>, usize)> {
        let out = self.forward(ex, Mode::Eval, &mut eval_rng())?;
        let tags = match &self.crf {
            Some(crf) => crf.decode(&out.slot_logits)?.path,
            None => (0..out.slot_logits.rows()).map(|t| argmax(out.slot_logits.row(t))).collect(),
        };
        Ok((tags, argmax(&out.intent_probs)))
    }
}

impl Parameterized for CoInteractiveModel {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.input.params();
        out.extend(self.encoder.params());
        out.extend(self.slot_labels.params());
        out.extend(self.intent_labels.params());
        out.extend(self.co.params());
        out.extend(self.slot.params());
        out.extend(self.intent.params());
        if let Some(c) = &self.crf {
            out.extend(c.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.input.params_mut();
        out.extend(self.encoder.params_mut());
        out.extend(self.slot_labels.params_mut());
        out.extend(self.intent_labels.params_mut());
        out.extend(self.co.params_mut());
        out.extend(self.slot.params_mut());
        out.extend(self.intent.params_mut());
        if let Some(c) = &mut self.crf {
            out.extend(c.params_mut());
        }
        out
    }
}
