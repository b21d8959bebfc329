use rand::Rng;

use super::ner::new_crf;
use super::{argmax, eval_rng, Example, InputCache, InputLayer, ModelConfig, Vocabularies, WordSource};
use crate::crf::Crf;
use crate::error::Result;
use crate::layers::{cross_entropy, one_hot, Linear, Mode};
use crate::numerics::{softmax_unchecked, ParamTensor, Parameterized, Tensor};
use crate::recurrent::{BiLstm, BiLstmOutput};

/// Shared Bi-LSTM feeding a CRF entity head and a softmax intent head on
/// `h_u = [last forward state; last backward state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedModel {
    pub input: InputLayer,
    pub encoder: BiLstm,
    pub projection: Linear,
    pub crf: Crf,
    pub intent: Linear,
}

#[derive(Clone, Debug)]
pub struct UnifiedOutput {
    /// `n × k` CRF emission scores.
    pub emissions: Tensor,
    /// Intent distribution `y^u`.
    pub intent_probs: Vec<f64>,
    summary: Vec<f64>,
    input: InputCache,
    encoded: BiLstmOutput,
}

impl UnifiedModel {
    pub fn new<R: Rng>(config: &ModelConfig, vocab: &Vocabularies, words: WordSource, rng: &mut R) -> Result<Self> {
        let input = InputLayer::new(config, vocab, words, rng)?;
        let encoder = BiLstm::new("encoder", input.output_dim(), config.hidden, rng);
        let projection = Linear::new("emission", encoder.output_dim(), vocab.tags.len(), rng);
        let intent = Linear::new("intent", encoder.output_dim(), vocab.intents.len(), rng);
        Ok(UnifiedModel {
            input,
            encoder,
            projection,
            crf: new_crf(config, vocab),
            intent,
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<UnifiedOutput> {
        let (x, input) = self.input.forward(ex, mode, rng)?;
        let encoded = self.encoder.encode(&x)?;
        let emissions = self.projection.forward(&encoded.states)?;
        let summary = encoded.summary();
        let intent_probs = softmax_unchecked(&self.intent.forward_vec(&summary)?);
        Ok(UnifiedOutput {
            emissions,
            intent_probs,
            summary,
            input,
            encoded,
        })
    }

    /// `(L_entities, L_intent)` on one forward pass.
    pub fn loss_parts<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<(f64, f64)> {
        let out = self.forward(ex, mode, rng)?;
        let entities = self.crf.loss(&out.emissions, ex.gold_tags()?)?;
        let gold = one_hot(out.intent_probs.len(), ex.gold_intent()?);
        let intent = cross_entropy(&out.intent_probs, &gold)?;
        Ok((entities, intent))
    }

    /// `L_intent + L_entities`, unweighted.
    pub fn loss<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        let (entities, intent) = self.loss_parts(ex, mode, rng)?;
        Ok(entities + intent)
    }

    pub fn loss_and_grad<R: Rng + ?Sized>(&mut self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        let out = self.forward(ex, mode, rng)?;
        let gold_intent = ex.gold_intent()?;
        let (entities, d_emissions) = self.crf.nll(&out.emissions, ex.gold_tags()?)?;
        let intent = cross_entropy(&out.intent_probs, &one_hot(out.intent_probs.len(), gold_intent))?;

        let mut d_logits = out.intent_probs.clone();
        d_logits[gold_intent] -= 1.0;
        let d_summary = self
            .intent
            .backward(&Tensor::vector(out.summary.clone()), &Tensor::vector(d_logits));
        let mut d_states = self.projection.backward(&out.encoded.states, &d_emissions);
        let n = d_states.rows();
        let h = self.encoder.hidden();
        let ds = d_summary.data();
        for j in 0..h {
            let v = d_states.get(n - 1, j) + ds[j];
            d_states.set(n - 1, j, v);
            let v = d_states.get(0, h + j) + ds[h + j];
            d_states.set(0, h + j, v);
        }
        let dx = self.encoder.backward_pass(&out.encoded, &d_states);
        self.input.backward(&out.input, &dx);
        Ok(entities + intent)
    }

    /// Viterbi tags and the most probable intent.
    pub fn predict(&self, ex: &Example) -> Result<(Vec<usize>, usize)> {
        let out = self.forward(ex, Mode::Eval, &mut eval_rng())?;
        Ok((self.crf.decode(&out.emissions)?.path, argmax(&out.intent_probs)))
    }
}

impl Parameterized for UnifiedModel {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.input.params();
        out.extend(self.encoder.params());
        out.extend(self.projection.params());
        out.extend(self.crf.params());
        out.extend(self.intent.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.input.params_mut();
        out.extend(self.encoder.params_mut());
        out.extend(self.projection.params_mut());
        out.extend(self.crf.params_mut());
        out.extend(self.intent.params_mut());
        out
    }
}
