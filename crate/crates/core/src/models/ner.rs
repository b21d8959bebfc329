use rand::Rng;

use super::{eval_rng, Example, InputCache, InputLayer, ModelConfig, Vocabularies, WordSource};
use crate::crf::Crf;
use crate::error::Result;
use crate::layers::{Linear, Mode};
use crate::numerics::{ParamTensor, Parameterized, Tensor};
use crate::recurrent::{BiLstm, BiLstmOutput};

pub(crate) fn new_crf(config: &ModelConfig, vocab: &Vocabularies) -> Crf {
    let crf = Crf::new("crf", vocab.tags.len());
    if config.iob_constraints {
        crf.with_iob_constraints(vocab.tags.labels())
    } else {
        crf
    }
}

/// Word (+ character) features → Bi-LSTM → per-token tag scores → CRF.
#[derive(Clone, Debug, PartialEq)]
pub struct NerTagger {
    pub input: InputLayer,
    pub encoder: BiLstm,
    pub projection: Linear,
    pub crf: Crf,
}

struct Forward {
    input: InputCache,
    encoded: BiLstmOutput,
    emissions: Tensor,
}

impl NerTagger {
    pub fn new<R: Rng>(config: &ModelConfig, vocab: &Vocabularies, words: WordSource, rng: &mut R) -> Result<Self> {
        let input = InputLayer::new(config, vocab, words, rng)?;
        let encoder = BiLstm::new("encoder", input.output_dim(), config.hidden, rng);
        let projection = Linear::new("emission", encoder.output_dim(), vocab.tags.len(), rng);
        Ok(NerTagger {
            input,
            encoder,
            projection,
            crf: new_crf(config, vocab),
        })
    }

    fn run<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<Forward> {
        let (x, input) = self.input.forward(ex, mode, rng)?;
        let encoded = self.encoder.encode(&x)?;
        let emissions = self.projection.forward(&encoded.states)?;
        Ok(Forward {
            input,
            encoded,
            emissions,
        })
    }

    /// Per-token tag scores `n × k` in eval mode.
    pub fn emissions(&self, ex: &Example) -> Result<Tensor> {
        Ok(self.run(ex, Mode::Eval, &mut eval_rng())?.emissions)
    }

    pub fn loss<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        let f = self.run(ex, mode, rng)?;
        self.crf.loss(&f.emissions, ex.gold_tags()?)
    }

    pub fn loss_and_grad<R: Rng + ?Sized>(&mut self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        let f = self.run(ex, mode, rng)?;
        let (loss, d_emissions) = self.crf.nll(&f.emissions, ex.gold_tags()?)?;
        let d_states = self.projection.backward(&f.encoded.states, &d_emissions);
        let dx = self.encoder.backward_pass(&f.encoded, &d_states);
        self.input.backward(&f.input, &dx);
        Ok(loss)
    }

    pub fn predict(&self, ex: &Example) -> Result<Vec<usize>> {
        Ok(self.crf.decode(&self.emissions(ex)?)?.path)
    }
}

impl Parameterized for NerTagger {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.input.params();
        out.extend(self.encoder.params());
        out.extend(self.projection.params());
        out.extend(self.crf.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.input.params_mut();
        out.extend(self.encoder.params_mut());
        out.extend(self.projection.params_mut());
        out.extend(self.crf.params_mut());
        out
    }
}
