//! The five model families, their shared input layer and the training loop.

mod check;
mod co_interactive;
mod config;
mod input;
mod joint;
mod ner;
mod svm;
mod training;
mod unified;

pub use check::{fixture_loss, gradcheck_model, tiny_config, tiny_fixture, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use co_interactive::{CoInteractiveModel, CoInteractiveOutput};
pub use config::{CharComposerKind, ModelConfig, ModelKind};
pub use input::{InputCache, InputLayer, WordSource};
pub use joint::{JointOutput, JointTransformerModel};
pub use ner::NerTagger;
pub use svm::{svm_predict, svm_train, SvmIntentModel};
pub use training::{train, EpochLog, TrainOptions};
pub use unified::{UnifiedModel, UnifiedOutput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, LabelVocab, TaggedSentence};
use crate::embeddings::{ContextualVectors, EmbeddingTable};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::numerics::{ParamTensor, Parameterized};

/// Label and input vocabularies a model is built against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabularies {
    pub tags: LabelVocab,
    pub intents: LabelVocab,
    pub words: Vec<String>,
    pub chars: Vec<char>,
}

impl Vocabularies {
    /// Labels and characters come from `train`. Words come from `train`
    /// when vectors are learned from scratch; with a pretrained table,
    /// every word of `train` and `extra` that the table knows is kept.
    pub fn from_corpus(train: &Corpus, extra: &[&Corpus], pretrained: Option<&EmbeddingTable>) -> Self {
        let mut words = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let sources: Vec<&Corpus> = match pretrained {
            Some(_) => std::iter::once(train).chain(extra.iter().copied()).collect(),
            None => vec![train],
        };
        for c in sources {
            for s in &c.sentences {
                for t in &s.tokens {
                    let known = pretrained.map_or(true, |p| p.index_of(t).is_some());
                    if known && seen.insert(t.clone()) {
                        words.push(t.clone());
                    }
                }
            }
        }
        let mut chars = Vec::new();
        let mut seen_chars = std::collections::HashSet::new();
        for s in &train.sentences {
            for t in &s.tokens {
                for ch in t.chars() {
                    if seen_chars.insert(ch) {
                        chars.push(ch);
                    }
                }
            }
        }
        Vocabularies {
            tags: train.tag_vocab.clone(),
            intents: train.intent_vocab.clone(),
            words,
            chars,
        }
    }

    /// Encode a gold sentence. Unknown tags are a label-set error; an
    /// unknown intent is kept as `None`.
    pub fn example(&self, s: &TaggedSentence, contextual: Option<&ContextualVectors>) -> Result<Example> {
        let tags = s
            .tags
            .iter()
            .map(|t| {
                self.tags
                    .index_of(t)
                    .ok_or_else(|| Error::LabelSet(format!("tag `{t}` (sentence {}) is not in the model's tag set", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ex = self.unlabeled(s.id, &s.tokens, contextual)?;
        ex.tags = tags;
        let label = s.intent_label();
        ex.intent = self.intents.index_of(&label);
        if ex.intent.is_none() && s.intents.iter().all(|i| self.intents.index_of(i).is_none()) {
            return Err(Error::LabelSet(format!(
                "intent `{label}` (sentence {}) is not in the model's intent set",
                s.id
            )));
        }
        Ok(ex)
    }

    /// Encode raw tokens for prediction.
    pub fn unlabeled(&self, id: usize, tokens: &[String], contextual: Option<&ContextualVectors>) -> Result<Example> {
        if tokens.is_empty() {
            return Err(Error::Argument("empty sentence".into()));
        }
        let external = match contextual {
            Some(cv) => Some(
                (0..tokens.len())
                    .map(|t| {
                        cv.get(id, t).map(<[f64]>::to_vec).ok_or_else(|| {
                            Error::Argument(format!("no contextual vector for sentence {id}, token {t}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Example {
            id,
            tokens: tokens.to_vec(),
            tags: Vec::new(),
            intent: None,
            external,
        })
    }

    pub fn examples(&self, c: &Corpus, contextual: Option<&ContextualVectors>) -> Result<Vec<Example>> {
        c.sentences.iter().map(|s| self.example(s, contextual)).collect()
    }
}

/// A sentence ready for a model: tokens plus gold label indices (empty /
/// `None` when unlabeled) and optional externally supplied token vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
    pub intent: Option<usize>,
    pub external: Option<Vec<Vec<f64>>>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub(crate) fn gold_tags(&self) -> Result<&[usize]> {
        if self.tags.len() != self.tokens.len() {
            return Err(Error::Argument(format!("sentence {} has no gold tags", self.id)));
        }
        Ok(&self.tags)
    }

    pub(crate) fn gold_intent(&self) -> Result<usize> {
        self.intent
            .ok_or_else(|| Error::LabelSet(format!("sentence {} has an intent outside the model's intent set", self.id)))
    }
}

/// What a model predicts for one sentence. Families that do not tag
/// (or do not classify) leave the field empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub tags: Option<Vec<usize>>,
    pub intent: Option<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn eval_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ner(NerTagger),
    Svm(SvmIntentModel),
    Unified(UnifiedModel),
    JointBert(JointTransformerModel),
    CoInteractive(CoInteractiveModel),
}

impl Model {
    /// Fresh model with initialization drawn from `config.seed`.
    pub fn build(config: &ModelConfig, vocab: &Vocabularies, words: WordSource) -> Result<Model> {
        config.validate()?;
        if vocab.tags.is_empty() && config.kind != ModelKind::Svm {
            return Err(Error::LabelSet("empty tag vocabulary".into()));
        }
        if vocab.intents.is_empty() && config.kind != ModelKind::Ner {
            return Err(Error::LabelSet("empty intent vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(match config.kind {
            ModelKind::Ner => Model::Ner(NerTagger::new(config, vocab, words, &mut rng)?),
            ModelKind::Svm => match words {
                WordSource::Table(t) => Model::Svm(SvmIntentModel::new(t, vocab.intents.len(), config.svm_c)?),
                WordSource::External(_) => {
                    return Err(Error::Config {
                        field: "embeddings".into(),
                        message: "the svm model needs a word table".into(),
                    })
                }
            },
            ModelKind::Unified => Model::Unified(UnifiedModel::new(config, vocab, words, &mut rng)?),
            ModelKind::JointBert => Model::JointBert(JointTransformerModel::new(config, vocab, words, &mut rng)?),
            ModelKind::CoInteractive => {
                Model::CoInteractive(CoInteractiveModel::new(config, vocab, words, &mut rng)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Ner(_) => ModelKind::Ner,
            Model::Svm(_) => ModelKind::Svm,
            Model::Unified(_) => ModelKind::Unified,
            Model::JointBert(_) => ModelKind::JointBert,
            Model::CoInteractive(_) => ModelKind::CoInteractive,
        }
    }

    /// Training loss of one example (dropout active in `Mode::Train`).
    pub fn loss<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        match self {
            Model::Ner(m) => m.loss(ex, mode, rng),
            Model::Svm(m) => m.loss(ex),
            Model::Unified(m) => m.loss(ex, mode, rng),
            Model::JointBert(m) => m.loss(ex, mode, rng),
            Model::CoInteractive(m) => m.loss(ex, mode, rng),
        }
    }

    /// Like [`Model::loss`], also accumulating parameter gradients.
    pub fn loss_and_grad<R: Rng + ?Sized>(&mut self, ex: &Example, mode: Mode, rng: &mut R) -> Result<f64> {
        match self {
            Model::Ner(m) => m.loss_and_grad(ex, mode, rng),
            Model::Svm(m) => m.loss_and_grad(ex),
            Model::Unified(m) => m.loss_and_grad(ex, mode, rng),
            Model::JointBert(m) => m.loss_and_grad(ex, mode, rng),
            Model::CoInteractive(m) => m.loss_and_grad(ex, mode, rng),
        }
    }

    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        match self {
            Model::Ner(m) => Ok(Prediction {
                tags: Some(m.predict(ex)?),
                intent: None,
            }),
            Model::Svm(m) => Ok(Prediction {
                tags: None,
                intent: Some(m.predict(ex)?),
            }),
            Model::Unified(m) => {
                let (tags, intent) = m.predict(ex)?;
                Ok(Prediction {
                    tags: Some(tags),
                    intent: Some(intent),
                })
            }
            Model::JointBert(m) => {
                let (tags, intent) = m.predict(ex)?;
                Ok(Prediction {
                    tags: Some(tags),
                    intent: Some(intent),
                })
            }
            Model::CoInteractive(m) => {
                let (tags, intent) = m.predict(ex)?;
                Ok(Prediction {
                    tags: Some(tags),
                    intent: Some(intent),
                })
            }
        }
    }
}

impl Parameterized for Model {
    fn params(&self) -> Vec<&ParamTensor> {
        match self {
            Model::Ner(m) => m.params(),
            Model::Svm(m) => m.params(),
            Model::Unified(m) => m.params(),
            Model::JointBert(m) => m.params(),
            Model::CoInteractive(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            Model::Ner(m) => m.params_mut(),
            Model::Svm(m) => m.params_mut(),
            Model::Unified(m) => m.params_mut(),
            Model::JointBert(m) => m.params_mut(),
            Model::CoInteractive(m) => m.params_mut(),
        }
    }
}
