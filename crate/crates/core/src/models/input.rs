use rand::Rng;

use super::{CharComposerKind, Example, ModelConfig, Vocabularies};
use crate::embeddings::{CharTable, EmbeddingTable};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::numerics::{ParamTensor, Parameterized, Tensor};
use crate::recurrent::{CharCnn, CharComposer, CharComposerCache, CharLstm};

/// Where word vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum WordSource {
    Table(EmbeddingTable),
    /// Per-token vectors of this width supplied with each example.
    External(usize),
}

impl WordSource {
    pub fn dim(&self) -> usize {
        match self {
            WordSource::Table(t) => t.dim(),
            WordSource::External(d) => *d,
        }
    }
}

/// Word vector, optionally concatenated with a character-composed vector.
#[derive(Clone, Debug, PartialEq)]
pub struct InputLayer {
    pub words: WordSource,
    pub chars: Option<CharComposer>,
    pub max_chars: usize,
}

#[derive(Clone, Debug)]
pub struct InputCache {
    word_ids: Vec<Option<usize>>,
    chars: Vec<CharComposerCache>,
}

impl InputLayer {
    pub fn new<R: Rng>(config: &ModelConfig, vocab: &Vocabularies, words: WordSource, rng: &mut R) -> Result<Self> {
        let chars = match config.char_composer {
            CharComposerKind::None => None,
            CharComposerKind::Cnn => {
                let table = CharTable::random("char", &vocab.chars, config.char_dim, config.seed)?;
                Some(CharComposer::Cnn(CharCnn::new(
                    "charcnn",
                    table,
                    config.char_filters,
                    config.char_kernel,
                    config.char_dropout,
                    rng,
                )))
            }
            CharComposerKind::Lstm => {
                let table = CharTable::random("char", &vocab.chars, config.char_dim, config.seed)?;
                Some(CharComposer::Lstm(CharLstm::new("charlstm", table, config.char_hidden, rng)))
            }
        };
        Ok(InputLayer {
            words,
            chars,
            max_chars: config.max_chars,
        })
    }

    pub fn word_dim(&self) -> usize {
        self.words.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.word_dim() + self.chars.as_ref().map_or(0, |c| c.output_dim())
    }

    /// `n × output_dim` token representations.
    pub fn forward<R: Rng + ?Sized>(&self, ex: &Example, mode: Mode, rng: &mut R) -> Result<(Tensor, InputCache)> {
        if ex.is_empty() {
            return Err(Error::Argument("empty sentence".into()));
        }
        let n = ex.len();
        let width = self.output_dim();
        let mut out = Vec::with_capacity(n * width);
        let mut word_ids = Vec::with_capacity(n);
        let mut char_caches = Vec::new();
        for (t, token) in ex.tokens.iter().enumerate() {
            match &self.words {
                WordSource::Table(table) => {
                    let id = table.index_of(token);
                    out.extend_from_slice(match id {
                        Some(i) => table.row(i),
                        None => table.unk_vector(),
                    });
                    word_ids.push(id);
                }
                WordSource::External(d) => {
                    let v = ex
                        .external
                        .as_ref()
                        .and_then(|rows| rows.get(t))
                        .ok_or_else(|| Error::Argument(format!("sentence {} lacks contextual vectors", ex.id)))?;
                    if v.len() != *d {
                        return Err(Error::shape(format!("contextual vector width {} != {d}", v.len())));
                    }
                    out.extend_from_slice(v);
                    word_ids.push(None);
                }
            }
            if let Some(c) = &self.chars {
                let ids = c.encode(token, self.max_chars);
                let (v, cache) = c.compose_ids(&ids, mode, rng)?;
                out.extend(v);
                char_caches.push(cache);
            }
        }
        Ok((
            Tensor::matrix(n, width, out),
            InputCache {
                word_ids,
                chars: char_caches,
            },
        ))
    }

    pub fn backward(&mut self, cache: &InputCache, dx: &Tensor) {
        let wd = self.word_dim();
        for t in 0..dx.rows() {
            let row = dx.row(t);
            if let WordSource::Table(table) = &mut self.words {
                table.accumulate_grad(cache.word_ids[t], &row[..wd]);
            }
            if let Some(c) = &mut self.chars {
                c.backward(&cache.chars[t], &row[wd..]);
            }
        }
    }
}

impl Parameterized for InputLayer {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = match &self.words {
            WordSource::Table(t) => t.params(),
            WordSource::External(_) => Vec::new(),
        };
        if let Some(c) = &self.chars {
            out.extend(c.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = match &mut self.words {
            WordSource::Table(t) => t.params_mut(),
            WordSource::External(_) => Vec::new(),
        };
        if let Some(c) = &mut self.chars {
            out.extend(c.params_mut());
        }
        out
    }
}
