use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::AttentionConfig;
use crate::corpus::{Language, DEFAULT_MAX_WORDS};
use crate::error::{Error, Result};
use crate::layers::OptimizerKind;
use crate::recurrent::{
    CNN_CHAR_DIM, CNN_DROPOUT, CNN_FILTERS, CNN_KERNEL, DEFAULT_MAX_CHARS, LSTM_CHAR_DIM, LSTM_CHAR_HIDDEN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ModelKind {
    /// Bi-LSTM-CRF entity tagger.
    Ner,
    /// One-vs-rest linear SVM over mean word vectors.
    Svm,
    /// Shared Bi-LSTM with a CRF entity head and a softmax intent head.
    Unified,
    /// Transformer encoder with a CLS intent head and per-token slot head.
    JointBert,
    /// Bi-LSTM, label attention and co-interactive attention.
    CoInteractive,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Ner,
        ModelKind::Svm,
        ModelKind::Unified,
        ModelKind::JointBert,
        ModelKind::CoInteractive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ner => "ner",
            ModelKind::Svm => "svm",
            ModelKind::Unified => "unified",
            ModelKind::JointBert => "joint-bert",
            ModelKind::CoInteractive => "co-interactive",
        }
    }

    pub fn tags(self) -> bool {
        self != ModelKind::Svm
    }

    pub fn classifies(self) -> bool {
        self != ModelKind::Ner
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown model kind `{s}`")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CharComposerKind {
    None,
    Cnn,
    Lstm,
}

impl FromStr for CharComposerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CharComposerKind::None),
            "cnn" => Ok(CharComposerKind::Cnn),
            "lstm" => Ok(CharComposerKind::Lstm),
            other => Err(Error::Argument(format!("unknown char composer `{other}`"))),
        }
    }
}

impl fmt::Display for CharComposerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CharComposerKind::None => "none",
            CharComposerKind::Cnn => "cnn",
            CharComposerKind::Lstm => "lstm",
        })
    }
}

/// Every hyperparameter of a model and its training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub char_composer: CharComposerKind,
    /// LSTM units per direction.
    pub hidden: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Width of randomly initialized word vectors.
    pub word_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_words: usize,
    pub max_chars: usize,
    /// Token normalization applied to every corpus and input.
    pub language: Language,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub char_filters: usize,
    pub char_kernel: usize,
    pub char_dropout: f64,
    pub svm_c: f64,
    /// CRF slot head for the joint-bert and co-interactive families.
    pub crf: bool,
    /// Forbid IOB-invalid transitions in every CRF.
    pub iob_constraints: bool,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub feedforward: usize,
    /// Stop after this many epochs without held-out improvement.
    pub patience: Option<usize>,
    /// Global gradient-norm cap.
    pub clip: Option<f64>,
}

impl ModelConfig {
    pub fn defaults(kind: ModelKind) -> Self {
        Self::defaults_with(kind, CharComposerKind::None)
    }

    /// Defaults for a kind. The entity tagger switches to 50 units and Adam
    /// when a character composer is used.
    pub fn defaults_with(kind: ModelKind, char_composer: CharComposerKind) -> Self {
        let with_chars = char_composer != CharComposerKind::None;
        let (hidden, optimizer, lr) = match kind {
            ModelKind::Ner if with_chars => (50, OptimizerKind::Adam, 1e-3),
            ModelKind::Ner => (100, OptimizerKind::RmsProp, 1e-3),
            ModelKind::Svm => (0, OptimizerKind::Sgd, 0.1),
            ModelKind::Unified => (100, OptimizerKind::Adam, 1e-3),
            ModelKind::JointBert => (0, OptimizerKind::Adam, 5e-5),
            ModelKind::CoInteractive => (100, OptimizerKind::Adam, 1e-3),
        };
        let (char_dim, char_hidden) = match char_composer {
            CharComposerKind::Cnn => (CNN_CHAR_DIM, LSTM_CHAR_HIDDEN),
            _ => (LSTM_CHAR_DIM, LSTM_CHAR_HIDDEN),
        };
        let attention = AttentionConfig::default();
        ModelConfig {
            kind,
            char_composer,
            hidden,
            optimizer,
            lr,
            word_dim: if kind == ModelKind::JointBert { attention.d_model } else { 50 },
            epochs: 30,
            batch_size: 32,
            seed: 42,
            max_words: DEFAULT_MAX_WORDS,
            max_chars: DEFAULT_MAX_CHARS,
            language: Language::En,
            char_dim,
            char_hidden,
            char_filters: CNN_FILTERS,
            char_kernel: CNN_KERNEL,
            char_dropout: CNN_DROPOUT,
            svm_c: 1.0,
            crf: false,
            iob_constraints: false,
            d_model: attention.d_model,
            heads: attention.heads,
            layers: attention.layers,
            feedforward: attention.feedforward,
            patience: None,
            clip: None,
        }
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.d_model, self.heads, self.layers, self.feedforward)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        let recurrent = matches!(self.kind, ModelKind::Ner | ModelKind::Unified | ModelKind::CoInteractive);
        if recurrent && self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.word_dim == 0 {
            return bad("word_dim", "must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_words == 0 {
            return bad("max_words", "must be positive");
        }
        if self.max_chars == 0 {
            return bad("max_chars", "must be positive");
        }
        if self.char_composer != CharComposerKind::None {
            if self.char_dim == 0 {
                return bad("char_dim", "must be positive");
            }
            if self.char_composer == CharComposerKind::Lstm && self.char_hidden == 0 {
                return bad("char_hidden", "must be positive");
            }
            if self.char_composer == CharComposerKind::Cnn && (self.char_filters == 0 || self.char_kernel == 0) {
                return bad("char_filters", "filters and kernel must be positive");
            }
            if !(0.0..1.0).contains(&self.char_dropout) {
                return bad("char_dropout", "must be in [0, 1)");
            }
        }
        if !(self.svm_c > 0.0 && self.svm_c.is_finite()) {
            return bad("svm_c", "must be positive");
        }
        if self.kind == ModelKind::JointBert {
            if let Err(e) = self.attention() {
                return bad("heads", &e.to_string());
            }
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return bad("clip", "must be positive");
            }
        }
        Ok(())
    }

    /// `key = value` pairs in a fixed order, the inverse of [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        vec![
            ("kind".into(), self.kind.to_string()),
            ("char_composer".into(), self.char_composer.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("optimizer".into(), self.optimizer.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("word_dim".into(), self.word_dim.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("max_words".into(), self.max_words.to_string()),
            ("max_chars".into(), self.max_chars.to_string()),
            ("language".into(), self.language.to_string()),
            ("char_dim".into(), self.char_dim.to_string()),
            ("char_hidden".into(), self.char_hidden.to_string()),
            ("char_filters".into(), self.char_filters.to_string()),
            ("char_kernel".into(), self.char_kernel.to_string()),
            ("char_dropout".into(), self.char_dropout.to_string()),
            ("svm_c".into(), self.svm_c.to_string()),
            ("crf".into(), self.crf.to_string()),
            ("iob_constraints".into(), self.iob_constraints.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("feedforward".into(), self.feedforward.to_string()),
            ("patience".into(), opt(self.patience.map(|p| p.to_string()))),
            ("clip".into(), opt(self.clip.map(|c| c.to_string()))),
        ]
    }

    /// Set one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                field: key.into(),
                message: format!("cannot parse `{value}`"),
            })
        }
        fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
            if value == "none" {
                Ok(None)
            } else {
                parse(key, value).map(Some)
            }
        }
        match key {
            "kind" => self.kind = parse(key, value)?,
            "char_composer" => self.char_composer = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "optimizer" => self.optimizer = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "word_dim" => self.word_dim = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_words" => self.max_words = parse(key, value)?,
            "max_chars" => self.max_chars = parse(key, value)?,
            "language" => self.language = parse(key, value)?,
            "char_dim" => self.char_dim = parse(key, value)?,
            "char_hidden" => self.char_hidden = parse(key, value)?,
            "char_filters" => self.char_filters = parse(key, value)?,
            "char_kernel" => self.char_kernel = parse(key, value)?,
            "char_dropout" => self.char_dropout = parse(key, value)?,
            "svm_c" => self.svm_c = parse(key, value)?,
            "crf" => self.crf = parse(key, value)?,
            "iob_constraints" => self.iob_constraints = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "feedforward" => self.feedforward = parse(key, value)?,
            "patience" => self.patience = parse_opt(key, value)?,
            "clip" => self.clip = parse_opt(key, value)?,
            other => {
                return Err(Error::Config {
                    field: other.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Defaults for the `kind` and `char_composer` found in `pairs`, then
    /// every pair applied in order.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)> + Clone,
    {
        let mut kind = None;
        let mut composer = CharComposerKind::None;
        for (k, v) in pairs.clone() {
            match k {
                "kind" => kind = Some(v.parse().map_err(|e: Error| config_err("kind", e))?),
                "char_composer" => composer = v.parse().map_err(|e: Error| config_err("char_composer", e))?,
                _ => {}
            }
        }
        let kind = kind.ok_or_else(|| Error::Config {
            field: "kind".into(),
            message: "missing".into(),
        })?;
        let mut c = ModelConfig::defaults_with(kind, composer);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }
}

fn config_err(field: &str, e: Error) -> Error {
    Error::Config {
        field: field.into(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_through_names() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("bert".parse::<ModelKind>().is_err());
    }

    #[test]
    fn published_defaults() {
        let ner = ModelConfig::defaults(ModelKind::Ner);
        assert_eq!((ner.hidden, ner.optimizer, ner.lr), (100, OptimizerKind::RmsProp, 1e-3));
        let ner_c = ModelConfig::defaults_with(ModelKind::Ner, CharComposerKind::Cnn);
        assert_eq!((ner_c.hidden, ner_c.optimizer, ner_c.char_dim), (50, OptimizerKind::Adam, 10));
        let ner_l = ModelConfig::defaults_with(ModelKind::Ner, CharComposerKind::Lstm);
        assert_eq!((ner_l.char_dim, ner_l.char_hidden), (20, 20));
        let jb = ModelConfig::defaults(ModelKind::JointBert);
        assert_eq!(jb.lr, 5e-5);
        assert_eq!((jb.max_words, jb.max_chars, jb.epochs, jb.batch_size, jb.seed), (35, 30, 30, 32, 42));
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig::defaults_with(ModelKind::Ner, CharComposerKind::Lstm);
        c.patience = Some(3);
        c.lr = 0.0123;
        let pairs = c.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn char_composer_switches_ner_defaults() {
        let c = ModelConfig::from_pairs([("char_composer", "cnn"), ("kind", "ner")]).unwrap();
        assert_eq!(c.hidden, 50);
        let c = ModelConfig::from_pairs([("kind", "ner"), ("hidden", "7"), ("char_composer", "cnn")]).unwrap();
        assert_eq!(c.hidden, 7);
    }

    #[test]
    fn bad_values_name_their_field() {
        let mut c = ModelConfig::defaults(ModelKind::Unified);
        match c.set("hidden", "many") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "hidden"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.set("bogus", "1"), Err(Error::Config { .. })));
        c.hidden = 0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "hidden"));
    }
}
