//! Run configuration: a `key = value` file with optional `[kind]` sections
//! whose keys apply only when training that model kind.
//!
//! ```text
//! kind = unified
//! train = data/train.iob
//! test_fraction = 0.3
//!
//! [unified]
//! hidden = 64
//! ```

use std::path::{Path, PathBuf};

use slotintent::embeddings::VectorFormat;
use slotintent::models::{ModelConfig, ModelKind};
use slotintent::Error;

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    /// `(key, value, line)` outside any section.
    pub global: Vec<(String, String, usize)>,
    /// Section name and its entries, in file order.
    pub sections: Vec<(String, Vec<(String, String, usize)>)>,
}

pub fn parse_config_str(text: &str) -> Result<ConfigFile, UsageError> {
    let mut file = ConfigFile::default();
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            name.parse::<ModelKind>()
                .map_err(|_| UsageError(format!("config line {}: unknown section `[{name}]`", i + 1)))?;
            file.sections.push((name.to_string(), Vec::new()));
            current = Some(file.sections.len() - 1);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected `key = value`", i + 1)))?;
        let entry = (k.trim().to_string(), v.trim().to_string(), i + 1);
        match current {
            Some(s) => file.sections[s].1.push(entry),
            None => file.global.push(entry),
        }
    }
    Ok(file)
}

/// Values given on the command line; each wins over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub kind: Option<ModelKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// `key=value` assignments applied after the file.
    pub set: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    /// Split this share of `train` off as the test set when no test file is given.
    pub test_fraction: Option<f64>,
    pub deduplicate: bool,
    pub embeddings: Option<PathBuf>,
    pub embeddings_format: VectorFormat,
    /// Fine-tune pretrained word vectors instead of keeping them frozen.
    pub train_embeddings: bool,
    /// Per-token vector files (`<sentence>\t<token>\t<floats>`) replacing word lookup.
    pub train_vectors: Option<PathBuf>,
    pub test_vectors: Option<PathBuf>,
    pub held_out_vectors: Option<PathBuf>,
    pub out: PathBuf,
}

fn usage_from(e: Error) -> UsageError {
    UsageError(e.to_string())
}

impl RunConfig {
    /// Merge defaults, the file (global keys, then the section of the
    /// chosen kind), `--set` pairs and flag overrides. Relative paths in the
    /// file resolve against `base`.
    pub fn resolve(file: Option<&ConfigFile>, base: &Path, ov: &Overrides) -> Result<RunConfig, UsageError> {
        let mut pairs: Vec<(String, String, bool)> = Vec::new();
        if let Some(f) = file {
            pairs.extend(f.global.iter().map(|(k, v, _)| (k.clone(), v.clone(), true)));
        }
        let mut set = Vec::new();
        for s in &ov.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--set expects key=value, got `{s}`")))?;
            set.push((k.trim().to_string(), v.trim().to_string(), false));
        }
        let kind = match ov.kind {
            Some(k) => k,
            None => {
                let named = pairs.iter().chain(&set).filter(|(k, _, _)| k == "kind").last();
                match named {
                    Some((_, v, _)) => v.parse().map_err(usage_from)?,
                    None => return Err(UsageError("no model kind: pass --model or set `kind`".into())),
                }
            }
        };
        if let Some(f) = file {
            for (name, entries) in &f.sections {
                if *name == kind.name() {
                    pairs.extend(entries.iter().map(|(k, v, _)| (k.clone(), v.clone(), true)));
                }
            }
        }
        pairs.extend(set);
        pairs.retain(|(k, _, _)| k != "kind");

        let mut model_pairs = vec![("kind".to_string(), kind.name().to_string())];
        let mut run = RunConfig {
            model: ModelConfig::defaults(kind),
            train: PathBuf::new(),
            test: None,
            held_out: None,
            test_fraction: None,
            deduplicate: false,
            embeddings: None,
            embeddings_format: VectorFormat::Word2VecText,
            train_embeddings: false,
            train_vectors: None,
            test_vectors: None,
            held_out_vectors: None,
            out: PathBuf::from("run"),
        };
        let mut train = None;
        for (k, v, from_file) in pairs {
            let path = || if from_file { base.join(&v) } else { PathBuf::from(&v) };
            let bad = |msg: &str| UsageError(format!("config error in field `{k}`: {msg}"));
            match k.as_str() {
                "train" => train = Some(path()),
                "test" => run.test = Some(path()),
                "held_out" => run.held_out = Some(path()),
                "test_fraction" => {
                    run.test_fraction = match v.as_str() {
                        "none" => None,
                        _ => Some(v.parse().map_err(|_| bad("not a number"))?),
                    }
                }
                "deduplicate" => run.deduplicate = v.parse().map_err(|_| bad("expected true or false"))?,
                "embeddings" => run.embeddings = Some(path()),
                "embeddings_format" => run.embeddings_format = v.parse().map_err(usage_from)?,
                "train_embeddings" => run.train_embeddings = v.parse().map_err(|_| bad("expected true or false"))?,
                "train_vectors" => run.train_vectors = Some(path()),
                "test_vectors" => run.test_vectors = Some(path()),
                "held_out_vectors" => run.held_out_vectors = Some(path()),
                "out" => run.out = path(),
                _ => model_pairs.push((k.clone(), v.clone())),
            }
        }
        run.model = ModelConfig::from_pairs(model_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .map_err(usage_from)?;
        if let Some(seed) = ov.seed {
            run.model.seed = seed;
        }
        if let Some(out) = &ov.out {
            run.out = out.clone();
        }
        if let Some(c) = &ov.corpus {
            train = Some(c.clone());
        }
        if let Some(e) = &ov.embeddings {
            run.embeddings = Some(e.clone());
        }
        run.train = train.ok_or_else(|| UsageError("no training corpus: pass --corpus or set `train`".into()))?;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        self.model.validate().map_err(usage_from)?;
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(UsageError("config error in field `test_fraction`: must be in (0, 1)".into()));
            }
        }
        if self.train_vectors.is_some() && self.embeddings.is_some() {
            return Err(UsageError(
                "config error in field `train_vectors`: cannot be combined with `embeddings`".into(),
            ));
        }
        if self.model.kind == ModelKind::Svm && self.train_vectors.is_some() {
            return Err(UsageError("config error in field `train_vectors`: svm needs a word table".into()));
        }
        let paths = [
            ("train", Some(&self.train)),
            ("test", self.test.as_ref()),
            ("held_out", self.held_out.as_ref()),
            ("embeddings", self.embeddings.as_ref()),
            ("train_vectors", self.train_vectors.as_ref()),
            ("test_vectors", self.test_vectors.as_ref()),
            ("held_out_vectors", self.held_out_vectors.as_ref()),
        ];
        for (field, p) in paths {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(UsageError(format!(
                        "config error in field `{field}`: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every setting as `key = value` lines, model keys first.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_pairs();
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        out.extend([
            ("train".into(), self.train.display().to_string()),
            ("test".into(), path(&self.test)),
            ("held_out".into(), path(&self.held_out)),
            (
                "test_fraction".into(),
                self.test_fraction.map_or("none".into(), |f| f.to_string()),
            ),
            ("deduplicate".into(), self.deduplicate.to_string()),
            ("embeddings".into(), path(&self.embeddings)),
            (
                "embeddings_format".into(),
                match self.embeddings_format {
                    VectorFormat::Word2VecText => "word2vec-text".into(),
                    VectorFormat::GloveText => "glove-text".into(),
                },
            ),
            ("train_embeddings".into(), self.train_embeddings.to_string()),
            ("train_vectors".into(), path(&self.train_vectors)),
            ("test_vectors".into(), path(&self.test_vectors)),
            ("held_out_vectors".into(), path(&self.held_out_vectors)),
            ("out".into(), self.out.display().to_string()),
        ]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_file(dir: &Path) -> PathBuf {
        let p = dir.join("train.iob");
        std::fs::write(&p, "#intent=a\nx\tO\n").unwrap();
        p
    }

    #[test]
    fn sections_apply_to_their_kind_only() {
        let dir = tempfile::tempdir().unwrap();
        corpus_file(dir.path());
        let text = "# run\nkind = unified\ntrain = train.iob\nhidden = 20\n\n[unified]\nhidden = 30\n[ner]\nhidden = 40\n";
        let file = parse_config_str(text).unwrap();
        let run = RunConfig::resolve(Some(&file), dir.path(), &Overrides::default()).unwrap();
        assert_eq!(run.model.hidden, 30);
        assert_eq!(run.train, dir.path().join("train.iob"));

        let ov = Overrides {
            kind: Some(ModelKind::Ner),
            seed: Some(9),
            ..Overrides::default()
        };
        let run = RunConfig::resolve(Some(&file), dir.path(), &ov).unwrap();
        assert_eq!((run.model.kind, run.model.hidden, run.model.seed), (ModelKind::Ner, 40, 9));
    }

    #[test]
    fn defaults_follow_the_kind() {
        let dir = tempfile::tempdir().unwrap();
        let ov = Overrides {
            kind: Some(ModelKind::JointBert),
            corpus: Some(corpus_file(dir.path())),
            ..Overrides::default()
        };
        let run = RunConfig::resolve(None, dir.path(), &ov).unwrap();
        assert_eq!(run.model.lr, 5e-5);
        assert_eq!(run.model.max_words, 35);
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = corpus_file(dir.path());
        let ov = |set: &[&str]| Overrides {
            kind: Some(ModelKind::Unified),
            corpus: Some(corpus.clone()),
            set: set.iter().map(|s| s.to_string()).collect(),
            ..Overrides::default()
        };
        let err = RunConfig::resolve(None, dir.path(), &ov(&["hidden=x"])).unwrap_err();
        assert!(err.0.contains("`hidden`"), "{err}");
        let err = RunConfig::resolve(None, dir.path(), &ov(&["test=missing.iob"])).unwrap_err();
        assert!(err.0.contains("`test`"), "{err}");
        let err = RunConfig::resolve(None, dir.path(), &ov(&["test_fraction=2"])).unwrap_err();
        assert!(err.0.contains("`test_fraction`"), "{err}");
        assert!(parse_config_str("[bogus]\n").is_err());
        assert!(parse_config_str("just words\n").is_err());
    }

    #[test]
    fn missing_corpus_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let ov = Overrides {
            kind: Some(ModelKind::Ner),
            corpus: Some(dir.path().join("nope.iob")),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(None, dir.path(), &ov).is_err());
    }
}
