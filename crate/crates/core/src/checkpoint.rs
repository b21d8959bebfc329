//! Model checkpoints: a text manifest (`model.manifest`) describing the
//! model, its vocabularies and every parameter tensor, plus a payload
//! (`model.bin`) of little-endian `f32` values in manifest order.
//!
//! Values are narrowed to `f32` on save, so a loaded model is the saved
//! model rounded to single precision. Saving a loaded model reproduces both
//! files byte for byte.

use std::fs;
use std::path::Path;

use crate::corpus::LabelVocab;
use crate::embeddings::{random_table, EmbeddingTable};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, Vocabularies, WordSource};
use crate::numerics::{ParamTensor, Parameterized};

pub const MANIFEST_FILE: &str = "model.manifest";
pub const PAYLOAD_FILE: &str = "model.bin";
const MAGIC: &str = "slotintent-checkpoint 1";

/// A model together with everything needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabularies,
    pub model: Model,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next() {
            Some('\\') => '\\',
            Some('s') => ' ',
            Some('t') => '\t',
            Some('n') => '\n',
            Some('r') => '\r',
            other => return Err(Error::Checkpoint(format!("bad escape `\\{}` in `{s}`", other.unwrap_or(' ')))),
        });
    }
    Ok(out)
}

fn input_words(model: &Model) -> &WordSource {
    match model {
        Model::Ner(m) => &m.input.words,
        Model::Unified(m) => &m.input.words,
        Model::JointBert(m) => &m.input.words,
        Model::CoInteractive(m) => &m.input.words,
        Model::Svm(_) => unreachable!("svm keeps its table directly"),
    }
}

fn word_table(model: &Model) -> Option<&EmbeddingTable> {
    match model {
        Model::Svm(m) => Some(&m.table),
        other => match input_words(other) {
            WordSource::Table(t) => Some(t),
            WordSource::External(_) => None,
        },
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn new(config: ModelConfig, vocab: Vocabularies, model: Model) -> Self {
        Checkpoint { config, vocab, model }
    }

    /// The manifest text and the payload bytes.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut m = String::new();
        m.push_str(MAGIC);
        m.push('\n');
        m.push_str("[config]\n");
        for (k, v) in self.config.to_pairs() {
            m.push_str(&format!("{k} = {v}\n"));
        }
        m.push_str("[input]\n");
        match word_table(&self.model) {
            Some(t) => {
                m.push_str(&format!("words = table {}\n", t.dim()));
                for w in t.words() {
                    m.push_str(&format!("table_word {}\n", escape(w)));
                }
            }
            None => {
                let d = input_words(&self.model).dim();
                m.push_str(&format!("words = external {d}\n"));
            }
        }
        m.push_str("[vocab]\n");
        for t in self.vocab.tags.labels() {
            m.push_str(&format!("tag {}\n", escape(t)));
        }
        for i in self.vocab.intents.labels() {
            m.push_str(&format!("intent {}\n", escape(i)));
        }
        for w in &self.vocab.words {
            m.push_str(&format!("word {}\n", escape(w)));
        }
        for c in &self.vocab.chars {
            m.push_str(&format!("char {}\n", *c as u32));
        }
        m.push_str("[frozen]\n");
        for p in self.model.params() {
            if p.frozen {
                m.push_str(&format!("{}\n", p.name));
            }
        }
        m.push_str("[params]\n");
        let mut payload = Vec::new();
        for p in self.model.params() {
            m.push_str(&format!("{} {} f32 {}\n", p.name, shape_text(p.value.shape()), payload.len()));
            for v in p.value.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        m.push_str(&format!("[end]\npayload_bytes = {}\n", payload.len()));
        (m, payload)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (manifest, payload) = self.encode();
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        fs::write(dir.join(PAYLOAD_FILE), payload)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            fs::read(dir.join(name))
                .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let manifest = String::from_utf8(read(MANIFEST_FILE)?)
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        Self::decode(&manifest, &read(PAYLOAD_FILE)?)
    }

    pub fn decode(manifest: &str, payload: &[u8]) -> Result<Checkpoint> {
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("manifest line {}: {msg}", line + 1));
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(Error::Checkpoint("not a checkpoint manifest".into())),
        }

        let mut section = "";
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut words_spec: Option<(String, usize)> = None;
        let mut table_words = Vec::new();
        let (mut tags, mut intents, mut words, mut chars) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut frozen = Vec::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut payload_bytes = None;

        for (no, line) in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name {
                    "config" | "input" | "vocab" | "frozen" | "params" | "end" => name,
                    _ => return Err(bad(no, "unknown section")),
                };
                continue;
            }
            match section {
                "config" | "end" | "input" if line.contains(" = ") => {
                    let (k, v) = line.split_once(" = ").expect("checked");
                    match (section, k) {
                        ("config", _) => pairs.push((k.to_string(), v.to_string())),
                        ("end", "payload_bytes") => {
                            payload_bytes = Some(v.parse::<usize>().map_err(|_| bad(no, "bad payload size"))?)
                        }
                        ("input", "words") => {
                            let (kind, dim) = v.split_once(' ').ok_or_else(|| bad(no, "bad word source"))?;
                            let dim = dim.parse().map_err(|_| bad(no, "bad word dimension"))?;
                            words_spec = Some((kind.to_string(), dim));
                        }
                        _ => return Err(bad(no, "unexpected key")),
                    }
                }
                "input" => {
                    let w = line.strip_prefix("table_word ").ok_or_else(|| bad(no, "expected table_word"))?;
                    table_words.push(unescape(w)?);
                }
                "vocab" => {
                    let (kind, value) = line.split_once(' ').ok_or_else(|| bad(no, "bad vocab line"))?;
                    match kind {
                        "tag" => tags.push(unescape(value)?),
                        "intent" => intents.push(unescape(value)?),
                        "word" => words.push(unescape(value)?),
                        "char" => chars.push(
                            value
                                .parse::<u32>()
                                .ok()
                                .and_then(char::from_u32)
                                .ok_or_else(|| bad(no, "bad character code"))?,
                        ),
                        _ => return Err(bad(no, "unknown vocab entry")),
                    }
                }
                "frozen" => frozen.push(line.to_string()),
                "params" => {
                    let f: Vec<&str> = line.split(' ').collect();
                    if f.len() != 4 || f[2] != "f32" {
                        return Err(bad(no, "expected `name shape f32 offset`"));
                    }
                    let shape = f[1]
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(no, "bad shape"))?;
                    let offset = f[3].parse().map_err(|_| bad(no, "bad offset"))?;
                    entries.push((f[0].to_string(), shape, offset));
                }
                _ => return Err(bad(no, "line outside a section")),
            }
        }

        if payload_bytes != Some(payload.len()) {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, manifest expects {:?}",
                payload.len(),
                payload_bytes
            )));
        }
        let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let vocab = Vocabularies {
            tags: LabelVocab::from_labels(tags),
            intents: LabelVocab::from_labels(intents),
            words,
            chars,
        };
        let source = match words_spec {
            Some((kind, dim)) if kind == "table" => {
                // placeholder values, overwritten from the payload below
                WordSource::Table(random_table(&table_words, dim, 0)?)
            }
            Some((kind, dim)) if kind == "external" => WordSource::External(dim),
            _ => return Err(Error::Checkpoint("missing or unknown word source".into())),
        };
        let mut model = Model::build(&config, &vocab, source)?;

        let mut params = model.params_mut();
        if params.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, the model has {}",
                entries.len(),
                params.len()
            )));
        }
        for (p, (name, shape, offset)) in params.iter_mut().zip(&entries) {
            restore(p, name, shape, *offset, payload)?;
            p.frozen = frozen.iter().any(|f| f == name);
        }
        Ok(Checkpoint { config, vocab, model })
    }
}

fn restore(p: &mut ParamTensor, name: &str, shape: &[usize], offset: usize, payload: &[u8]) -> Result<()> {
    if p.name != name || p.value.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` {shape:?} does not match model tensor `{}` {:?}",
            p.name,
            p.value.shape()
        )));
    }
    let end = offset + 4 * p.value.len();
    let bytes = payload
        .get(offset..end)
        .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past the payload")))?;
    for (v, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    p.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{tiny_config, tiny_fixture, CharComposerKind, ModelKind};
    use proptest::prelude::*;

    fn fixture(kind: ModelKind, composer: CharComposerKind, crf: bool) -> Checkpoint {
        let config = tiny_config(kind, composer, crf, 21);
        let (model, _) = tiny_fixture(&config).unwrap();
        let vocab = {
            let corpus = crate::corpus::parse_corpus_str(
                "#intent=book\nfly\tO\nto\tO\nnew\tB-city\nyork\tI-city\n\n#intent=ask\nweather\tO\nin\tO\nrome\tB-city\ntoday\tB-date\n",
            )
            .unwrap();
            Vocabularies::from_corpus(&corpus, &[], None)
        };
        Checkpoint::new(config, vocab, model)
    }

    #[test]
    fn save_load_save_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ModelKind::ALL {
            for (composer, crf) in [(CharComposerKind::None, false), (CharComposerKind::Cnn, true)] {
                let ck = fixture(kind, composer, crf);
                let (m1, p1) = ck.encode();
                let path = dir.path().join(format!("{kind}-{crf}"));
                ck.save(&path).unwrap();
                let loaded = Checkpoint::load(&path).unwrap();
                let (m2, p2) = loaded.encode();
                assert_eq!(m1, m2, "{kind}");
                assert_eq!(p1, p2, "{kind}");
                assert_eq!(loaded.config, ck.config);
                assert_eq!(loaded.vocab, ck.vocab);
                for (a, b) in ck.model.params().iter().zip(loaded.model.params()) {
                    assert_eq!(a.frozen, b.frozen, "{}", a.name);
                    for (x, y) in a.value.data().iter().zip(b.value.data()) {
                        assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn manifest_lines_describe_the_payload() {
        let ck = fixture(ModelKind::Unified, CharComposerKind::None, false);
        let (m, p) = ck.encode();
        let params: Vec<&str> = m
            .lines()
            .skip_while(|l| *l != "[params]")
            .skip(1)
            .take_while(|l| *l != "[end]")
            .collect();
        assert_eq!(params.len(), ck.model.params().len());
        let mut expected = 0;
        for (line, param) in params.iter().zip(ck.model.params()) {
            let f: Vec<&str> = line.split(' ').collect();
            assert_eq!(f[0], param.name);
            assert_eq!(f[2], "f32");
            assert_eq!(f[3].parse::<usize>().unwrap(), expected);
            expected += 4 * param.value.len();
        }
        assert_eq!(p.len(), expected);
        assert!(m.contains("kind = unified\n"));
        assert!(m.contains("seed = 21\n"));
    }

    #[test]
    fn svm_table_stays_frozen() {
        let ck = fixture(ModelKind::Svm, CharComposerKind::None, false);
        let (m, _) = ck.encode();
        assert!(m.contains("[frozen]\nword.vectors\nword.unk\nsvm.center\nsvm.scale\n"));
        let loaded = Checkpoint::decode(&m, &ck.encode().1).unwrap();
        assert!(loaded.model.params().iter().filter(|p| p.name.starts_with("word")).all(|p| p.frozen));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ck = fixture(ModelKind::Ner, CharComposerKind::None, false);
        let (m, p) = ck.encode();
        assert!(Checkpoint::decode(&m, &p[..p.len() - 4]).is_err());
        assert!(Checkpoint::decode("garbage\n", &p).is_err());
        let renamed = m.replace("emission.weight", "emission.w");
        assert!(matches!(Checkpoint::decode(&renamed, &p), Err(Error::Checkpoint(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn escaping_round_trips(s in "\\PC*") {
            prop_assert_eq!(unescape(&escape(&s)).unwrap(), s.clone());
            prop_assert!(!escape(&s).contains(' '));
        }
    }
}
