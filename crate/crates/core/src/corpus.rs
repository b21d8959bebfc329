//! IOB-annotated intent corpora: parsing, normalization, deduplication,
//! splitting and span extraction.
//!
//! File format: blocks separated by a blank line. The first line of a block
//! is `#intent=<label>[#<label>...]`, every following line is
//! `<token>\t<IOB-tag>`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const INTENT_HEADER: &str = "#intent=";

/// A 32-sentence slot/intent corpus (4 intents, 6 entity types) bundled
/// for smoke tests and convergence checks.
pub const SYNTHETIC_CORPUS: &str = include_str!("../data/synthetic.iob");

/// Default cap on tokens per utterance.
pub const DEFAULT_MAX_WORDS: usize = 35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Language {
    En,
    El,
}

impl std::str::FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(Language::En),
            "el" | "gr" => Ok(Language::El),
            other => Err(Error::Argument(format!("unknown language `{other}`"))),
        }
    }
}

impl std::fmt::Display for Language {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Language::En => "en",
            Language::El => "el",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaggedSentence {
    /// Ordinal of the block in its source file; keys externally supplied
    /// per-token vectors.
    pub id: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Component intents of a (possibly composite) label, in file order.
    pub intents: Vec<String>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>, intents: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Argument("sentence has no tokens".into()));
        }
        if tokens.len() != tags.len() {
            return Err(Error::Argument(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        if intents.is_empty() {
            return Err(Error::Argument("sentence has no intent".into()));
        }
        for t in &tags {
            parse_tag(t).map_err(Error::Argument)?;
        }
        Ok(TaggedSentence {
            id: 0,
            tokens,
            tags,
            intents,
        })
    }

    /// The single class label used for training: components joined by `#`.
    pub fn intent_label(&self) -> String {
        self.intents.join("#")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Cut to at most `max` tokens, tags in lockstep. Returns whether
    /// anything was removed.
    pub fn truncate(&mut self, max: usize) -> bool {
        if self.tokens.len() <= max {
            return false;
        }
        self.tokens.truncate(max);
        self.tags.truncate(max);
        true
    }
}

/// Split a composite intent label such as `atis_flight#atis_airfare`.
pub fn split_intents(label: &str) -> Vec<String> {
    label
        .split('#')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagPrefix {
    Begin,
    Inside,
    Outside,
}

/// Split an IOB tag into prefix and entity type.
pub fn parse_tag(tag: &str) -> std::result::Result<(TagPrefix, &str), String> {
    if tag == "O" {
        return Ok((TagPrefix::Outside, ""));
    }
    let (prefix, etype) = match tag.split_once('-') {
        Some(("B", t)) => (TagPrefix::Begin, t),
        Some(("I", t)) => (TagPrefix::Inside, t),
        _ => return Err(format!("malformed IOB tag `{tag}`")),
    };
    if etype.is_empty() {
        return Err(format!("malformed IOB tag `{tag}`: empty type"));
    }
    Ok((prefix, etype))
}

/// Ordered label set with a reverse index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = LabelVocab::new();
        for l in labels {
            v.insert(l.into());
        }
        v
    }

    pub fn insert(&mut self, label: String) -> usize {
        if let Some(&i) = self.index.get(&label) {
            return i;
        }
        let i = self.labels.len();
        self.index.insert(label.clone(), i);
        self.labels.push(label);
        i
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<TaggedSentence>,
    pub tag_vocab: LabelVocab,
    pub intent_vocab: LabelVocab,
}

impl Corpus {
    /// Build a corpus, deriving vocabularies in first-appearance order.
    pub fn from_sentences(sentences: Vec<TaggedSentence>) -> Self {
        let mut tag_vocab = LabelVocab::new();
        let mut intent_vocab = LabelVocab::new();
        for s in &sentences {
            for t in &s.tags {
                tag_vocab.insert(t.clone());
            }
            intent_vocab.insert(s.intent_label());
        }
        Corpus {
            sentences,
            tag_vocab,
            intent_vocab,
        }
    }

    fn with_vocabs(&self, sentences: Vec<TaggedSentence>) -> Corpus {
        Corpus {
            sentences,
            tag_vocab: self.tag_vocab.clone(),
            intent_vocab: self.intent_vocab.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Lowercase (and for Greek strip accents from) every token.
    pub fn normalized(&self, language: Language) -> Corpus {
        let sentences = self
            .sentences
            .iter()
            .map(|s| TaggedSentence {
                tokens: s.tokens.iter().map(|t| normalize(t, language)).collect(),
                ..s.clone()
            })
            .collect();
        self.with_vocabs(sentences)
    }

    /// Truncate over-long sentences in place, logging a warning for each.
    pub fn truncate(&mut self, max_words: usize) -> usize {
        let mut count = 0;
        for s in &mut self.sentences {
            let n = s.len();
            if s.truncate(max_words) {
                log::warn!("sentence {} truncated from {} to {} tokens", s.id, n, max_words);
                count += 1;
            }
        }
        count
    }

    pub fn to_iob_string(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            write_sentence(&mut out, &s.intent_label(), &s.tokens, &s.tags);
        }
        out
    }
}

/// Append one corpus block (header plus token lines) to `out`.
pub fn write_sentence(out: &mut String, intent: &str, tokens: &[String], tags: &[String]) {
    let _ = writeln!(out, "{INTENT_HEADER}{intent}");
    for (tok, tag) in tokens.iter().zip(tags) {
        let _ = writeln!(out, "{tok}\t{tag}");
    }
}

pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus_str(&text)
}

pub fn parse_corpus_str(text: &str) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !block.is_empty() {
                let id = sentences.len();
                sentences.push(parse_block(&block, id)?);
                block.clear();
            }
        } else {
            block.push((i + 1, line));
        }
    }
    if !block.is_empty() {
        let id = sentences.len();
        sentences.push(parse_block(&block, id)?);
    }
    Ok(Corpus::from_sentences(sentences))
}

fn parse_block(block: &[(usize, &str)], id: usize) -> Result<TaggedSentence> {
    let (header_line, header) = block[0];
    let label = header
        .strip_prefix(INTENT_HEADER)
        .ok_or_else(|| Error::parse(header_line, format!("expected `{INTENT_HEADER}<label>` header")))?;
    let intents = split_intents(label.trim());
    if intents.is_empty() {
        return Err(Error::parse(header_line, "empty intent label"));
    }
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for &(line_no, line) in &block[1..] {
        let mut fields = line.split('\t');
        let token = fields.next().unwrap_or("");
        let tag = fields.next();
        if fields.next().is_some() {
            return Err(Error::parse(line_no, "more than two tab-separated fields"));
        }
        if token.is_empty() {
            return Err(Error::parse(line_no, "empty token"));
        }
        tokens.push(token.to_string());
        if let Some(tag) = tag {
            let tag = tag.trim();
            parse_tag(tag).map_err(|m| Error::parse(line_no, m))?;
            tags.push(tag.to_string());
        }
    }
    if tokens.is_empty() {
        return Err(Error::parse(header_line, "block has no tokens"));
    }
    if tokens.len() != tags.len() {
        return Err(Error::parse(
            header_line,
            format!("block has {} tokens but {} tags", tokens.len(), tags.len()),
        ));
    }
    Ok(TaggedSentence {
        id,
        tokens,
        tags,
        intents,
    })
}

pub fn normalize(token: &str, language: Language) -> String {
    let lower = token.to_lowercase();
    match language {
        Language::En => lower,
        Language::El => lower
            .nfd()
            .filter(|c| !is_combining_mark(*c))
            .nfc()
            .collect(),
    }
}

/// Keep the first occurrence of each (tokens, tags, intents) triple.
pub fn deduplicate(c: &Corpus) -> Corpus {
    let mut seen = HashSet::new();
    let sentences = c
        .sentences
        .iter()
        .filter(|s| seen.insert((&s.tokens, &s.tags, &s.intents)))
        .cloned()
        .collect();
    c.with_vocabs(sentences)
}

/// Seeded shuffle, then the first `n - round(f·n)` sentences train and the
/// rest test. Both halves keep the full label vocabularies.
pub fn split(c: &Corpus, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut shuffled = c.sentences.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_test = (test_fraction * c.len() as f64).round() as usize;
    let test = shuffled.split_off(c.len() - n_test);
    Ok((c.with_vocabs(shuffled), c.with_vocabs(test)))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Span {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub etype: String,
}

impl Span {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        Span {
            start,
            end,
            etype: etype.into(),
        }
    }
}

pub type SpanSet = Vec<Span>;

/// Maximal typed spans. An `I-X` that does not continue a span of type `X`
/// opens a new one (conlleval convention).
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> SpanSet {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, etype) = parse_tag(tag.as_ref()).unwrap_or((TagPrefix::Outside, ""));
        match prefix {
            TagPrefix::Outside => spans.extend(open.take()),
            TagPrefix::Begin => {
                spans.extend(open.take());
                open = Some(Span::new(i, i, etype));
            }
            TagPrefix::Inside => match open.as_mut() {
                Some(s) if s.etype == etype => s.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(Span::new(i, i, etype));
                }
            },
        }
    }
    spans.extend(open);
    spans
}

/// Canonical IOB encoding of non-overlapping spans over `len` tokens.
pub fn spans_to_tags(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for s in spans {
        tags[s.start] = format!("B-{}", s.etype);
        for t in &mut tags[s.start + 1..=s.end] {
            *t = format!("I-{}", s.etype);
        }
    }
    tags
}
