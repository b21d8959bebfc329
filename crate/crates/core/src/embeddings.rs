//! Word and character vector tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamTensor, Parameterized, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorFormat {
    /// First line `<count> <dim>`, then `<word> <f>...`.
    Word2VecText,
    /// No header; dimension taken from the first row.
    GloveText,
}

impl std::str::FromStr for VectorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word2vec" | "word2vec-text" => Ok(VectorFormat::Word2VecText),
            "glove" | "glove-text" => Ok(VectorFormat::GloveText),
            other => Err(Error::Argument(format!("unknown vector format `{other}`"))),
        }
    }
}

/// Word → vector table with a single shared out-of-vocabulary vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    /// `|words| × dim`; a `0 × dim` table is stored as `None`.
    vectors: Option<ParamTensor>,
    unk: ParamTensor,
}

impl EmbeddingTable {
    /// Assemble a table from rows. `unk` defaults to the row mean.
    pub fn from_rows(
        prefix: &str,
        words: Vec<String>,
        rows: Vec<Vec<f64>>,
        unk: Option<Vec<f64>>,
        dim: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("embedding dimension must be positive".into()));
        }
        if words.len() != rows.len() {
            return Err(Error::shape("word and row counts differ"));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape(format!("every row must have width {dim}")));
        }
        let unk = unk.unwrap_or_else(|| mean_rows(&rows, dim));
        if unk.len() != dim {
            return Err(Error::shape("unk vector width"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            index.entry(w.clone()).or_insert(i);
        }
        let vectors = if rows.is_empty() {
            None
        } else {
            Some(ParamTensor::new(
                format!("{prefix}.vectors"),
                Tensor::new(vec![rows.len(), dim], rows.concat())?,
            ))
        };
        Ok(EmbeddingTable {
            words,
            index,
            vectors,
            unk: ParamTensor::new(format!("{prefix}.unk"), Tensor::vector(unk)),
        })
    }

    pub fn dim(&self) -> usize {
        self.unk.value.len()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_frozen(&self) -> bool {
        self.vectors.as_ref().map(|v| v.frozen).unwrap_or(false)
    }

    /// Freeze (or unfreeze) the per-word vectors. The unk vector always trains.
    pub fn set_frozen(&mut self, frozen: bool) {
        if let Some(v) = self.vectors.as_mut() {
            v.frozen = frozen;
        }
    }

    /// Freeze the per-word vectors and the unk vector.
    pub fn freeze_all(&mut self) {
        self.set_frozen(true);
        self.unk.frozen = true;
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Exact-match vector, else the unk vector.
    pub fn lookup(&self, token: &str) -> &[f64] {
        match self.index_of(token) {
            Some(i) => self.row(i),
            None => self.unk_vector(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.as_ref().expect("row of an empty table").value.row(i)
    }

    pub fn unk_vector(&self) -> &[f64] {
        self.unk.value.data()
    }

    /// Accumulate a gradient into the row for `index` (`None` = unk).
    pub fn accumulate_grad(&mut self, index: Option<usize>, grad: &[f64]) {
        let target = match index {
            Some(i) => {
                let v = self.vectors.as_mut().expect("row of an empty table");
                if v.frozen {
                    return;
                }
                v.grad.row_mut(i)
            }
            None => self.unk.grad.data_mut(),
        };
        for (t, g) in target.iter_mut().zip(grad) {
            *t += g;
        }
    }

    /// Keep only `vocab` words (in the given order) that the table knows.
    pub fn restrict_to<'a, I>(&self, prefix: &str, vocab: I) -> Result<EmbeddingTable>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = Vec::new();
        let mut rows = Vec::new();
        for w in vocab {
            if let Some(i) = self.index_of(w) {
                words.push(w.to_string());
                rows.push(self.row(i).to_vec());
            }
        }
        let mut t = EmbeddingTable::from_rows(
            prefix,
            words,
            rows,
            Some(self.unk_vector().to_vec()),
            self.dim(),
        )?;
        t.set_frozen(self.is_frozen());
        Ok(t)
    }

    /// Serialize as word2vec-text (header `<count> <dim>`).
    pub fn to_word2vec_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.len(), self.dim());
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in self.row(i) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

impl Parameterized for EmbeddingTable {
    fn params(&self) -> Vec<&ParamTensor> {
        self.vectors.iter().chain(std::iter::once(&self.unk)).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.vectors.iter_mut().chain(std::iter::once(&mut self.unk)).collect()
    }
}

fn mean_rows(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    if rows.is_empty() {
        return mean;
    }
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn parse_floats(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("non-numeric field `{f}`")))
        })
        .collect()
}

pub fn load_vectors(path: impl AsRef<Path>, format: VectorFormat) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path)?;
    read_vectors(BufReader::new(file), format)
}

/// Parse a text vector file. The resulting table is frozen.
pub fn read_vectors<R: BufRead>(reader: R, format: VectorFormat) -> Result<EmbeddingTable> {
    let mut lines = reader.lines().enumerate();
    let mut dim: Option<usize> = None;
    let mut expected_rows: Option<usize> = None;
    if format == VectorFormat::Word2VecText {
        let (i, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing word2vec header"))?;
        let header = header?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let parsed: Option<(usize, usize)> = match parts.as_slice() {
            [count, d] => count.parse().ok().zip(d.parse().ok()),
            _ => None,
        };
        let (count, d) = parsed.ok_or_else(|| Error::parse(i + 1, "header must be `<count> <dim>`"))?;
        if d == 0 {
            return Err(Error::parse(i + 1, "dimension must be positive"));
        }
        dim = Some(d);
        expected_rows = Some(count);
    }

    let mut words = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let width = fields.len() - 1;
        match dim {
            None => {
                if width == 0 {
                    return Err(Error::parse(line_no, "row has no vector components"));
                }
                dim = Some(width);
            }
            Some(d) if d != width => {
                return Err(Error::parse(
                    line_no,
                    format!("row has {width} components, expected {d}"),
                ))
            }
            _ => {}
        }
        rows.push(parse_floats(&fields[1..], line_no)?);
        words.push(fields[0].to_string());
    }
    if let Some(n) = expected_rows {
        if n != rows.len() {
            log::warn!("word2vec header announces {n} rows, file has {}", rows.len());
        }
    }
    let dim = dim.ok_or_else(|| Error::parse(1, "empty vector file"))?;
    let mut table = EmbeddingTable::from_rows("word", words, rows, None, dim)?;
    table.set_frozen(true);
    Ok(table)
}

/// Arithmetic mean of the per-token lookups.
pub fn sentence_mean<S: AsRef<str>>(table: &EmbeddingTable, tokens: &[S]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Argument("sentence_mean of an empty sentence".into()));
    }
    Ok(mean_of(tokens.iter().map(|t| table.lookup(t.as_ref())), table.dim()))
}

pub(crate) fn mean_of<'a, I: Iterator<Item = &'a [f64]>>(vectors: I, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n.max(1) as f64);
    sum
}

/// Uniform draw in `[−0.5/dim, 0.5/dim]`.
fn random_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let bound = 0.5 / dim as f64;
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect())
        .collect()
}

/// Trainable word table over `words`, entries drawn uniformly in
/// `[−0.5/dim, 0.5/dim]`.
pub fn random_table(words: &[String], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Argument("embedding dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = random_rows(words.len(), dim, &mut rng);
    let unk = random_rows(1, dim, &mut rng).pop();
    EmbeddingTable::from_rows("word", words.to_vec(), rows, unk, dim)
}

/// Character embeddings with a dedicated unknown-character row. The padding
/// character embeds to the zero vector and has no row.
#[derive(Clone, Debug, PartialEq)]
pub struct CharTable {
    chars: Vec<char>,
    index: HashMap<char, usize>,
    /// `(|chars| + 1) × dim`; the last row is the unknown character.
    pub vectors: ParamTensor,
}

/// Marker id for the padding character in composed id sequences.
pub const PAD_CHAR: usize = usize::MAX;

impl CharTable {
    pub fn random(prefix: &str, chars: &[char], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("character dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(chars.len() + 1, dim, &mut rng);
        Ok(Self::from_parts(
            chars.to_vec(),
            ParamTensor::new(
                format!("{prefix}.chars"),
                Tensor::matrix(chars.len() + 1, dim, rows.concat()),
            ),
        ))
    }

    pub(crate) fn from_parts(chars: Vec<char>, vectors: ParamTensor) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        CharTable {
            chars,
            index,
            vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.value.cols()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn unk_index(&self) -> usize {
        self.chars.len()
    }

    pub fn index_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(self.unk_index())
    }

    /// Character ids of `word`, truncated to `max_chars`.
    pub fn encode(&self, word: &str, max_chars: usize) -> Vec<usize> {
        word.chars().take(max_chars).map(|c| self.index_of(c)).collect()
    }

    pub fn vector(&self, id: usize) -> Option<&[f64]> {
        (id != PAD_CHAR).then(|| self.vectors.value.row(id))
    }

    pub fn accumulate_grad(&mut self, id: usize, grad: &[f64]) {
        if id == PAD_CHAR {
            return;
        }
        for (t, g) in self.vectors.grad.row_mut(id).iter_mut().zip(grad) {
            *t += g;
        }
    }
}

impl Parameterized for CharTable {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.vectors]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.vectors]
    }
}

/// Externally computed per-token vectors keyed by (sentence id, token index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextualVectors {
    dim: usize,
    vectors: HashMap<(usize, usize), Vec<f64>>,
}

impl ContextualVectors {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, sentence: usize, token: usize) -> Option<&[f64]> {
        self.vectors.get(&(sentence, token)).map(Vec::as_slice)
    }
}

pub fn load_contextual(path: impl AsRef<Path>) -> Result<ContextualVectors> {
    let file = std::fs::File::open(path)?;
    read_contextual(BufReader::new(file))
}

/// Lines of `<sentence_id>\t<token_index>\t<f>...` (components may be
/// tab- or space-separated).
pub fn read_contextual<R: BufRead>(reader: R) -> Result<ContextualVectors> {
    let mut out = ContextualVectors::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let sid = parts.next().and_then(|s| s.trim().parse::<usize>().ok());
        let tid = parts.next().and_then(|s| s.trim().parse::<usize>().ok());
        let (sid, tid) = sid
            .zip(tid)
            .ok_or_else(|| Error::parse(line_no, "expected `<sentence_id>\\t<token_index>\\t<floats>`"))?;
        let rest: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
        let v = parse_floats(&rest, line_no)?;
        if v.is_empty() {
            return Err(Error::parse(line_no, "row has no vector components"));
        }
        if out.dim == 0 {
            out.dim = v.len();
        } else if out.dim != v.len() {
            return Err(Error::parse(
                line_no,
                format!("row has {} components, expected {}", v.len(), out.dim),
            ));
        }
        out.vectors.insert((sid, tid), v);
    }
    Ok(out)
}
