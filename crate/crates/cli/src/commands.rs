use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use slotintent::checkpoint::Checkpoint;
use slotintent::corpus::{deduplicate, extract_spans, parse_corpus, split, write_sentence, Corpus, Language};
use slotintent::embeddings::{load_contextual, load_vectors, random_table, ContextualVectors};
use slotintent::evaluation::{evaluate, MetricsReport, PredictedSentence};
use slotintent::models::{
    gradcheck_model, tiny_config, tiny_fixture, train, CharComposerKind, EpochLog, Example, Model, ModelKind,
    TrainOptions, Vocabularies, WordSource, GRADCHECK_TOLERANCE,
};

use crate::config::RunConfig;
use crate::UsageError;

/// Intent header written by `predict` for models that do not classify.
pub const NO_INTENT: &str = "none";

pub const RUN_MANIFEST: &str = "run.manifest";
pub const EPOCH_LOG: &str = "epochs.tsv";

fn require_file(field: &str, p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(UsageError(format!("{field}: {} does not exist", p.display())).into());
    }
    Ok(())
}

fn load_corpus(path: &Path, language: Language, max_words: usize) -> Result<Corpus> {
    let raw = parse_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let mut c = raw.normalized(language);
    let cut = c.truncate(max_words);
    if cut > 0 {
        log::warn!("{}: {cut} sentences truncated to {max_words} tokens", path.display());
    }
    Ok(c)
}

fn load_vectors_file(path: Option<&PathBuf>) -> Result<Option<ContextualVectors>> {
    path.map(|p| load_contextual(p).with_context(|| format!("reading vectors {}", p.display())))
        .transpose()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Model output for every example, as label strings.
pub fn predict_examples(model: &Model, vocab: &Vocabularies, examples: &[Example]) -> Result<Vec<PredictedSentence>> {
    examples
        .iter()
        .map(|ex| {
            let p = model.predict(ex)?;
            let label = |v: &slotintent::corpus::LabelVocab, i: usize| v.label(i).unwrap_or("?").to_string();
            Ok(PredictedSentence {
                tags: p.tags.map(|t| t.iter().map(|&i| label(&vocab.tags, i)).collect()),
                intent: p.intent.map(|i| label(&vocab.intents, i)),
            })
        })
        .collect()
}

fn score(ck: &Checkpoint, corpus: &Corpus, vectors: Option<&ContextualVectors>) -> Result<MetricsReport> {
    let examples = ck.vocab.examples(corpus, vectors)?;
    let preds = predict_examples(&ck.model, &ck.vocab, &examples)?;
    Ok(evaluate(&corpus.sentences, &preds)?)
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    fs::write(dir.join(format!("{stem}.txt")), report.to_text())?;
    fs::write(dir.join(format!("{stem}.json")), report.to_json() + "\n")?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub train_metrics: MetricsReport,
    pub test_metrics: Option<MetricsReport>,
}

/// Train, save the checkpoint, run manifest and epoch log into `run.out`,
/// then score the saved checkpoint on the training (and test) data.
pub fn train_command(run: &RunConfig) -> Result<TrainOutcome> {
    let cfg = &run.model;
    let mut corpus = load_corpus(&run.train, cfg.language, cfg.max_words)?;
    if run.deduplicate {
        let before = corpus.len();
        corpus = deduplicate(&corpus);
        log::info!("removed {} duplicate sentences", before - corpus.len());
    }
    let train_ctx = load_vectors_file(run.train_vectors.as_ref())?;
    let (train_c, test_c, test_ctx) = match (&run.test, run.test_fraction) {
        (Some(p), _) => (
            corpus,
            Some(load_corpus(p, cfg.language, cfg.max_words)?),
            load_vectors_file(run.test_vectors.as_ref())?,
        ),
        (None, Some(f)) => {
            let (a, b) = split(&corpus, f, cfg.seed)?;
            (a, Some(b), train_ctx.clone())
        }
        (None, None) => (corpus, None, None),
    };
    let held_c = run
        .held_out
        .as_ref()
        .map(|p| load_corpus(p, cfg.language, cfg.max_words))
        .transpose()?;
    let held_ctx = load_vectors_file(run.held_out_vectors.as_ref())?;

    let pretrained = run
        .embeddings
        .as_ref()
        .map(|p| load_vectors(p, run.embeddings_format).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let extra: Vec<&Corpus> = test_c.iter().chain(held_c.iter()).collect();
    let mut vocab = Vocabularies::from_corpus(&train_c, &extra, pretrained.as_ref());
    for c in &extra {
        for s in &c.sentences {
            for t in &s.tags {
                vocab.tags.insert(t.clone());
            }
            vocab.intents.insert(s.intent_label());
        }
    }
    let words = match (&pretrained, &train_ctx) {
        (Some(table), _) => {
            let mut t = table.restrict_to("word", vocab.words.iter().map(String::as_str))?;
            t.set_frozen(!run.train_embeddings);
            log::info!("{} of {} words have pretrained vectors", t.len(), vocab.words.len());
            WordSource::Table(t)
        }
        (None, Some(cv)) => WordSource::External(cv.dim()),
        (None, None) => WordSource::Table(random_table(&vocab.words, cfg.word_dim, cfg.seed)?),
    };

    let train_ex = vocab.examples(&train_c, train_ctx.as_ref())?;
    let held_ex = match &held_c {
        Some(c) => Some(vocab.examples(c, held_ctx.as_ref())?),
        None => None,
    };
    let mut model = Model::build(cfg, &vocab, words)?;
    log::info!(
        "training {} on {} sentences ({} parameters)",
        cfg.kind,
        train_ex.len(),
        slotintent::numerics::Parameterized::num_scalars(&model)
    );
    let epochs = train(&mut model, &train_ex, held_ex.as_deref(), &TrainOptions::from_config(cfg))?;

    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    Checkpoint::new(cfg.clone(), vocab, model).save(&run.out)?;
    write_run_manifest(run, &train_c, test_c.as_ref(), held_c.as_ref())?;
    let mut log_text = String::from("epoch\ttrain_loss\theld_out_loss\n");
    for e in &epochs {
        let held = e.held_out_loss.map_or("none".to_string(), |l| l.to_string());
        let _ = writeln!(log_text, "{}\t{}\t{}", e.epoch, e.train_loss, held);
    }
    fs::write(run.out.join(EPOCH_LOG), log_text)?;

    // score what was written, so these numbers match a later `evaluate`
    let saved = Checkpoint::load(&run.out)?;
    let train_metrics = score(&saved, &train_c, train_ctx.as_ref())?;
    write_report(&run.out, "train_metrics", &train_metrics)?;
    let test_metrics = match &test_c {
        Some(c) if !c.is_empty() => {
            let r = score(&saved, c, test_ctx.as_ref())?;
            write_report(&run.out, "test_metrics", &r)?;
            Some(r)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        epochs,
        train_metrics,
        test_metrics,
    })
}

fn write_run_manifest(run: &RunConfig, train_c: &Corpus, test_c: Option<&Corpus>, held_c: Option<&Corpus>) -> Result<()> {
    let mut m = String::from("slotintent-run 1\n[config]\n");
    for (k, v) in run.echo().into_iter().filter(|(k, _)| k != "out") {
        let _ = writeln!(m, "{k} = {v}");
    }
    m.push_str("[data]\n");
    let _ = writeln!(m, "seed = {}", run.model.seed);
    let _ = writeln!(m, "train.sha256 = {}", sha256_file(&run.train)?);
    let _ = writeln!(m, "train.sentences = {}", train_c.len());
    if let Some(t) = test_c {
        let source = match &run.test {
            Some(p) => sha256_file(p)?,
            None => "split".to_string(),
        };
        let _ = writeln!(m, "test.sha256 = {source}");
        let _ = writeln!(m, "test.sentences = {}", t.len());
    }
    if let (Some(h), Some(p)) = (held_c, &run.held_out) {
        let _ = writeln!(m, "held_out.sha256 = {}", sha256_file(p)?);
        let _ = writeln!(m, "held_out.sentences = {}", h.len());
    }
    if let Some(p) = &run.embeddings {
        let _ = writeln!(m, "embeddings.sha256 = {}", sha256_file(p)?);
    }
    fs::write(run.out.join(RUN_MANIFEST), m)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(UsageError(format!("checkpoint: {} is not a directory", dir.display())).into());
    }
    Ok(Checkpoint::load(dir)?)
}

/// Score a checkpoint on a corpus; with `out`, also write `metrics.txt` and `metrics.json` there.
pub fn evaluate_command(checkpoint: &Path, corpus: &Path, vectors: Option<&Path>, out: Option<&Path>) -> Result<MetricsReport> {
    require_file("corpus", corpus)?;
    let ck = load_checkpoint(checkpoint)?;
    let c = load_corpus(corpus, ck.config.language, ck.config.max_words)?;
    if c.is_empty() {
        return Err(UsageError(format!("corpus: {} has no sentences", corpus.display())).into());
    }
    let ctx = load_vectors_file(vectors.map(Path::to_path_buf).as_ref())?;
    let report = score(&ck, &c, ctx.as_ref())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_report(dir, "metrics", &report)?;
    }
    Ok(report)
}

/// Tag whitespace-tokenized lines, one sentence per line, in corpus format.
/// Blank lines are skipped with a warning.
pub fn predict_command(checkpoint: &Path, lines: &[String], vectors: Option<&Path>) -> Result<String> {
    let ck = load_checkpoint(checkpoint)?;
    let ctx = load_vectors_file(vectors.map(Path::to_path_buf).as_ref())?;
    let mut out = String::new();
    let mut id = 0;
    for (no, line) in lines.iter().enumerate() {
        let mut raw: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if raw.is_empty() {
            log::warn!("input line {} is empty, skipped", no + 1);
            continue;
        }
        if raw.len() > ck.config.max_words {
            log::warn!("input line {} truncated from {} to {} tokens", no + 1, raw.len(), ck.config.max_words);
            raw.truncate(ck.config.max_words);
        }
        let tokens: Vec<String> = raw
            .iter()
            .map(|t| slotintent::corpus::normalize(t, ck.config.language))
            .collect();
        let ex = ck.vocab.unlabeled(id, &tokens, ctx.as_ref())?;
        id += 1;
        let pred = predict_examples(&ck.model, &ck.vocab, std::slice::from_ref(&ex))?.remove(0);
        let tags = pred.tags.unwrap_or_else(|| vec!["O".to_string(); raw.len()]);
        let intent = pred.intent.unwrap_or_else(|| NO_INTENT.to_string());
        if !out.is_empty() {
            out.push('\n');
        }
        write_sentence(&mut out, &intent, &raw, &tags);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub text: String,
    pub passed: bool,
}

/// Tiny variants of a kind checked by the `gradcheck` command.
pub fn gradcheck_variants(kind: ModelKind) -> Vec<(CharComposerKind, bool)> {
    use CharComposerKind::*;
    match kind {
        ModelKind::Ner | ModelKind::Unified => vec![(None, false), (Cnn, false), (Lstm, false)],
        ModelKind::Svm => vec![(None, false)],
        ModelKind::JointBert | ModelKind::CoInteractive => vec![(None, false), (None, true)],
    }
}

/// Finite-difference check of every parameter group of tiny `kind`
/// models. `perturb` is added to every analytic gradient (test fixture).
pub fn gradcheck_command(kind: ModelKind, seed: u64, perturb: f64) -> Result<GradcheckOutcome> {
    let mut text = String::new();
    let mut passed = true;
    for (composer, crf) in gradcheck_variants(kind) {
        let config = tiny_config(kind, composer, crf, seed);
        let (mut model, examples) = tiny_fixture(&config)?;
        let report = gradcheck_model(&mut model, &examples, seed, perturb)?;
        let _ = writeln!(text, "{kind} chars={composer} crf={crf} seed={seed}");
        for p in &report.params {
            let _ = writeln!(text, "  {:<32} {:>6} {:.3e}", p.name, p.scalars, p.max_rel_error);
        }
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            text,
            "  max_rel_error {:.3e} (tolerance {:.0e}) {verdict}",
            report.max_rel_error, GRADCHECK_TOLERANCE
        );
        passed &= report.passed();
    }
    let _ = writeln!(text, "result: {}", if passed { "PASS" } else { "FAIL" });
    Ok(GradcheckOutcome { text, passed })
}

/// Corpus summary as `key: value` lines.
pub fn data_stats_command(path: &Path, language: Language, max_words: usize) -> Result<String> {
    require_file("corpus", path)?;
    let raw = parse_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let c = raw.normalized(language);
    let lengths: Vec<usize> = c.sentences.iter().map(|s| s.len()).collect();
    let tokens: usize = lengths.iter().sum();
    let mut vocab = std::collections::BTreeSet::new();
    let mut intents: BTreeMap<&str, usize> = BTreeMap::new();
    let mut entities: BTreeMap<String, usize> = BTreeMap::new();
    for s in &c.sentences {
        vocab.extend(s.tokens.iter().map(String::as_str));
        for i in &s.intents {
            *intents.entry(i).or_default() += 1;
        }
        for span in extract_spans(&s.tags) {
            *entities.entry(span.etype).or_default() += 1;
        }
    }
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}: {v}");
    };
    kv("sentences", c.len().to_string());
    kv("tokens", tokens.to_string());
    kv("vocabulary", vocab.len().to_string());
    let mean = if c.is_empty() { 0.0 } else { tokens as f64 / c.len() as f64 };
    kv("mean_length", format!("{mean:.2}"));
    kv("max_length", lengths.iter().max().copied().unwrap_or(0).to_string());
    kv("over_max_words", lengths.iter().filter(|&&n| n > max_words).count().to_string());
    kv("tag_labels", c.tag_vocab.len().to_string());
    kv("entity_types", entities.len().to_string());
    kv("entities", entities.values().sum::<usize>().to_string());
    kv("intent_labels", c.intent_vocab.len().to_string());
    kv("multi_intent", c.sentences.iter().filter(|s| s.intents.len() > 1).count().to_string());
    kv("duplicates", (c.len() - deduplicate(&c).len()).to_string());
    for (k, v) in &intents {
        kv(&format!("intent.{k}"), v.to_string());
    }
    for (k, v) in &entities {
        kv(&format!("entity.{k}"), v.to_string());
    }
    Ok(out)
}
