//! Span-level precision/recall/F1, intent accuracy where any predicted
//! component in the gold set counts, token accuracy and whole-sentence
//! accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{extract_spans, split_intents, SpanSet, TaggedSentence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Precision and recall with an empty denominator are 0; F1 is 0 when
    /// both are 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("{a} gold items but {b} predictions")));
    }
    Ok(())
}

fn span_counts(gold: &SpanSet, pred: &SpanSet) -> (usize, usize, usize) {
    let g: BTreeSet<_> = gold.iter().collect();
    let p: BTreeSet<_> = pred.iter().collect();
    let tp = g.intersection(&p).count();
    (tp, p.len() - tp, g.len() - tp)
}

/// Micro-averaged exact-match span scores over the corpus.
pub fn span_prf(gold: &[SpanSet], pred: &[SpanSet]) -> Result<Prf> {
    check_lengths(gold.len(), pred.len())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let (a, b, c) = span_counts(g, p);
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Span scores broken down by entity type.
pub fn span_prf_by_type(gold: &[SpanSet], pred: &[SpanSet]) -> Result<BTreeMap<String, Prf>> {
    check_lengths(gold.len(), pred.len())?;
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let types: BTreeSet<&str> = g.iter().chain(p).map(|s| s.etype.as_str()).collect();
        for ty in types {
            let gs: SpanSet = g.iter().filter(|s| s.etype == ty).cloned().collect();
            let ps: SpanSet = p.iter().filter(|s| s.etype == ty).cloned().collect();
            let (a, b, c) = span_counts(&gs, &ps);
            let e = counts.entry(ty.to_string()).or_default();
            e.0 += a;
            e.1 += b;
            e.2 += c;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(k, (tp, fp, fn_))| (k, Prf::from_counts(tp, fp, fn_)))
        .collect())
}

/// A prediction is correct when it, or any component of a composite
/// `a#b` prediction, is one of the gold intents.
pub fn intent_correct<S: AsRef<str>>(gold: &[S], predicted: &str) -> bool {
    split_intents(predicted)
        .iter()
        .any(|p| gold.iter().any(|g| g.as_ref() == p))
}

pub fn intent_accuracy<S: AsRef<str>, P: AsRef<str>>(gold: &[Vec<S>], pred: &[P]) -> Result<f64> {
    check_lengths(gold.len(), pred.len())?;
    if gold.is_empty() {
        return Err(Error::Argument("intent accuracy of an empty corpus".into()));
    }
    let correct = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| intent_correct(g, p.as_ref()))
        .count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Fraction of sentences whose intent is correct and whose predicted tag
/// sequence equals the gold sequence token for token.
pub fn overall_accuracy<S: AsRef<str>, P: AsRef<str>>(
    gold: &[TaggedSentence],
    pred_tags: &[Vec<S>],
    pred_intents: &[P],
) -> Result<f64> {
    check_lengths(gold.len(), pred_tags.len())?;
    check_lengths(gold.len(), pred_intents.len())?;
    if gold.is_empty() {
        return Err(Error::Argument("overall accuracy of an empty corpus".into()));
    }
    let mut correct = 0;
    for ((g, tags), intent) in gold.iter().zip(pred_tags).zip(pred_intents) {
        if tags.len() != g.len() {
            return Err(Error::Argument(format!(
                "sentence {}: {} predicted tags for {} tokens",
                g.id,
                tags.len(),
                g.len()
            )));
        }
        let tags_match = g.tags.iter().zip(tags).all(|(a, b)| a == b.as_ref());
        if tags_match && intent_correct(&g.intents, intent.as_ref()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(tp: usize, tn: usize, fp: usize, fn_: usize) -> Result<f64> {
    let total = tp + tn + fp + fn_;
    if total == 0 {
        return Err(Error::Argument("accuracy is undefined when every count is zero".into()));
    }
    Ok((tp + tn) as f64 / total as f64)
}

/// Model output for one sentence, as label strings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictedSentence {
    pub tags: Option<Vec<String>>,
    pub intent: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Every metric for a corpus. Fields a model family cannot produce are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub sentences: usize,
    pub spans: Option<Prf>,
    pub token_accuracy: Option<f64>,
    pub sentence_tag_accuracy: Option<f64>,
    pub intent_accuracy: Option<f64>,
    /// One-vs-rest counts summed over intent classes.
    pub intent_confusion: Option<Confusion>,
    pub overall_accuracy: Option<f64>,
    pub per_type: BTreeMap<String, Prf>,
}

fn intent_confusion(gold: &[TaggedSentence], pred: &[String]) -> Confusion {
    let classes: BTreeSet<String> = gold
        .iter()
        .flat_map(|g| g.intents.iter().cloned())
        .chain(pred.iter().flat_map(|p| split_intents(p)))
        .collect();
    let mut c = Confusion::default();
    for (g, p) in gold.iter().zip(pred) {
        let predicted: BTreeSet<String> = split_intents(p).into_iter().collect();
        for class in &classes {
            match (predicted.contains(class), g.intents.contains(class)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

pub fn evaluate(gold: &[TaggedSentence], pred: &[PredictedSentence]) -> Result<MetricsReport> {
    check_lengths(gold.len(), pred.len())?;
    if gold.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty corpus".into()));
    }
    let all_tags: Option<Vec<Vec<String>>> = pred.iter().map(|p| p.tags.clone()).collect();
    let all_intents: Option<Vec<String>> = pred.iter().map(|p| p.intent.clone()).collect();

    let mut report = MetricsReport {
        sentences: gold.len(),
        spans: None,
        token_accuracy: None,
        sentence_tag_accuracy: None,
        intent_accuracy: None,
        intent_confusion: None,
        overall_accuracy: None,
        per_type: BTreeMap::new(),
    };
    if let Some(tags) = &all_tags {
        let gold_spans: Vec<SpanSet> = gold.iter().map(|g| extract_spans(&g.tags)).collect();
        let pred_spans: Vec<SpanSet> = tags.iter().map(|t| extract_spans(t)).collect();
        report.spans = Some(span_prf(&gold_spans, &pred_spans)?);
        report.per_type = span_prf_by_type(&gold_spans, &pred_spans)?;
        let (mut right, mut total, mut whole) = (0, 0, 0);
        for (g, t) in gold.iter().zip(tags) {
            if t.len() != g.len() {
                return Err(Error::Argument(format!("sentence {}: tag count mismatch", g.id)));
            }
            let r = g.tags.iter().zip(t).filter(|(a, b)| a == b).count();
            right += r;
            total += g.len();
            whole += usize::from(r == g.len());
        }
        report.token_accuracy = Some(right as f64 / total as f64);
        report.sentence_tag_accuracy = Some(whole as f64 / gold.len() as f64);
    }
    if let Some(intents) = &all_intents {
        let gold_sets: Vec<Vec<String>> = gold.iter().map(|g| g.intents.clone()).collect();
        report.intent_accuracy = Some(intent_accuracy(&gold_sets, intents)?);
        report.intent_confusion = Some(intent_confusion(gold, intents));
    }
    if let (Some(tags), Some(intents)) = (&all_tags, &all_intents) {
        report.overall_accuracy = Some(overall_accuracy(gold, tags, intents)?);
    }
    Ok(report)
}

impl MetricsReport {
    /// One `key: value` line per metric, in a fixed order. Missing values print as `n/a`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let num = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let cnt = |v: Option<usize>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
        let s = self.spans;
        let c = self.intent_confusion;
        let lines = [
            ("sentences", self.sentences.to_string()),
            ("span_precision", num(s.map(|p| p.precision))),
            ("span_recall", num(s.map(|p| p.recall))),
            ("span_f1", num(s.map(|p| p.f1))),
            ("span_tp", cnt(s.map(|p| p.tp))),
            ("span_fp", cnt(s.map(|p| p.fp))),
            ("span_fn", cnt(s.map(|p| p.fn_))),
            ("token_accuracy", num(self.token_accuracy)),
            ("sentence_tag_accuracy", num(self.sentence_tag_accuracy)),
            ("intent_accuracy", num(self.intent_accuracy)),
            ("intent_tp", cnt(c.map(|c| c.tp))),
            ("intent_tn", cnt(c.map(|c| c.tn))),
            ("intent_fp", cnt(c.map(|c| c.fp))),
            ("intent_fn", cnt(c.map(|c| c.fn_))),
            ("overall_accuracy", num(self.overall_accuracy)),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k}: {v}");
        }
        for (ty, p) in &self.per_type {
            let _ = writeln!(out, "type.{ty}.precision: {:.6}", p.precision);
            let _ = writeln!(out, "type.{ty}.recall: {:.6}", p.recall);
            let _ = writeln!(out, "type.{ty}.f1: {:.6}", p.f1);
            let _ = writeln!(out, "type.{ty}.support: {}", p.tp + p.fn_);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{spans_to_tags, Span};
    use proptest::prelude::*;

    fn sent(tags: &[&str], intents: &[&str]) -> TaggedSentence {
        TaggedSentence::new(
            tags.iter().enumerate().map(|(i, _)| format!("w{i}")).collect(),
            tags.iter().map(|t| t.to_string()).collect(),
            intents.iter().map(|t| t.to_string()).collect(),
        )
        .unwrap()
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_counted_spans() {
        let gold = vec![vec![Span::new(1, 1, "a"), Span::new(4, 4, "b")]];
        let pred = vec![vec![Span::new(1, 1, "a"), Span::new(4, 4, "c"), Span::new(6, 6, "b")]];
        let p = span_prf(&gold, &pred).unwrap();
        assert_eq!(p.precision, 1.0 / 3.0);
        assert_eq!(p.recall, 0.5);
        assert!((p.f1 - 0.4).abs() < 1e-15);
        assert!(span_prf(&gold, &[]).is_err());
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gold = vec![vec![Span::new(0, 1, "a")]];
        let p = span_prf(&gold, &[vec![]]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn multi_label_intent_rule() {
        assert!(intent_correct(&["flight", "airfare"], "flight"));
        assert!(intent_correct(&["flight"], "airfare#flight"));
        assert!(!intent_correct(&["flight"], "airfare"));
        let gold = vec![strings(&["a"]), strings(&["b"]), strings(&["c"]), strings(&["d"])];
        assert_eq!(intent_accuracy(&gold, &["a", "x", "c", "y"]).unwrap(), 0.5);
    }

    #[test]
    fn overall_accuracy_fixtures() {
        let gold = vec![sent(&["B-x", "O"], &["f"]), sent(&["O", "O"], &["g"])];
        let perfect = vec![strings(&["B-x", "O"]), strings(&["O", "O"])];
        assert_eq!(overall_accuracy(&gold, &perfect, &["f", "g"]).unwrap(), 1.0);
        let one_off = vec![strings(&["B-x", "O"]), strings(&["O", "B-x"])];
        assert_eq!(overall_accuracy(&gold, &one_off, &["f", "g"]).unwrap(), 0.5);

        // 4 sentences: all right; wrong intent; wrong tag; both wrong → 1/4
        let gold = vec![
            sent(&["B-x"], &["f"]),
            sent(&["B-x"], &["f", "g"]),
            sent(&["I-x", "O"], &["g"]),
            sent(&["O"], &["h"]),
        ];
        let tags = vec![strings(&["B-x"]), strings(&["B-x"]), strings(&["B-x", "O"]), strings(&["B-y"])];
        let intents = ["f", "h", "g", "f"];
        assert_eq!(overall_accuracy(&gold, &tags, &intents).unwrap(), 0.25);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(1, 1, 0, 0).unwrap(), 1.0);
        assert_eq!(accuracy(0, 0, 1, 1).unwrap(), 0.0);
        assert_eq!(accuracy(3, 2, 1, 4).unwrap(), 0.5);
        assert!(accuracy(0, 0, 0, 0).is_err());
    }

    #[test]
    fn report_text_and_missing_fields() {
        let gold = vec![sent(&["B-x", "I-x"], &["f"])];
        let pred = vec![PredictedSentence {
            tags: Some(strings(&["B-x", "I-x"])),
            intent: None,
        }];
        let r = evaluate(&gold, &pred).unwrap();
        let text = r.to_text();
        assert!(text.contains("span_f1: 1.000000\n"));
        assert!(text.contains("intent_accuracy: n/a\n"));
        assert!(text.contains("overall_accuracy: n/a\n"));
        assert!(text.contains("type.x.support: 1\n"));
        assert!(r.to_json().contains("\"fn\": 0"));
    }

    fn tag_seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::sample::select(vec!["O", "B-a", "I-a", "B-b", "I-b"]).prop_map(str::to_string),
            1..10,
        )
    }

    proptest! {
        #[test]
        fn gold_against_itself_is_perfect(seqs in prop::collection::vec(tag_seq(), 1..8)) {
            let spans: Vec<SpanSet> = seqs.iter().map(|s| extract_spans(s)).collect();
            let p = span_prf(&spans, &spans).unwrap();
            let any = spans.iter().any(|s| !s.is_empty());
            if any {
                prop_assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
            }
        }

        #[test]
        fn f1_is_harmonic_mean(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let p = Prf::from_counts(tp, fp, fn_);
            if p.precision + p.recall > 0.0 {
                prop_assert!((p.f1 * (p.precision + p.recall) - 2.0 * p.precision * p.recall).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&p.f1));
        }

        #[test]
        fn metrics_are_permutation_invariant_and_bounded(
            seqs in prop::collection::vec((tag_seq(), tag_seq(), 0usize..3, 0usize..3), 1..8),
            rot in 0usize..8,
        ) {
            let names = ["f", "g", "h"];
            let gold: Vec<TaggedSentence> = seqs
                .iter()
                .map(|(g, _, i, _)| {
                    let s: Vec<&str> = g.iter().map(String::as_str).collect();
                    sent(&s, &[names[*i]])
                })
                .collect();
            let pred: Vec<PredictedSentence> = seqs
                .iter()
                .map(|(g, p, _, j)| {
                    let spans = extract_spans(p);
                    let clipped: Vec<Span> = spans.into_iter().filter(|s| s.end < g.len()).collect();
                    PredictedSentence {
                        tags: Some(spans_to_tags(&clipped, g.len())),
                        intent: Some(names[*j].to_string()),
                    }
                })
                .collect();
            let a = evaluate(&gold, &pred).unwrap();
            let k = rot % gold.len();
            let mut g2 = gold.clone();
            g2.rotate_left(k);
            let mut p2 = pred.clone();
            p2.rotate_left(k);
            let b = evaluate(&g2, &p2).unwrap();
            prop_assert_eq!(a.spans, b.spans);
            prop_assert_eq!(a.intent_accuracy, b.intent_accuracy);
            prop_assert_eq!(a.overall_accuracy, b.overall_accuracy);
            let overall = a.overall_accuracy.unwrap();
            prop_assert!(overall <= a.intent_accuracy.unwrap());
            prop_assert!(overall <= a.sentence_tag_accuracy.unwrap());
        }
    }
}
