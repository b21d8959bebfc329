//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotintent::attention::{
    scaled_dot_attention, AttentionConfig, CoInteractive, EncoderBlock, LabelAttention, MultiHeadAttention,
    TransformerEncoder,
};
use slotintent::corpus::{Span, TaggedSentence, SYNTHETIC_CORPUS};
use slotintent::crf::{log_partition, sequence_log_prob, viterbi_decode, Crf, FORBIDDEN};
use slotintent::evaluation::{intent_accuracy, overall_accuracy, span_prf, Prf};
use slotintent::layers::{LayerNorm, Linear, Mode};
use slotintent::models::{gradcheck_model, tiny_config, tiny_fixture, ModelKind, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use slotintent::numerics::{dot, finite_diff_check, relative_error, GradCheckReport, ParamTensor, Parameterized, Tensor};
use slotintent::embeddings::CharTable;
use slotintent::recurrent::{pad_to_kernel, BiLstm, CharCnn, CharLstm, LstmCell};
use slotintent_cli::commands::{gradcheck_variants, train_command, TrainOutcome};
use slotintent_cli::config::{Overrides, RunConfig};

struct Verdict {
    passed: Option<bool>,
    detail: String,
}

impl Verdict {
    fn check(passed: bool, detail: String) -> Self {
        Verdict {
            passed: Some(passed),
            detail,
        }
    }

    fn skip(detail: String) -> Self {
        Verdict { passed: None, detail }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- CRF

struct Instance {
    p: Tensor,
    a: Tensor,
}

/// Half the instances draw scores from {-1, 0, 1} so exact ties are common.
fn crf_instances(count: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..count)
        .map(|i| {
            let n = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=3);
            let draw = |r: &mut ChaCha8Rng| {
                if i % 2 == 0 {
                    r.gen_range(-3.0..3.0)
                } else {
                    r.gen_range(-1i32..=1) as f64
                }
            };
            let p = Tensor::matrix(n, k, (0..n * k).map(|_| draw(&mut rng)).collect());
            let mut a = Tensor::zeros(&[k + 2, k + 2]);
            for r in 0..k + 2 {
                for c in 0..k + 2 {
                    let v = if c == k || r == k + 1 { FORBIDDEN } else { draw(&mut rng) };
                    a.set(r, c, v);
                }
            }
            Instance { p, a }
        })
        .collect()
}

fn enumerate_paths(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..k).map(move |j| {
                    let mut q = p.clone();
                    q.push(j);
                    q
                })
            })
            .collect();
    }
    out
}

fn brute_score(p: &Tensor, a: &Tensor, y: &[usize]) -> f64 {
    let k = p.cols();
    let mut s = a.get(k, y[0]) + p.get(0, y[0]);
    for t in 1..y.len() {
        s = s + a.get(y[t - 1], y[t]) + p.get(t, y[t]);
    }
    s + a.get(y[y.len() - 1], k + 1)
}

/// Lowest index at each backtracking step: among maximal paths, the one
/// that is smallest comparing the last tag first, then the one before it.
fn tie_break_oracle(paths: &[Vec<usize>], scores: &[f64], max: f64) -> Vec<usize> {
    paths
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s == max)
        .map(|(p, _)| p.clone())
        .min_by(|x, y| x.iter().rev().cmp(y.iter().rev()))
        .unwrap()
}

fn crf_oracle(instances: &[Instance]) -> Verdict {
    let start = Instant::now();
    let (mut worst_z, mut bad_score, mut bad_path, mut ties) = (0.0f64, 0, 0, 0);
    for inst in instances {
        let (n, k) = (inst.p.rows(), inst.p.cols());
        let paths = enumerate_paths(n, k);
        let scores: Vec<f64> = paths.iter().map(|y| brute_score(&inst.p, &inst.a, y)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let brute_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        worst_z = worst_z.max(relative_error(log_partition(&inst.p, &inst.a).unwrap(), brute_z));
        let (path, score) = viterbi_decode(&inst.p, &inst.a).unwrap();
        if score != max {
            bad_score += 1;
        }
        if scores.iter().filter(|&&s| s == max).count() > 1 {
            ties += 1;
        }
        if path != tie_break_oracle(&paths, &scores, max) {
            bad_path += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::check(
        worst_z < 1e-8 && bad_score == 0 && bad_path == 0 && elapsed < Duration::from_secs(10),
        format!(
            "{} instances ({ties} with tied maxima): max log Z rel err {worst_z:.1e}, score mismatches {bad_score}, tie-break mismatches {bad_path}, {}",
            instances.len(),
            secs(elapsed)
        ),
    )
}

fn crf_normalization(instances: &[Instance]) -> Verdict {
    let mut worst = 0.0f64;
    for inst in instances {
        let total: f64 = enumerate_paths(inst.p.rows(), inst.p.cols())
            .iter()
            .map(|y| sequence_log_prob(&inst.p, &inst.a, y).unwrap().exp())
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    Verdict::check(
        worst <= 1e-9,
        format!("{} instances: max |sum p(y|X) - 1| = {worst:.1e}", instances.len()),
    )
}

// ---------------------------------------------------------------- gradients

struct WithInput<M> {
    x: ParamTensor,
    m: M,
}

impl<M: Parameterized> Parameterized for WithInput<M> {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut v = vec![&self.x];
        v.extend(self.m.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.x];
        v.extend(self.m.params_mut());
        v
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Fixed linear read-out of a tensor and its gradient.
fn probe(out: &Tensor) -> (f64, Tensor) {
    let coeffs: Vec<f64> = (0..out.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let loss = dot(out.data(), &coeffs);
    (loss, Tensor::new(out.shape().to_vec(), coeffs).unwrap())
}

fn check<M, L, G>(model: &mut M, loss: L, loss_and_grad: G) -> GradCheckReport
where
    M: Parameterized,
    L: FnMut(&M) -> f64,
    G: FnMut(&mut M) -> f64,
{
    finite_diff_check(model, loss, loss_and_grad, GRADCHECK_STEP, GRADCHECK_TOLERANCE).unwrap()
}

fn char_table(dim: usize, seed: u64) -> CharTable {
    let chars: Vec<char> = "abcdefgh".chars().collect();
    let mut t = CharTable::random("chars", &chars, dim, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for v in t.vectors.value.data_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    t
}

fn component_checks() -> Vec<(String, GradCheckReport)> {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    let mut out = Vec::new();

    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 3, 4)),
        m: Linear::new("linear", 4, 5, &mut r),
    };
    out.push((
        "linear".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.forward(&w.x.value).unwrap()).0,
            |w| {
                let x = w.x.value.clone();
                let (loss, d) = probe(&w.m.forward(&x).unwrap());
                let dx = w.m.backward(&x, &d);
                w.x.grad.add_assign(&dx);
                loss
            },
        ),
    ));

    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 3, 5)),
        m: LayerNorm::new("norm", 5),
    };
    for p in w.m.params_mut() {
        for v in p.value.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    out.push((
        "layer norm".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.forward(&w.x.value).unwrap().0).0,
            |w| {
                let (y, cache) = w.m.forward(&w.x.value.clone()).unwrap();
                let (loss, d) = probe(&y);
                let dx = w.m.backward(&cache, &d);
                w.x.grad.add_assign(&dx);
                loss
            },
        ),
    ));

    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 4, 3)),
        m: LstmCell::new("lstm", 3, 4, &mut r),
    };
    out.push((
        "lstm cell".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.run(&w.x.value).unwrap().0).0,
            |w| {
                let (hs, caches) = w.m.run(&w.x.value.clone()).unwrap();
                let (loss, d) = probe(&hs);
                let dx = w.m.run_backward(&caches, &d);
                w.x.grad.add_assign(&dx);
                loss
            },
        ),
    ));

    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 3, 2)),
        m: BiLstm::new("bilstm", 2, 3, &mut r),
    };
    out.push((
        "bilstm".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.encode(&w.x.value).unwrap().states).0,
            |w| {
                let o = w.m.encode(&w.x.value.clone()).unwrap();
                let (loss, d) = probe(&o.states);
                let dx = w.m.backward_pass(&o, &d);
                w.x.grad.add_assign(&dx);
                loss
            },
        ),
    ));

    let mut cnn = CharCnn::new("cnn", char_table(4, 6), 5, 3, 0.5, &mut r);
    let ids = pad_to_kernel(cnn.table.encode("bad", 30), 3);
    let coef = [0.3, -1.0, 0.7, 1.2, -0.4];
    let dropout_rng = || ChaCha8Rng::seed_from_u64(42);
    out.push((
        "char cnn composer (dropout on)".to_string(),
        check(
            &mut cnn,
            |c| dot(&c.compose_ids(&ids, Mode::Train, &mut dropout_rng()).unwrap().0, &coef),
            |c| {
                let (v, cache) = c.compose_ids(&ids, Mode::Train, &mut dropout_rng()).unwrap();
                c.backward(&cache, &coef);
                dot(&v, &coef)
            },
        ),
    ));

    let mut cl = CharLstm::new("char_lstm", char_table(3, 8), 4, &mut r);
    let ids = cl.table.encode("face", 30);
    let coef = [0.5, -0.3, 1.1, 0.8];
    out.push((
        "char lstm composer".to_string(),
        check(
            &mut cl,
            |c| dot(&c.compose_ids(&ids).unwrap().0, &coef),
            |c| {
                let (v, cache) = c.compose_ids(&ids).unwrap();
                c.backward(&cache, &coef);
                dot(&v, &coef)
            },
        ),
    ));

    let mut crf = WithInput {
        x: ParamTensor::new("emissions", random(&mut r, 4, 3)),
        m: Crf::new("crf", 3),
    };
    for i in 0..5 {
        for j in 0..5 {
            if !crf.m.fixed_mask()[i * 5 + j] {
                crf.m.transitions.value.set(i, j, r.gen_range(-1.0..1.0));
            }
        }
    }
    let gold = [2, 0, 1, 1];
    out.push((
        "crf loss".to_string(),
        check(
            &mut crf,
            |w| w.m.loss(&w.x.value, &gold).unwrap(),
            |w| {
                let (loss, dp) = w.m.nll(&w.x.value.clone(), &gold).unwrap();
                w.x.grad.add_assign(&dp);
                loss
            },
        ),
    ));

    let config = AttentionConfig::new(4, 2, 2, 6).unwrap();
    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 3, 4)),
        m: MultiHeadAttention::new("mha", config, &mut r).unwrap(),
    };
    out.push((
        "multi-head attention".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.forward(&w.x.value, &w.x.value, &w.x.value).unwrap().0).0,
            |w| {
                let x = w.x.value.clone();
                let (y, cache) = w.m.forward(&x, &x, &x).unwrap();
                let (loss, d) = probe(&y);
                let (a, b, c) = w.m.backward(&cache, &d);
                w.x.grad.add_assign(&a);
                w.x.grad.add_assign(&b);
                w.x.grad.add_assign(&c);
                loss
            },
        ),
    ));

    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 3, 4)),
        m: EncoderBlock::new("block", config, &mut r).unwrap(),
    };
    out.push((
        "encoder block".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.forward(&w.x.value).unwrap().0).0,
            |w| {
                let (y, cache) = w.m.forward(&w.x.value.clone()).unwrap();
                let (loss, d) = probe(&y);
                let dx = w.m.backward(&cache, &d);
                w.x.grad.add_assign(&dx);
                loss
            },
        ),
    ));

    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 3, 4)),
        m: TransformerEncoder::new("encoder", config, &mut r).unwrap(),
    };
    out.push((
        "transformer encoder (2 blocks)".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.forward(&w.x.value).unwrap().0).0,
            |w| {
                let (y, caches) = w.m.forward(&w.x.value.clone()).unwrap();
                let (loss, d) = probe(&y);
                let dx = w.m.backward(&caches, &d);
                w.x.grad.add_assign(&dx);
                loss
            },
        ),
    ));

    let mut w = WithInput {
        x: ParamTensor::new("x", random(&mut r, 3, 4)),
        m: LabelAttention::new("labels", 4, 5, &mut r),
    };
    out.push((
        "label attention".to_string(),
        check(
            &mut w,
            |w| probe(&w.m.forward(&w.x.value).unwrap().0).0,
            |w| {
                let (y, cache) = w.m.forward(&w.x.value.clone()).unwrap();
                let (loss, d) = probe(&y);
                let dx = w.m.backward(&cache, &d);
                w.x.grad.add_assign(&dx);
                loss
            },
        ),
    ));

    struct Two {
        hs: ParamTensor,
        hi: ParamTensor,
        co: CoInteractive,
    }
    impl Parameterized for Two {
        fn params(&self) -> Vec<&ParamTensor> {
            let mut v = vec![&self.hs, &self.hi];
            v.extend(self.co.params());
            v
        }
        fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
            let mut v = vec![&mut self.hs, &mut self.hi];
            v.extend(self.co.params_mut());
            v
        }
    }
    let mut two = Two {
        hs: ParamTensor::new("hs", random(&mut r, 3, 4)),
        hi: ParamTensor::new("hi", random(&mut r, 3, 4)),
        co: CoInteractive::new("co", 4, &mut r),
    };
    let both = |s: &Tensor, i: &Tensor| {
        let (ls, ds) = probe(s);
        let (li, di) = probe(&i.scale(0.5));
        (ls + li, ds, di.scale(0.5))
    };
    out.push((
        "co-interactive layer".to_string(),
        check(
            &mut two,
            |m| {
                let (s, i, _) = m.co.forward(&m.hs.value, &m.hi.value).unwrap();
                both(&s, &i).0
            },
            |m| {
                let (s, i, cache) = m.co.forward(&m.hs.value.clone(), &m.hi.value.clone()).unwrap();
                let (loss, ds, di) = both(&s, &i);
                let (gs, gi) = m.co.backward(&cache, &ds, &di);
                m.hs.grad.add_assign(&gs);
                m.hi.grad.add_assign(&gi);
                loss
            },
        ),
    ));
    out
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut reports = component_checks();
    for kind in ModelKind::ALL {
        for (composer, crf) in gradcheck_variants(kind) {
            let config = tiny_config(kind, composer, crf, 42);
            let (mut model, examples) = tiny_fixture(&config).unwrap();
            let report = gradcheck_model(&mut model, &examples, 42, 0.0).unwrap();
            reports.push((format!("{kind} model (chars {composer}, crf {crf})"), report));
        }
    }
    let mut failed: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error))
        .collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);

    for kind in ModelKind::ALL {
        let o = Command::new(env!("CARGO_BIN_EXE_slotintent"))
            .args(["gradcheck", "--model", &kind.to_string()])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        if o.status.code() != Some(0) {
            failed.push(format!("`gradcheck --model {kind}` exit {:?}", o.status.code()));
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(120) {
        failed.push("over 2 min".into());
    }
    Verdict::check(
        failed.is_empty(),
        format!(
            "{} checks, max rel err {worst:.1e} (tolerance {GRADCHECK_TOLERANCE:.0e}), gradcheck exit 0 for all kinds, {}{}",
            reports.len(),
            secs(elapsed),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failed.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------- training

fn synthetic_file(dir: &Path) -> PathBuf {
    let p = dir.join("synthetic.iob");
    fs::write(&p, SYNTHETIC_CORPUS).unwrap();
    p
}

fn run_config(kind: ModelKind, corpus: &Path, out: &Path, set: &[&str]) -> RunConfig {
    let ov = Overrides {
        kind: Some(kind),
        seed: Some(7),
        out: Some(out.to_path_buf()),
        corpus: Some(corpus.to_path_buf()),
        embeddings: None,
        set: set.iter().map(|s| s.to_string()).collect(),
    };
    RunConfig::resolve(None, Path::new(""), &ov).unwrap()
}

fn overfit(kind: ModelKind) -> Verdict {
    let dir = scratch(&format!("overfit-{kind}"));
    let corpus = synthetic_file(&dir);
    let mut set = vec!["epochs=500"];
    if kind == ModelKind::JointBert {
        set.push("batch_size=1");
    }
    let run = run_config(kind, &corpus, &dir.join("run"), &set);
    let start = Instant::now();
    let outcome: TrainOutcome = match train_command(&run) {
        Ok(o) => o,
        Err(e) => return Verdict::check(false, format!("training failed: {e:#}")),
    };
    let elapsed = start.elapsed();
    let m = &outcome.train_metrics;
    let f1 = m.spans.as_ref().map(|p| p.f1);
    let intent = m.intent_accuracy;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let passed = f1.map_or(true, |f| f >= 0.99)
        && intent.map_or(true, |a| a >= 0.99)
        && (f1.is_some() || intent.is_some())
        && elapsed < Duration::from_secs(300);
    Verdict::check(
        passed,
        format!(
            "{kind}: span F1 {}, intent accuracy {}, {} epochs at lr {} ({}), batch {}, {}",
            fmt(f1),
            fmt(intent),
            outcome.epochs.len(),
            run.model.lr,
            run.model.optimizer,
            run.model.batch_size,
            secs(elapsed)
        ),
    )
}

fn determinism() -> Verdict {
    let start = Instant::now();
    let dir = scratch("determinism");
    let corpus = synthetic_file(&dir);
    let mut compared = 0;
    let mut differing = Vec::new();
    for kind in ModelKind::ALL {
        let train_into = |name: &str| {
            let out = dir.join(format!("{kind}-{name}"));
            let run = run_config(kind, &corpus, &out, &["epochs=8", "test_fraction=0.25", "batch_size=4"]);
            train_command(&run).unwrap();
            out
        };
        let (a, b) = (train_into("a"), train_into("b"));
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            compared += 1;
            if fs::read(a.join(&n)).unwrap() != fs::read(b.join(&n)).ok().unwrap_or_default() {
                differing.push(format!("{kind}/{}", n.to_string_lossy()));
            }
        }
    }
    Verdict::check(
        differing.is_empty() && compared > 0,
        format!(
            "{compared} files (checkpoints, run manifests, epoch logs, metric reports) over 5 kinds, {} differing, {}",
            differing.len(),
            secs(start.elapsed())
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn sent(tags: &[&str], intents: &[&str]) -> TaggedSentence {
    TaggedSentence::new(
        (0..tags.len()).map(|i| format!("w{i}")).collect(),
        tags.iter().map(|t| t.to_string()).collect(),
        intents.iter().map(|t| t.to_string()).collect(),
    )
    .unwrap()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn metric_oracles() -> Verdict {
    let mut failures = Vec::new();

    let gold = vec![vec![Span::new(1, 1, "a"), Span::new(4, 4, "b")]];
    let pred = vec![vec![Span::new(1, 1, "a"), Span::new(4, 4, "c"), Span::new(6, 6, "b")]];
    let p = span_prf(&gold, &pred).unwrap();
    if (p.precision, p.recall, p.f1, p.tp, p.fp, p.fn_) != (1.0 / 3.0, 0.5, 0.4, 1, 2, 1) {
        failures.push(format!("span_prf {p:?}"));
    }

    let gold_intents = vec![strings(&["a"]), strings(&["b", "e"]), strings(&["c"]), strings(&["d"])];
    let acc = intent_accuracy(&gold_intents, &["a", "e", "c#x", "y"]).unwrap();
    if acc != 0.75 {
        failures.push(format!("intent_accuracy {acc}"));
    }

    let gold = vec![
        sent(&["B-x"], &["f"]),
        sent(&["B-x"], &["f", "g"]),
        sent(&["I-x", "O"], &["g"]),
        sent(&["O"], &["h"]),
    ];
    let tags = vec![strings(&["B-x"]), strings(&["B-x"]), strings(&["B-x", "O"]), strings(&["B-y"])];
    let overall = overall_accuracy(&gold, &tags, &["f", "h", "g", "f"]).unwrap();
    if overall != 0.25 {
        failures.push(format!("overall_accuracy {overall}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p = Prf::from_counts(rng.gen_range(0..500), rng.gen_range(0..500), rng.gen_range(0..500));
        let identity = if p.precision + p.recall == 0.0 {
            0.0
        } else {
            2.0 / (1.0 / p.precision + 1.0 / p.recall)
        };
        if p.tp > 0 {
            worst = worst.max((p.f1 - identity).abs());
        }
    }
    if worst >= 1e-12 {
        failures.push(format!("harmonic mean identity off by {worst:.1e}"));
    }
    Verdict::check(
        failures.is_empty(),
        format!(
            "span P/R/F 1/3, 1/2, 0.4; multi-label intent accuracy 0.75; overall accuracy 0.25; F1 identity max err {worst:.1e} over 10000 counts{}",
            if failures.is_empty() { String::new() } else { format!("; mismatches: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- attention

fn attention_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut row_err = 0.0f64;
    for _ in 0..500 {
        let (n, m) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let q = random(&mut rng, n, 3).scale(5.0);
        let k = random(&mut rng, m, 3).scale(5.0);
        let v = random(&mut rng, m, 2);
        let (_, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..n {
            row_err = row_err.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }

    let config = AttentionConfig::new(4, 2, 2, 6).unwrap();
    let encoder = TransformerEncoder::new("encoder", config, &mut rng).unwrap();
    let mut perm_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(2..7);
        let x = random(&mut rng, n, 4);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted = Tensor::from_rows(&order.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let y = encoder.forward(&x).unwrap().0;
        let yp = encoder.forward(&permuted).unwrap().0;
        for (row, &i) in order.iter().enumerate() {
            for c in 0..4 {
                perm_err = perm_err.max((yp.get(row, c) - y.get(i, c)).abs());
            }
        }
    }

    let mut exact = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..4);
        let q = random(&mut rng, n, 3).scale(10.0);
        let k = random(&mut rng, 1, 3);
        let v = random(&mut rng, 1, 4);
        let (out, _) = scaled_dot_attention(&q, &k, &v).unwrap();
        exact &= (0..n).all(|i| out.row(i) == v.row(0));
    }
    Verdict::check(
        row_err <= 1e-12 && perm_err <= 1e-9 && exact,
        format!(
            "row sums max err {row_err:.1e}; encoder permutation max err {perm_err:.1e}; single key returns its value row exactly: {exact}"
        ),
    )
}

// ---------------------------------------------------------------- ATIS

fn atis() -> Verdict {
    let Some(dir) = std::env::var_os("SLOTINTENT_ATIS_DIR").map(PathBuf::from) else {
        return Verdict::skip(
            "no ATIS data: set SLOTINTENT_ATIS_DIR to a directory with train.iob, test.iob and vectors.txt".into(),
        );
    };
    let (train, test, vectors) = (dir.join("train.iob"), dir.join("test.iob"), dir.join("vectors.txt"));
    for p in [&train, &test, &vectors] {
        if !p.is_file() {
            return Verdict::skip(format!("{} is missing", p.display()));
        }
    }
    let start = Instant::now();
    let out = scratch("atis");
    let run = |kind: ModelKind, name: &str| {
        let ov = Overrides {
            kind: Some(kind),
            seed: Some(7),
            out: Some(out.join(name)),
            corpus: Some(train.clone()),
            embeddings: Some(vectors.clone()),
            set: vec![
                format!("test={}", test.display()),
                "hidden=100".into(),
                "lr=0.001".into(),
                "epochs=30".into(),
            ],
        };
        let config = RunConfig::resolve(None, Path::new(""), &ov)?;
        train_command(&config)
    };
    let result = run(ModelKind::Ner, "ner").and_then(|ner| Ok((ner, run(ModelKind::Unified, "unified")?)));
    let (ner, unified) = match result {
        Ok(r) => r,
        Err(e) => return Verdict::check(false, format!("training failed: {e:#}")),
    };
    let f1 = ner.test_metrics.as_ref().and_then(|m| m.spans.as_ref()).map_or(0.0, |p| p.f1);
    let intent = unified.test_metrics.as_ref().and_then(|m| m.intent_accuracy).unwrap_or(0.0);
    let elapsed = start.elapsed();
    Verdict::check(
        f1 >= 0.85 && intent >= 0.88 && elapsed < Duration::from_secs(3600),
        format!("BiLSTM-CRF test span F1 {f1:.4}; unified test intent accuracy {intent:.4}; {}", secs(elapsed)),
    )
}

fn main() -> ExitCode {
    let instances = crf_instances(1000);
    let mut results = vec![
        ("crf oracle equivalence".to_string(), crf_oracle(&instances)),
        ("probability normalization".to_string(), crf_normalization(&instances)),
        ("gradient suite".to_string(), gradient_suite()),
    ];
    for kind in ModelKind::ALL {
        results.push((format!("overfit convergence [{kind}]"), overfit(kind)));
    }
    results.push(("metric oracles".to_string(), metric_oracles()));
    results.push(("attention invariants".to_string(), attention_invariants()));
    results.push(("determinism".to_string(), determinism()));
    results.push(("desk-scale ATIS (conditional)".to_string(), atis()));

    let mut failed = 0;
    for (name, v) in &results {
        let status = match v.passed {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{status} {name}: {}", v.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
