use std::fs;
use std::path::{Path, PathBuf};
use std::io::Write;
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use slotintent::corpus::{parse_corpus_str, SYNTHETIC_CORPUS};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_slotintent"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn corpus_file(dir: &Path) -> PathBuf {
    let p = dir.join("synthetic.iob");
    fs::write(&p, SYNTHETIC_CORPUS).unwrap();
    p
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .parse()
        .unwrap()
}

/// One unified model overfit on the synthetic corpus, shared by every test.
fn trained() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("trained");
        let corpus = corpus_file(&dir);
        let out = dir.join("run");
        let o = run(&[
            "train",
            "--model",
            "unified",
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--set",
            "epochs=200",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    })
}

#[test]
fn train_writes_a_checkpoint_and_fits_the_corpus() {
    let out = trained();
    for f in ["model.manifest", "model.bin", "run.manifest", "epochs.tsv", "train_metrics.txt", "train_metrics.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = fs::read_to_string(out.join("train_metrics.txt")).unwrap();
    assert!(metric(&report, "span_f1") >= 0.99);
    assert!(metric(&report, "intent_accuracy") >= 0.99);
    let epochs = fs::read_to_string(out.join("epochs.tsv")).unwrap();
    assert_eq!(epochs.lines().count(), 201);
}

#[test]
fn evaluate_matches_the_training_report() {
    let out = trained();
    let dir = scratch("evaluate");
    let corpus = corpus_file(&dir);
    let o = run(&[
        "evaluate",
        "--checkpoint",
        out.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        dir.join("metrics").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(metric(&text, "overall_accuracy"), 1.0);
    assert_eq!(text, fs::read_to_string(out.join("train_metrics.txt")).unwrap());
    assert_eq!(text, fs::read_to_string(dir.join("metrics/metrics.txt")).unwrap());

    let json = run(&[
        "evaluate",
        "--checkpoint",
        out.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["overall_accuracy"], 1.0);
}

#[test]
fn untrained_model_reports_bounded_metrics() {
    let dir = scratch("untrained");
    let corpus = corpus_file(&dir);
    let out = dir.join("run");
    let o = run(&[
        "train",
        "--model",
        "co-interactive",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "epochs=0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("train_metrics.txt")).unwrap();
    for line in text.lines() {
        let (key, value) = line.split_once(": ").unwrap();
        let count = ["_tp", "_tn", "_fp", "_fn", "support", "sentences"].iter().any(|s| key.ends_with(s));
        if count || value == "n/a" {
            continue;
        }
        let v: f64 = value.parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{line}");
    }
}

#[test]
fn unknown_labels_are_rejected() {
    let out = trained();
    let dir = scratch("labels");
    let bad = dir.join("bad.iob");
    fs::write(&bad, "#intent=book_flight\nto\tO\nmars\tB-planet\n").unwrap();
    let o = run(&["evaluate", "--checkpoint", out.to_str().unwrap(), "--corpus", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("B-planet"), "{}", stderr(&o));

    let bad_intent = dir.join("intent.iob");
    fs::write(&bad_intent, "#intent=order_pizza\nto\tO\n").unwrap();
    let o = run(&["evaluate", "--checkpoint", out.to_str().unwrap(), "--corpus", bad_intent.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("order_pizza"), "{}", stderr(&o));
}

#[test]
fn predict_output_is_a_corpus() {
    let out = trained();
    let gold = parse_corpus_str(SYNTHETIC_CORPUS).unwrap();
    let picks = [0, 7, 19, 31];
    let mut input = String::new();
    for &i in &picks {
        input.push_str(&gold.sentences[i].tokens.join(" "));
        input.push('\n');
    }
    input.push_str("\n   \n");
    let mut child = bin()
        .args(["predict", "--checkpoint", out.to_str().unwrap(), "--input", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let predicted = parse_corpus_str(&stdout(&o)).unwrap();
    assert_eq!(predicted.len(), picks.len());
    for (p, &i) in predicted.sentences.iter().zip(&picks) {
        assert_eq!(p.tokens, gold.sentences[i].tokens);
        assert_eq!(p.tags, gold.sentences[i].tags);
        assert_eq!(p.intents, gold.sentences[i].intents);
    }
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn predict_keeps_original_tokens() {
    let out = trained();
    let o = run(&["predict", "--checkpoint", out.to_str().unwrap(), "--text", "Play Hey Jude by the Beatles"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = parse_corpus_str(&stdout(&o)).unwrap();
    assert_eq!(c.sentences[0].tokens, ["Play", "Hey", "Jude", "by", "the", "Beatles"]);
    assert_eq!(c.sentences[0].intents, ["play_music"]);
}

#[test]
fn same_seed_gives_identical_runs() {
    let dir = scratch("determinism");
    let corpus = corpus_file(&dir);
    let train = |name: &str| {
        let out = dir.join(name);
        let o = run(&[
            "train",
            "--model",
            "ner",
            "--seed",
            "7",
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--set",
            "epochs=5",
            "--set",
            "test_fraction=0.25",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (train("a"), train("b"));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 8, "{names:?}");
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let o = run(&["train", "--model", "ner", "--corpus", "/does/not/exist.iob"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`train`"), "{}", stderr(&o));

    let dir = scratch("usage");
    let corpus = corpus_file(&dir);
    let o = run(&["train", "--model", "ner", "--corpus", corpus.to_str().unwrap(), "--set", "hidden=x"]);
    assert_eq!(code(&o), 2);
    let o = run(&["train", "--model", "ner", "--corpus", corpus.to_str().unwrap(), "--set", "lr=-1"]);
    assert_eq!(code(&o), 2);
    let o = run(&["predict", "--checkpoint", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = run(&["no-such-command"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_sections_and_overrides() {
    let dir = scratch("config");
    corpus_file(&dir);
    fs::write(
        dir.join("run.conf"),
        "# shared\ntrain = synthetic.iob\nepochs = 2\nhidden = 8\n\n[svm]\nepochs = 3\nlr = 0.5\n",
    )
    .unwrap();
    let out = dir.join("out");
    let o = run(&[
        "train",
        "--config",
        dir.join("run.conf").to_str().unwrap(),
        "--model",
        "unified",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "hidden=6",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("run.manifest")).unwrap();
    assert!(manifest.contains("\nhidden = 6\n"), "{manifest}");
    assert!(manifest.contains("\nepochs = 2\n"), "{manifest}");
    assert!(manifest.contains("train.sentences = 32"), "{manifest}");

    let o = run(&[
        "train",
        "--config",
        dir.join("run.conf").to_str().unwrap(),
        "--model",
        "svm",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("run.manifest")).unwrap();
    assert!(manifest.contains("\nepochs = 3\n"), "{manifest}");

    fs::write(dir.join("bad.conf"), "[transformer]\nepochs = 1\n").unwrap();
    let o = run(&["train", "--config", dir.join("bad.conf").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_every_kind() {
    for kind in ["ner", "svm", "unified", "joint-bert", "co-interactive"] {
        let o = run(&["gradcheck", "--model", kind]);
        assert_eq!(code(&o), 0, "{kind}\n{}", stdout(&o));
        assert!(stdout(&o).contains("PASS"), "{kind}");
        let again = run(&["gradcheck", "--model", kind]);
        assert_eq!(o.stdout, again.stdout, "{kind}");
    }
    let o = run(&["gradcheck", "--model", "unified", "--perturb", "0.01"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn data_stats_summarizes_the_corpus() {
    let dir = scratch("stats");
    let corpus = corpus_file(&dir);
    let o = run(&["data-stats", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("sentences: 32"), "{text}");
    assert!(text.contains("tokens: 216"), "{text}");
    assert!(text.contains("entities: 62"), "{text}");
}
