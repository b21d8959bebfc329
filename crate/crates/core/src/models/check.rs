//! Small model instances for finite-difference gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CharComposerKind, Example, Model, ModelConfig, ModelKind, Vocabularies, WordSource};
use crate::corpus::parse_corpus_str;
use crate::embeddings::random_table;
use crate::error::Result;
use crate::layers::Mode;
use crate::numerics::{finite_diff_check, GradCheckReport, Parameterized};

/// Central-difference step used by [`gradcheck_model`].
pub const GRADCHECK_STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const TINY_CORPUS: &str = "\
#intent=book
fly\tO
to\tO
new\tB-city
york\tI-city

#intent=ask
weather\tO
in\tO
rome\tB-city
today\tB-date
";

/// Hyperparameters for a model small enough to check scalar by scalar.
pub fn tiny_config(kind: ModelKind, composer: CharComposerKind, crf: bool, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::defaults_with(kind, composer);
    c.seed = seed;
    c.hidden = 3;
    c.word_dim = 4;
    c.char_dim = 3;
    c.char_hidden = 2;
    c.char_filters = 3;
    c.char_kernel = 2;
    c.max_chars = 5;
    c.d_model = 4;
    c.heads = 2;
    c.layers = 1;
    c.feedforward = 5;
    c.crf = crf;
    c
}

/// A freshly built model of `config` and two labelled sentences.
pub fn tiny_fixture(config: &ModelConfig) -> Result<(Model, Vec<Example>)> {
    let corpus = parse_corpus_str(TINY_CORPUS)?;
    let vocab = Vocabularies::from_corpus(&corpus, &[], None);
    let examples = vocab.examples(&corpus, None)?;
    let table = random_table(&vocab.words, config.word_dim, config.seed)?;
    let mut model = Model::build(config, &vocab, WordSource::Table(table))?;
    if let Model::Svm(svm) = &mut model {
        // move the weights off zero so every term of the objective is exercised
        svm.fit(&examples, 3, 0.5)?;
    }
    Ok((model, examples))
}

/// Summed training loss over `examples` with dropout masks drawn from a
/// generator reseeded on every evaluation.
pub fn fixture_loss(model: &Model, examples: &[Example], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ex in examples {
        total += model.loss(ex, Mode::Train, &mut rng)?;
    }
    Ok(total)
}

fn fixture_loss_and_grad(model: &mut Model, examples: &[Example], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ex in examples {
        total += model.loss_and_grad(ex, Mode::Train, &mut rng)?;
    }
    Ok(total)
}

/// Compare every analytic gradient of `model` on `examples` with central
/// differences. `perturb` is added to each analytic gradient entry, which a
/// correct backward pass never survives.
pub fn gradcheck_model(model: &mut Model, examples: &[Example], seed: u64, perturb: f64) -> Result<GradCheckReport> {
    // surface model errors before the check swallows them into NaN
    fixture_loss(model, examples, seed)?;
    finite_diff_check(
        model,
        |m| fixture_loss(m, examples, seed).unwrap_or(f64::NAN),
        |m| {
            let loss = fixture_loss_and_grad(m, examples, seed).unwrap_or(f64::NAN);
            if perturb != 0.0 {
                for p in m.params_mut() {
                    p.grad.data_mut().iter_mut().for_each(|g| *g += perturb);
                }
            }
            loss
        },
        GRADCHECK_STEP,
        GRADCHECK_TOLERANCE,
    )
}
