use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{eval_rng, Example, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{clip_grad_norm, Mode, OptimizerKind, OptimizerState};
use crate::numerics::Parameterized;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub patience: Option<usize>,
    pub clip: Option<f64>,
}

impl TrainOptions {
    pub fn from_config(c: &ModelConfig) -> Self {
        TrainOptions {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            optimizer: c.optimizer,
            seed: c.seed,
            patience: c.patience,
            clip: c.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sentence loss seen during the epoch.
    pub train_loss: f64,
    pub held_out_loss: Option<f64>,
}

fn mean_eval_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut rng = eval_rng();
    let mut total = 0.0;
    for ex in examples {
        total += model.loss(ex, Mode::Eval, &mut rng)?;
    }
    Ok(total / examples.len().max(1) as f64)
}

fn non_finite_param(model: &Model) -> Option<String> {
    model
        .params()
        .into_iter()
        .find(|p| p.value.data().iter().any(|v| !v.is_finite()))
        .map(|p| p.name.clone())
}

/// Mini-batch training. Sentence gradients are summed over a batch and
/// divided by its size before each optimizer step. Deterministic for a
/// fixed seed. With `patience` and a held-out set, training stops once the
/// held-out loss has not improved for that many epochs and the best
/// parameters are restored.
pub fn train(
    model: &mut Model,
    train: &[Example],
    held_out: Option<&[Example]>,
    opts: &TrainOptions,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::DegenerateTraining("empty training corpus".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if let Model::Svm(svm) = model {
        let history = svm.fit(train, opts.epochs, opts.lr)?;
        return Ok(history
            .into_iter()
            .enumerate()
            .map(|(epoch, train_loss)| EpochLog {
                epoch: epoch + 1,
                train_loss,
                held_out_loss: None,
            })
            .collect());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut optimizer = OptimizerState::new(opts.optimizer, opts.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            model.zero_grad();
            for &i in batch {
                let loss = match model.loss_and_grad(&train[i], Mode::Train, &mut rng) {
                    Ok(l) => l,
                    Err(e) => match non_finite_param(model) {
                        Some(name) => {
                            return Err(Error::Divergence {
                                epoch,
                                message: format!("parameter `{name}` is not finite ({e})"),
                            })
                        }
                        None => return Err(e),
                    },
                };
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        message: format!("loss is {loss} on sentence {}", train[i].id),
                    });
                }
                total += loss;
            }
            let scale = 1.0 / batch.len() as f64;
            for p in model.params_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            if let Some(max) = opts.clip {
                clip_grad_norm(model, max);
            }
            optimizer.step(model);
        }
        let held_out_loss = match held_out {
            Some(h) if !h.is_empty() => Some(mean_eval_loss(model, h)?),
            _ => None,
        };
        let train_loss = total / train.len() as f64;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}{}",
            held_out_loss.map(|l| format!(", held-out loss {l:.6}")).unwrap_or_default()
        );
        logs.push(EpochLog {
            epoch,
            train_loss,
            held_out_loss,
        });
        if let (Some(patience), Some(loss)) = (opts.patience, held_out_loss) {
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log::info!("stopping early after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(logs)
}
