use super::{argmax, Example};
use crate::embeddings::{mean_of, EmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::{dot, ParamTensor, Parameterized, Tensor};

/// One-vs-rest linear SVMs over standardized sentence-mean word vectors.
///
/// Objective: mean over sentences of `Σ_c max(0, 1 − y_c (w_c·Φ + b_c))`
/// plus `(1/C)/2 · ‖W‖²`, with `y_c = +1` for the gold class and −1 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmIntentModel {
    pub table: EmbeddingTable,
    /// Per-dimension feature offset, fitted on the training set.
    pub center: ParamTensor,
    /// Per-dimension feature scale, fitted on the training set.
    pub scale: ParamTensor,
    /// `M × d`
    pub weights: ParamTensor,
    /// `M`
    pub bias: ParamTensor,
    pub c: f64,
}

impl SvmIntentModel {
    /// Zero classifiers with identity standardization. The word table is frozen.
    pub fn new(mut table: EmbeddingTable, classes: usize, c: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Argument("svm needs at least one class".into()));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Argument(format!("svm C must be positive, got {c}")));
        }
        table.freeze_all();
        let d = table.dim();
        Ok(SvmIntentModel {
            table,
            center: ParamTensor::zeros("svm.center", &[d]).frozen(),
            scale: ParamTensor::new("svm.scale", Tensor::vector(vec![1.0; d])).frozen(),
            weights: ParamTensor::zeros("svm.weights", &[classes, d]),
            bias: ParamTensor::zeros("svm.bias", &[classes]),
            c,
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.value.cols()
    }

    /// Mean word vector of the sentence (before standardization).
    pub fn sentence_vector(&self, ex: &Example) -> Result<Vec<f64>> {
        if ex.is_empty() {
            return Err(Error::Argument("empty sentence".into()));
        }
        Ok(mean_of(ex.tokens.iter().map(|t| self.table.lookup(t)), self.table.dim()))
    }

    fn standardize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.center.value.data())
            .zip(self.scale.value.data())
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    /// `w_c·Φ(x) + b_c` for every class, given a sentence-mean vector.
    pub fn decision_values(&self, mean: &[f64]) -> Result<Vec<f64>> {
        if mean.len() != self.dim() {
            return Err(Error::shape(format!("svm feature width {} != {}", mean.len(), self.dim())));
        }
        let phi = self.standardize(mean);
        Ok((0..self.classes())
            .map(|c| dot(self.weights.value.row(c), &phi) + self.bias.value.data()[c])
            .collect())
    }

    pub fn predict(&self, ex: &Example) -> Result<usize> {
        svm_predict(self, &self.sentence_vector(ex)?)
    }

    fn regularizer(&self) -> f64 {
        let sq: f64 = self.weights.value.data().iter().map(|w| w * w).sum();
        0.5 / self.c * sq
    }

    fn hinge(&self, phi: &[f64], gold: usize) -> (f64, Vec<(usize, f64)>) {
        let mut loss = 0.0;
        let mut active = Vec::new();
        for c in 0..self.classes() {
            let y = if c == gold { 1.0 } else { -1.0 };
            let margin = y * (dot(self.weights.value.row(c), phi) + self.bias.value.data()[c]);
            if margin < 1.0 {
                loss += 1.0 - margin;
                active.push((c, y));
            }
        }
        (loss, active)
    }

    pub fn loss(&self, ex: &Example) -> Result<f64> {
        let phi = self.standardize(&self.sentence_vector(ex)?);
        Ok(self.hinge(&phi, ex.gold_intent()?).0 + self.regularizer())
    }

    /// Per-sentence objective with its subgradient.
    pub fn loss_and_grad(&mut self, ex: &Example) -> Result<f64> {
        let phi = self.standardize(&self.sentence_vector(ex)?);
        let (hinge, active) = self.hinge(&phi, ex.gold_intent()?);
        for (c, y) in active {
            for (g, x) in self.weights.grad.row_mut(c).iter_mut().zip(&phi) {
                *g -= y * x;
            }
            self.bias.grad.data_mut()[c] -= y;
        }
        let lambda = 1.0 / self.c;
        for (g, w) in self.weights.grad.data_mut().iter_mut().zip(self.weights.value.data()) {
            *g += lambda * w;
        }
        Ok(hinge + self.regularizer())
    }

    /// Fit the standardization on `examples`, then run full-batch
    /// subgradient descent. Returns the objective after each epoch.
    pub fn fit(&mut self, examples: &[Example], epochs: usize, lr: f64) -> Result<Vec<f64>> {
        if examples.is_empty() {
            return Err(Error::DegenerateTraining("no training sentences".into()));
        }
        let golds = examples.iter().map(Example::gold_intent).collect::<Result<Vec<_>>>()?;
        if golds.iter().all(|&g| g == golds[0]) {
            return Err(Error::DegenerateTraining(
                "one-vs-rest training needs at least two intent classes".into(),
            ));
        }
        let means = examples
            .iter()
            .map(|e| self.sentence_vector(e))
            .collect::<Result<Vec<_>>>()?;
        let d = self.dim();
        let n = means.len() as f64;
        let mut center = vec![0.0; d];
        for m in &means {
            for (c, x) in center.iter_mut().zip(m) {
                *c += x / n;
            }
        }
        let mut scale = vec![0.0; d];
        for m in &means {
            for ((s, x), c) in scale.iter_mut().zip(m).zip(&center) {
                *s += (x - c) * (x - c) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
        }
        self.center.value = Tensor::vector(center);
        self.scale.value = Tensor::vector(scale);

        let feats: Vec<Vec<f64>> = means.iter().map(|m| self.standardize(m)).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            self.zero_grad();
            let mut total = 0.0;
            let mut dw = vec![0.0; self.weights.value.len()];
            let mut db = vec![0.0; self.classes()];
            for (phi, &gold) in feats.iter().zip(&golds) {
                let (loss, active) = self.hinge(phi, gold);
                total += loss;
                for (c, y) in active {
                    for (j, x) in phi.iter().enumerate() {
                        dw[c * d + j] -= y * x;
                    }
                    db[c] -= y;
                }
            }
            let lambda = 1.0 / self.c;
            let w = self.weights.value.data_mut();
            for j in 0..w.len() {
                w[j] -= lr * (dw[j] / n + lambda * w[j]);
            }
            for (b, g) in self.bias.value.data_mut().iter_mut().zip(&db) {
                *b -= lr * g / n;
            }
            let objective = total / n + self.regularizer();
            if !objective.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: "svm objective is not finite".into(),
                });
            }
            history.push(objective);
        }
        Ok(history)
    }
}

/// Largest decision value; ties go to the lowest class index.
pub fn svm_predict(model: &SvmIntentModel, sentence_mean: &[f64]) -> Result<usize> {
    Ok(argmax(&model.decision_values(sentence_mean)?))
}

/// Train a fresh model on `examples`.
pub fn svm_train(
    table: EmbeddingTable,
    classes: usize,
    examples: &[Example],
    epochs: usize,
    lr: f64,
    c: f64,
) -> Result<SvmIntentModel> {
    let mut m = SvmIntentModel::new(table, classes, c)?;
    m.fit(examples, epochs, lr)?;
    Ok(m)
}

impl Parameterized for SvmIntentModel {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.table.params();
        out.extend([&self.center, &self.scale, &self.weights, &self.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.table.params_mut();
        out.extend([&mut self.center, &mut self.scale, &mut self.weights, &mut self.bias]);
        out
    }
}
