//! Linear-chain CRF over emission scores `P: n × k` and a transition
//! matrix `A: (k+2) × (k+2)` whose last two states are START and STOP.
//!
//! A path `y` scores `A[START, y₀] + Σ P[t, y_t] + Σ A[y_{t−1}, y_t] + A[y_{n−1}, STOP]`.

use serde::Serialize;

use crate::corpus::{parse_tag, TagPrefix};
use crate::error::{Error, Result};
use crate::numerics::{logsumexp_unchecked, ParamTensor, Parameterized, Tensor};

/// Score of a forbidden transition. Finite so log-space sums never see NaN.
pub const FORBIDDEN: f64 = -1e4;

pub fn start_state(k: usize) -> usize {
    k
}

pub fn stop_state(k: usize) -> usize {
    k + 1
}

fn check(p: &Tensor, a: &Tensor) -> Result<usize> {
    if p.shape().len() != 2 || p.rows() == 0 || p.cols() == 0 {
        return Err(Error::shape(format!("emissions must be n×k, got {:?}", p.shape())));
    }
    let k = p.cols();
    if a.shape() != [k + 2, k + 2] {
        return Err(Error::shape(format!(
            "transitions must be {}×{} for k={k}, got {:?}",
            k + 2,
            k + 2,
            a.shape()
        )));
    }
    if p.data().iter().chain(a.data()).any(|v| !v.is_finite()) {
        return Err(Error::Argument("CRF scores must be finite".into()));
    }
    Ok(k)
}

fn check_path(y: &[usize], n: usize, k: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::Argument(format!("path length {} != {n}", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&t| t >= k) {
        return Err(Error::Argument(format!("tag index {bad} out of range for k={k}")));
    }
    Ok(())
}

pub fn path_score(p: &Tensor, a: &Tensor, y: &[usize]) -> Result<f64> {
    let k = check(p, a)?;
    check_path(y, p.rows(), k)?;
    let mut s = a.get(start_state(k), y[0]) + p.get(0, y[0]);
    for t in 1..y.len() {
        s = s + a.get(y[t - 1], y[t]) + p.get(t, y[t]);
    }
    Ok(s + a.get(y[y.len() - 1], stop_state(k)))
}

/// Forward variables `alpha[t][j]` (log space).
fn forward_vars(p: &Tensor, a: &Tensor, k: usize) -> Vec<Vec<f64>> {
    let n = p.rows();
    let mut alpha = Vec::with_capacity(n);
    alpha.push((0..k).map(|j| a.get(start_state(k), j) + p.get(0, j)).collect::<Vec<_>>());
    let mut buf = vec![0.0; k];
    for t in 1..n {
        let prev = &alpha[t - 1];
        let cur: Vec<f64> = (0..k)
            .map(|j| {
                for i in 0..k {
                    buf[i] = prev[i] + a.get(i, j);
                }
                logsumexp_unchecked(&buf) + p.get(t, j)
            })
            .collect();
        alpha.push(cur);
    }
    alpha
}

/// Backward variables `beta[t][i]` (log space), excluding the emission at t.
fn backward_vars(p: &Tensor, a: &Tensor, k: usize) -> Vec<Vec<f64>> {
    let n = p.rows();
    let mut beta = vec![vec![0.0; k]; n];
    beta[n - 1] = (0..k).map(|i| a.get(i, stop_state(k))).collect();
    let mut buf = vec![0.0; k];
    for t in (0..n - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = a.get(i, j) + p.get(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = logsumexp_unchecked(&buf);
        }
    }
    beta
}

fn log_partition_from(alpha: &[Vec<f64>], a: &Tensor, k: usize) -> f64 {
    let last = alpha.last().expect("non-empty");
    let v: Vec<f64> = (0..k).map(|j| last[j] + a.get(j, stop_state(k))).collect();
    logsumexp_unchecked(&v)
}

/// `log Σ_y exp(path_score(y))` by the forward algorithm.
pub fn log_partition(p: &Tensor, a: &Tensor) -> Result<f64> {
    let k = check(p, a)?;
    Ok(log_partition_from(&forward_vars(p, a, k), a, k))
}

pub fn sequence_log_prob(p: &Tensor, a: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(path_score(p, a, y)? - log_partition(p, a)?)
}

#[derive(Clone, Debug)]
pub struct CrfLoss {
    pub loss: f64,
    /// `dL/dP`, n × k.
    pub d_emissions: Tensor,
    /// `dL/dA`, (k+2) × (k+2).
    pub d_transitions: Tensor,
}

/// Rounding can push a near-certain path's NLL a hair below zero. NaN passes through.
fn non_negative(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

/// Negative log-likelihood of `gold` with exact gradients
/// (expected counts minus observed counts).
pub fn nll_loss(p: &Tensor, a: &Tensor, gold: &[usize]) -> Result<CrfLoss> {
    let k = check(p, a)?;
    let n = p.rows();
    check_path(gold, n, k)?;
    let alpha = forward_vars(p, a, k);
    let beta = backward_vars(p, a, k);
    let log_z = log_partition_from(&alpha, a, k);
    let score = path_score(p, a, gold)?;

    let mut dp = Tensor::zeros(&[n, k]);
    let mut da = Tensor::zeros(&[k + 2, k + 2]);
    for t in 0..n {
        for j in 0..k {
            let marg = (alpha[t][j] + beta[t][j] - log_z).exp();
            dp.set(t, j, marg);
            if t == 0 {
                da.set(start_state(k), j, marg);
            }
            if t == n - 1 {
                da.set(j, stop_state(k), marg);
            }
        }
    }
    for t in 0..n.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                let pair = (alpha[t][i] + a.get(i, j) + p.get(t + 1, j) + beta[t + 1][j] - log_z).exp();
                da.set(i, j, da.get(i, j) + pair);
            }
        }
    }
    for t in 0..n {
        dp.set(t, gold[t], dp.get(t, gold[t]) - 1.0);
    }
    let s = start_state(k);
    da.set(s, gold[0], da.get(s, gold[0]) - 1.0);
    let e = stop_state(k);
    da.set(gold[n - 1], e, da.get(gold[n - 1], e) - 1.0);
    for t in 1..n {
        da.set(gold[t - 1], gold[t], da.get(gold[t - 1], gold[t]) - 1.0);
    }
    Ok(CrfLoss {
        loss: non_negative(log_z - score),
        d_emissions: dp,
        d_transitions: da,
    })
}

/// Highest-scoring path. Ties go to the lowest tag index, both for the
/// final tag and for every back-pointer.
pub fn viterbi_decode(p: &Tensor, a: &Tensor) -> Result<(Vec<usize>, f64)> {
    let k = check(p, a)?;
    let n = p.rows();
    let mut delta: Vec<f64> = (0..k).map(|j| a.get(start_state(k), j) + p.get(0, j)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
    for t in 1..n {
        let mut next = vec![0.0; k];
        let mut ptr = vec![0usize; k];
        for j in 0..k {
            let mut best = 0;
            let mut best_v = delta[0] + a.get(0, j);
            for i in 1..k {
                let v = delta[i] + a.get(i, j);
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            next[j] = best_v + p.get(t, j);
            ptr[j] = best;
        }
        back.push(ptr);
        delta = next;
    }
    let mut last = 0;
    let mut best = delta[0] + a.get(0, stop_state(k));
    for j in 1..k {
        let v = delta[j] + a.get(j, stop_state(k));
        if v > best {
            best = v;
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t - 1][path[t]];
    }
    Ok((path, best))
}

/// CRF layer owning the transition parameters. Entries listed in `fixed`
/// (START column, STOP row, optional IOB constraints) never train.
#[derive(Clone, Debug, PartialEq)]
pub struct Crf {
    pub transitions: ParamTensor,
    fixed: Vec<bool>,
    num_tags: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Decoded {
    pub path: Vec<usize>,
    pub score: f64,
}

impl Crf {
    pub fn new(name: &str, num_tags: usize) -> Self {
        let k = num_tags;
        let size = k + 2;
        let mut t = Tensor::zeros(&[size, size]);
        let mut fixed = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                if j == start_state(k) || i == stop_state(k) {
                    t.set(i, j, FORBIDDEN);
                    fixed[i * size + j] = true;
                }
            }
        }
        Crf {
            transitions: ParamTensor::new(format!("{name}.transitions"), t),
            fixed,
            num_tags,
        }
    }

    /// Also forbid `O → I-X`, `START → I-X` and `B-Y/I-Y → I-X` for `X ≠ Y`.
    pub fn with_iob_constraints(mut self, labels: &[String]) -> Self {
        let k = self.num_tags;
        let size = k + 2;
        let parsed: Vec<(TagPrefix, &str)> = labels
            .iter()
            .map(|l| parse_tag(l).unwrap_or((TagPrefix::Outside, "")))
            .collect();
        for (j, &(pj, tj)) in parsed.iter().enumerate() {
            if pj != TagPrefix::Inside {
                continue;
            }
            let s = start_state(k);
            self.transitions.value.set(s, j, FORBIDDEN);
            self.fixed[s * size + j] = true;
            for (i, &(pi, ti)) in parsed.iter().enumerate() {
                if pi == TagPrefix::Outside || ti != tj {
                    self.transitions.value.set(i, j, FORBIDDEN);
                    self.fixed[i * size + j] = true;
                }
            }
        }
        self
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn fixed_mask(&self) -> &[bool] {
        &self.fixed
    }

    /// NLL of `gold`; accumulates transition gradients and returns `dL/dP`.
    pub fn nll(&mut self, emissions: &Tensor, gold: &[usize]) -> Result<(f64, Tensor)> {
        let out = nll_loss(emissions, &self.transitions.value, gold)?;
        for (idx, (g, d)) in self
            .transitions
            .grad
            .data_mut()
            .iter_mut()
            .zip(out.d_transitions.data())
            .enumerate()
        {
            if !self.fixed[idx] {
                *g += d;
            }
        }
        Ok((out.loss, out.d_emissions))
    }

    pub fn loss(&self, emissions: &Tensor, gold: &[usize]) -> Result<f64> {
        Ok(non_negative(-sequence_log_prob(emissions, &self.transitions.value, gold)?))
    }

    pub fn decode(&self, emissions: &Tensor) -> Result<Decoded> {
        let (path, score) = viterbi_decode(emissions, &self.transitions.value)?;
        Ok(Decoded { path, score })
    }

    pub fn log_prob(&self, emissions: &Tensor, gold: &[usize]) -> Result<f64> {
        sequence_log_prob(emissions, &self.transitions.value, gold)
    }
}

impl Parameterized for Crf {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.transitions]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.transitions]
    }
}
