//! Dense row-major tensors, stable reductions, and finite-difference
//! gradient checking.
//!
//! Everything runs in `f64`. Layers keep their own forward caches and expose
//! explicit backward functions; there is no general autodiff tape.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("tensor data must be finite".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build an `rows × cols` matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Select a contiguous block of rows.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec())
    }

    /// Select a contiguous block of columns from a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::matrix(r, w, out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::shape(format!("{what}: expected a matrix, got {:?}", t.shape)));
    }
    Ok(())
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul lhs")?;
    check_matrix(b, "matmul rhs")?;
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    Ok(matmul_unchecked(a, b))
}

pub(crate) fn matmul_unchecked(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul_bt lhs")?;
    check_matrix(b, "matmul_bt rhs")?;
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "matmul_bt: {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    Ok(matmul_bt_unchecked(a, b))
}

pub(crate) fn matmul_bt_unchecked(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn matmul_at_unchecked(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a matrix.
pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        out.extend(softmax_unchecked(t.row(i)));
    }
    Tensor::matrix(r, c, out)
}

/// Backward through a row-wise softmax given its output `probs` and the
/// upstream gradient `dprobs`.
pub(crate) fn softmax_rows_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let (r, c) = (probs.rows(), probs.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let p = probs.row(i);
        let dp = dprobs.row(i);
        let s = dot(p, dp);
        for j in 0..c {
            out[i * c + j] = p[j] * (dp[j] - s);
        }
    }
    Tensor::matrix(r, c, out)
}

pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Argument("logsumexp of an empty vector".into()));
    }
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters are saved in checkpoints but never updated or
    /// gradient-checked.
    pub frozen: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        ParamTensor {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        ParamTensor::new(name, Tensor::zeros(shape))
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns trainable parameters.
///
/// The visiting order must be stable: optimizers and checkpoints key their
/// state by position and name.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Multiple of machine epsilon charged to each loss evaluation.
const ROUNDING_SLACK: f64 = 4.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences
/// `(L(θ+h) − L(θ−h)) / 2h` for every scalar of every non-frozen parameter.
///
/// The discrepancy is first reduced by the rounding resolution of the
/// difference quotient, `4ε(|L₊| + |L₋|) / 2h`, so structurally zero
/// gradients do not fail on floating-point noise.
///
/// `loss_and_grad` must accumulate gradients into the (already zeroed)
/// parameters and return the loss; `loss` must return the same value
/// without touching gradients.
pub fn finite_diff_check<M, L, G>(
    model: &mut M,
    mut loss: L,
    mut loss_and_grad: G,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    M: Parameterized + ?Sized,
    L: FnMut(&M) -> f64,
    G: FnMut(&mut M) -> f64,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {step}")));
    }
    let first = loss(model);
    let second = loss(model);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    model.zero_grad();
    let _ = loss_and_grad(model);
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    model.zero_grad();

    let mut report = Vec::new();
    let n_params = analytic.len();
    for pi in 0..n_params {
        let (name, len, frozen) = {
            let p = &model.params()[pi];
            (p.name.clone(), p.value.len(), p.frozen)
        };
        if frozen {
            continue;
        }
        let mut max_err: f64 = 0.0;
        for j in 0..len {
            let orig = model.params()[pi].value.data()[j];
            model.params_mut()[pi].value.data_mut()[j] = orig + step;
            let plus = loss(model);
            model.params_mut()[pi].value.data_mut()[j] = orig - step;
            let minus = loss(model);
            model.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            // Differences below the rounding resolution of the quotient are
            // not measurable.
            let resolution = ROUNDING_SLACK * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * step);
            let a = analytic[pi][j];
            let gap = ((a - numeric).abs() - resolution).max(0.0);
            max_err = max_err.max(gap / a.abs().max(numeric.abs()).max(1e-8));
        }
        report.push(ParamCheck {
            name,
            scalars: len,
            max_rel_error: max_err,
        });
    }
    let max_rel_error = report.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        tolerance,
    })
}
