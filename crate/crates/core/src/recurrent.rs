//! LSTM cell, bidirectional encoder and character-level word composers.

use rand::Rng;

use crate::embeddings::{CharTable, PAD_CHAR};
use crate::error::{Error, Result};
use crate::layers::{dropout_mask, DropoutMask, Mode};
use crate::numerics::{dot, sigmoid, ParamTensor, Parameterized, Tensor};

/// Default cap on characters per word.
pub const DEFAULT_MAX_CHARS: usize = 30;
pub const CNN_KERNEL: usize = 3;
pub const CNN_FILTERS: usize = 10;
pub const CNN_CHAR_DIM: usize = 10;
pub const CNN_DROPOUT: f64 = 0.5;
pub const LSTM_CHAR_DIM: usize = 20;
pub const LSTM_CHAR_HIDDEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// One LSTM cell. The weight matrix packs the gate rows in the order
/// input, forget, output, candidate; its columns are `[h_{t−1}; x_t; 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub weight: ParamTensor,
    hidden: usize,
    input: usize,
}

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    z: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let cols = hidden + input + 1;
        let bound = (6.0 / (4 * hidden + cols - 1) as f64).sqrt();
        let mut w = Vec::with_capacity(4 * hidden * cols);
        for _ in 0..4 * hidden {
            for c in 0..cols {
                w.push(if c == cols - 1 { 0.0 } else { rng.gen_range(-bound..=bound) });
            }
        }
        LstmCell {
            weight: ParamTensor::new(format!("{name}.weight"), Tensor::matrix(4 * hidden, cols, w)),
            hidden,
            input,
        }
    }

    pub fn zeros(name: &str, input: usize, hidden: usize) -> Self {
        LstmCell {
            weight: ParamTensor::zeros(format!("{name}.weight"), &[4 * hidden, hidden + input + 1]),
            hidden,
            input,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn step(&self, x: &[f64], prev: &LstmState) -> Result<(LstmState, LstmStepCache)> {
        if x.len() != self.input || prev.h.len() != self.hidden || prev.c.len() != self.hidden {
            return Err(Error::shape(format!(
                "{}: input {} (want {}), state {}/{} (want {})",
                self.weight.name,
                x.len(),
                self.input,
                prev.h.len(),
                prev.c.len(),
                self.hidden
            )));
        }
        Ok(self.step_unchecked(x, prev))
    }

    fn step_unchecked(&self, x: &[f64], prev: &LstmState) -> (LstmState, LstmStepCache) {
        let h = self.hidden;
        let mut z = Vec::with_capacity(h + self.input + 1);
        z.extend_from_slice(&prev.h);
        z.extend_from_slice(x);
        z.push(1.0);
        let w = &self.weight.value;
        let pre = |r: usize| dot(w.row(r), &z);
        let i: Vec<f64> = (0..h).map(|k| sigmoid(pre(k))).collect();
        let f: Vec<f64> = (0..h).map(|k| sigmoid(pre(h + k))).collect();
        let o: Vec<f64> = (0..h).map(|k| sigmoid(pre(2 * h + k))).collect();
        let g: Vec<f64> = (0..h).map(|k| pre(3 * h + k).tanh()).collect();
        let c: Vec<f64> = (0..h).map(|k| f[k] * prev.c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        (
            LstmState { h: hn, c },
            LstmStepCache {
                z,
                i,
                f,
                o,
                g,
                c_prev: prev.c.clone(),
                tanh_c,
            },
        )
    }

    /// Given `dL/dh_t` and `dL/dc_t`, accumulate weight gradients and return
    /// `(dL/dx_t, dL/dh_{t−1}, dL/dc_{t−1})`.
    pub fn step_backward(
        &mut self,
        cache: &LstmStepCache,
        dh: &[f64],
        dc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let mut dpre = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let do_ = dh[k] * cache.tanh_c[k];
            let dct = dc[k] + dh[k] * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
            let di = dct * cache.g[k];
            let dg = dct * cache.i[k];
            let df = dct * cache.c_prev[k];
            dc_prev[k] = dct * cache.f[k];
            dpre[k] = di * cache.i[k] * (1.0 - cache.i[k]);
            dpre[h + k] = df * cache.f[k] * (1.0 - cache.f[k]);
            dpre[2 * h + k] = do_ * cache.o[k] * (1.0 - cache.o[k]);
            dpre[3 * h + k] = dg * (1.0 - cache.g[k] * cache.g[k]);
        }
        let cols = cache.z.len();
        let mut dz = vec![0.0; cols];
        let w = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        for (r, &d) in dpre.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let wrow = &w[r * cols..(r + 1) * cols];
            let grow = &mut gw[r * cols..(r + 1) * cols];
            for c in 0..cols {
                grow[c] += d * cache.z[c];
                dz[c] += d * wrow[c];
            }
        }
        let dh_prev = dz[..h].to_vec();
        let dx = dz[h..h + self.input].to_vec();
        (dx, dh_prev, dc_prev)
    }

    /// Run over `xs` (one row per step) from the zero state.
    pub fn run(&self, xs: &Tensor) -> Result<(Tensor, Vec<LstmStepCache>)> {
        if xs.cols() != self.input {
            return Err(Error::shape(format!(
                "{}: input width {} != {}",
                self.weight.name,
                xs.cols(),
                self.input
            )));
        }
        let mut state = LstmState::zeros(self.hidden);
        let mut hs = Vec::with_capacity(xs.rows() * self.hidden);
        let mut caches = Vec::with_capacity(xs.rows());
        for t in 0..xs.rows() {
            let (next, cache) = self.step_unchecked(xs.row(t), &state);
            hs.extend_from_slice(&next.h);
            caches.push(cache);
            state = next;
        }
        Ok((Tensor::matrix(xs.rows(), self.hidden, hs), caches))
    }

    /// Backward through [`run`](Self::run) given `dL/dh_t` for every step.
    pub fn run_backward(&mut self, caches: &[LstmStepCache], dhs: &Tensor) -> Tensor {
        let n = caches.len();
        let mut dxs = vec![0.0; n * self.input];
        let mut dh_next = vec![0.0; self.hidden];
        let mut dc_next = vec![0.0; self.hidden];
        for t in (0..n).rev() {
            let dh: Vec<f64> = dhs.row(t).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (dx, dh_prev, dc_prev) = self.step_backward(&caches[t], &dh, &dc_next);
            dxs[t * self.input..(t + 1) * self.input].copy_from_slice(&dx);
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Tensor::matrix(n, self.input, dxs)
    }
}

impl Parameterized for LstmCell {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight]
    }
}

fn reverse_rows(t: &Tensor) -> Tensor {
    let n = t.rows();
    let c = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for r in (0..n).rev() {
        out.extend_from_slice(t.row(r));
    }
    Tensor::matrix(n, c, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Clone, Debug)]
pub struct BiLstmOutput {
    /// `n × 2·hidden`, row t = `[h_t→; h_t←]`.
    pub states: Tensor,
    pub last_forward: Vec<f64>,
    pub last_backward: Vec<f64>,
    fwd_cache: Vec<LstmStepCache>,
    bwd_cache: Vec<LstmStepCache>,
}

impl BiLstmOutput {
    /// `[h_last→; h_last←]`, the whole-sequence summary.
    pub fn summary(&self) -> Vec<f64> {
        let mut v = self.last_forward.clone();
        v.extend_from_slice(&self.last_backward);
        v
    }
}

impl BiLstm {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            forward: LstmCell::new(&format!("{name}.fwd"), input, hidden, rng),
            backward: LstmCell::new(&format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden()
    }

    pub fn encode(&self, seq: &Tensor) -> Result<BiLstmOutput> {
        if seq.rows() == 0 || seq.is_empty() {
            return Err(Error::Argument("bilstm over an empty sequence".into()));
        }
        let n = seq.rows();
        let h = self.hidden();
        let (hf, fwd_cache) = self.forward.run(seq)?;
        let (hb_rev, bwd_cache) = self.backward.run(&reverse_rows(seq))?;
        let mut states = Vec::with_capacity(n * 2 * h);
        for t in 0..n {
            states.extend_from_slice(hf.row(t));
            states.extend_from_slice(hb_rev.row(n - 1 - t));
        }
        Ok(BiLstmOutput {
            states: Tensor::matrix(n, 2 * h, states),
            last_forward: hf.row(n - 1).to_vec(),
            last_backward: hb_rev.row(n - 1).to_vec(),
            fwd_cache,
            bwd_cache,
        })
    }

    /// `d_states: n × 2·hidden` → `dL/dseq`. Gradients w.r.t. the summary
    /// vector go into the matching rows of `d_states` (last row, forward
    /// half; first row, backward half).
    pub fn backward_pass(&mut self, out: &BiLstmOutput, d_states: &Tensor) -> Tensor {
        let n = d_states.rows();
        let h = self.hidden();
        let dhf = d_states.slice_cols(0, h);
        let dhb = reverse_rows(&d_states.slice_cols(h, 2 * h));
        let dxf = self.forward.run_backward(&out.fwd_cache, &dhf);
        let dxb = reverse_rows(&self.backward.run_backward(&out.bwd_cache, &dhb));
        let mut dx = dxf;
        dx.add_assign(&dxb);
        debug_assert_eq!(dx.rows(), n);
        dx
    }
}

impl Parameterized for BiLstm {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.forward.weight, &self.backward.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.forward.weight, &mut self.backward.weight]
    }
}

/// Pad a character id sequence up to the kernel width.
pub fn pad_to_kernel(mut ids: Vec<usize>, kernel: usize) -> Vec<usize> {
    while ids.len() < kernel {
        ids.push(PAD_CHAR);
    }
    ids
}

/// Char-CNN composer: same-padded 1-D convolution over character
/// embeddings, max-over-time pooling per filter, dropout on the result.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCnn {
    pub table: CharTable,
    /// `filters × (kernel · char_dim)`
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub dropout: f64,
    kernel: usize,
}

#[derive(Clone, Debug)]
pub struct CharCnnCache {
    ids: Vec<usize>,
    argmax: Vec<Option<usize>>,
    mask: DropoutMask,
}

impl CharCnn {
    pub fn new<R: Rng>(name: &str, table: CharTable, filters: usize, kernel: usize, dropout: f64, rng: &mut R) -> Self {
        let width = kernel * table.dim();
        let bound = (6.0 / (width + filters) as f64).sqrt();
        let w = (0..filters * width).map(|_| rng.gen_range(-bound..=bound)).collect();
        CharCnn {
            table,
            weight: ParamTensor::new(format!("{name}.conv.weight"), Tensor::matrix(filters, width, w)),
            bias: ParamTensor::zeros(format!("{name}.conv.bias"), &[filters]),
            dropout,
            kernel,
        }
    }

    pub fn filters(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.filters()
    }

    fn window_vector(&self, ids: &[usize], pos: isize) -> Option<&[f64]> {
        if pos < 0 || pos as usize >= ids.len() {
            return None;
        }
        self.table.vector(ids[pos as usize])
    }

    fn conv_at(&self, ids: &[usize], t: usize, f: usize) -> f64 {
        let dim = self.table.dim();
        let half = (self.kernel / 2) as isize;
        let w = self.weight.value.row(f);
        let mut s = self.bias.value.data()[f];
        for k in 0..self.kernel {
            if let Some(e) = self.window_vector(ids, t as isize + k as isize - half) {
                s += dot(&w[k * dim..(k + 1) * dim], e);
            }
        }
        s
    }

    /// Compose from character ids (may contain `PAD_CHAR`). Pooling only
    /// considers non-pad positions.
    pub fn compose_ids<R: Rng + ?Sized>(&self, ids: &[usize], mode: Mode, rng: &mut R) -> Result<(Vec<f64>, CharCnnCache)> {
        let nf = self.filters();
        let mut pooled = vec![0.0; nf];
        let mut argmax = vec![None; nf];
        for f in 0..nf {
            let mut best: Option<(usize, f64)> = None;
            for (t, &id) in ids.iter().enumerate() {
                if id == PAD_CHAR {
                    continue;
                }
                let v = self.conv_at(ids, t, f);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((t, v));
                }
            }
            if let Some((t, v)) = best {
                pooled[f] = v;
                argmax[f] = Some(t);
            }
        }
        let mask = dropout_mask(nf, self.dropout, mode, rng)?;
        mask.apply(&mut pooled);
        Ok((
            pooled,
            CharCnnCache {
                ids: ids.to_vec(),
                argmax,
                mask,
            },
        ))
    }

    pub fn compose<R: Rng + ?Sized>(&self, word: &str, max_chars: usize, mode: Mode, rng: &mut R) -> Result<(Vec<f64>, CharCnnCache)> {
        let ids = pad_to_kernel(self.table.encode(word, max_chars), self.kernel);
        self.compose_ids(&ids, mode, rng)
    }

    pub fn backward(&mut self, cache: &CharCnnCache, dv: &[f64]) {
        let dim = self.table.dim();
        let half = (self.kernel / 2) as isize;
        for f in 0..self.filters() {
            let Some(t) = cache.argmax[f] else { continue };
            let d = dv[f] * cache.mask.0[f];
            if d == 0.0 {
                continue;
            }
            self.bias.grad.data_mut()[f] += d;
            for k in 0..self.kernel {
                let pos = t as isize + k as isize - half;
                if pos < 0 || pos as usize >= cache.ids.len() {
                    continue;
                }
                let id = cache.ids[pos as usize];
                if id == PAD_CHAR {
                    continue;
                }
                let e = self.table.vectors.value.row(id).to_vec();
                let wslice = self.weight.value.row(f)[k * dim..(k + 1) * dim].to_vec();
                let grow = &mut self.weight.grad.row_mut(f)[k * dim..(k + 1) * dim];
                for (g, ev) in grow.iter_mut().zip(&e) {
                    *g += d * ev;
                }
                let de: Vec<f64> = wslice.iter().map(|w| d * w).collect();
                self.table.accumulate_grad(id, &de);
            }
        }
    }
}

impl Parameterized for CharCnn {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.table.vectors, &self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.table.vectors, &mut self.weight, &mut self.bias]
    }
}

/// Char-LSTM composer: the final hidden state over the character sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CharLstm {
    pub table: CharTable,
    pub cell: LstmCell,
}

#[derive(Clone, Debug)]
pub struct CharLstmCache {
    ids: Vec<usize>,
    steps: Vec<LstmStepCache>,
}

impl CharLstm {
    pub fn new<R: Rng>(name: &str, table: CharTable, hidden: usize, rng: &mut R) -> Self {
        let cell = LstmCell::new(&format!("{name}.lstm"), table.dim(), hidden, rng);
        CharLstm { table, cell }
    }

    pub fn output_dim(&self) -> usize {
        self.cell.hidden()
    }

    pub fn compose_ids(&self, ids: &[usize]) -> Result<(Vec<f64>, CharLstmCache)> {
        let real: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD_CHAR).collect();
        if real.is_empty() {
            return Err(Error::Argument("char composer over an empty word".into()));
        }
        let dim = self.table.dim();
        let mut xs = Vec::with_capacity(real.len() * dim);
        for &id in &real {
            xs.extend_from_slice(self.table.vectors.value.row(id));
        }
        let (hs, steps) = self.cell.run(&Tensor::matrix(real.len(), dim, xs))?;
        Ok((hs.row(real.len() - 1).to_vec(), CharLstmCache { ids: real, steps }))
    }

    pub fn compose(&self, word: &str, max_chars: usize) -> Result<(Vec<f64>, CharLstmCache)> {
        self.compose_ids(&self.table.encode(word, max_chars))
    }

    pub fn backward(&mut self, cache: &CharLstmCache, dv: &[f64]) {
        let n = cache.ids.len();
        let h = self.cell.hidden();
        let mut dhs = Tensor::zeros(&[n, h]);
        dhs.row_mut(n - 1).copy_from_slice(dv);
        let dxs = self.cell.run_backward(&cache.steps, &dhs);
        for (t, &id) in cache.ids.iter().enumerate() {
            self.table.accumulate_grad(id, dxs.row(t));
        }
    }
}

impl Parameterized for CharLstm {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.table.vectors, &self.cell.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.table.vectors, &mut self.cell.weight]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CharComposer {
    Cnn(CharCnn),
    Lstm(CharLstm),
}

#[derive(Clone, Debug)]
pub enum CharComposerCache {
    Cnn(CharCnnCache),
    Lstm(CharLstmCache),
}

impl CharComposer {
    pub fn table(&self) -> &CharTable {
        match self {
            CharComposer::Cnn(c) => &c.table,
            CharComposer::Lstm(c) => &c.table,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            CharComposer::Cnn(c) => c.output_dim(),
            CharComposer::Lstm(c) => c.output_dim(),
        }
    }

    /// Character ids for `word` in the form `compose_ids` expects.
    pub fn encode(&self, word: &str, max_chars: usize) -> Vec<usize> {
        match self {
            CharComposer::Cnn(c) => pad_to_kernel(c.table.encode(word, max_chars), c.kernel),
            CharComposer::Lstm(c) => c.table.encode(word, max_chars),
        }
    }

    pub fn compose_ids<R: Rng + ?Sized>(&self, ids: &[usize], mode: Mode, rng: &mut R) -> Result<(Vec<f64>, CharComposerCache)> {
        match self {
            CharComposer::Cnn(c) => c.compose_ids(ids, mode, rng).map(|(v, k)| (v, CharComposerCache::Cnn(k))),
            CharComposer::Lstm(c) => c.compose_ids(ids).map(|(v, k)| (v, CharComposerCache::Lstm(k))),
        }
    }

    pub fn backward(&mut self, cache: &CharComposerCache, dv: &[f64]) {
        match (self, cache) {
            (CharComposer::Cnn(c), CharComposerCache::Cnn(k)) => c.backward(k, dv),
            (CharComposer::Lstm(c), CharComposerCache::Lstm(k)) => c.backward(k, dv),
            _ => unreachable!("composer/cache kind mismatch"),
        }
    }
}

impl Parameterized for CharComposer {
    fn params(&self) -> Vec<&ParamTensor> {
        match self {
            CharComposer::Cnn(c) => c.params(),
            CharComposer::Lstm(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            CharComposer::Cnn(c) => c.params_mut(),
            CharComposer::Lstm(c) => c.params_mut(),
        }
    }
}
