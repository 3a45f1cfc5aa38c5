//! Two-level attention recurrent classifier over visit sequences, with exact
//! reverse-mode gradients.
//!
//! For a sequence of visits `x_1 .. x_T` (sets of code indices):
//!
//! ```text
//! v_t   = Σ_{k ∈ x_t} E[k]                     visit embedding
//! g_t   = GRU_α(v_t, g_{t+1}),  h_t = GRU_β(v_t, h_{t+1})   (run backwards in time)
//! α     = softmax_t(w_α · g_t + b_α)           visit-level attention
//! β_t   = tanh(W_β h_t + b_β)                  feature-level attention
//! c     = Σ_t α_t (β_t ⊙ v_t)
//! p     = softmax(W_out c + b_out)             [p(preterm), p(fullterm)]
//! ```
//!
//! The GRU uses update gate `z`, reset gate `r` and candidate
//! `n = tanh(W_n x + U_n (r ⊙ h) + b_n)`, with `h' = (1 - z) ⊙ n + z ⊙ h`.
//!
//! Batch gradients are accumulated over fixed chunks of examples and the chunk
//! sums are added in order, so the result is bit-identical for any number of
//! worker threads.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;

use crate::datamodel::{Label, LabeledExample};
use crate::error::{Error, Result};
use crate::noise::{corrected_probabilities, CorruptionMatrix, LOG_EPS};
use crate::{par, rng};

/// Examples per gradient-accumulation chunk.
const GRAD_CHUNK: usize = 8;

/// Row-major dense matrix. Vectors are stored as `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out[i - rows.start] += Σ_j M[i][j] x[j]` for `i` in `rows`.
    fn gemv(&self, rows: Range<usize>, x: &[f64], out: &mut [f64]) {
        for (o, i) in out.iter_mut().zip(rows) {
            *o += dot(self.row(i), x);
        }
    }

    /// `out[j] += Σ_i M[i][j] y[i - rows.start]` for `i` in `rows`.
    fn gemv_t(&self, rows: Range<usize>, y: &[f64], out: &mut [f64]) {
        for (&yi, i) in y.iter().zip(rows) {
            axpy(yi, self.row(i), out);
        }
    }

    /// `M[i][j] += y[i - rows.start] x[j]` for `i` in `rows`.
    fn ger(&mut self, rows: Range<usize>, y: &[f64], x: &[f64]) {
        for (&yi, i) in y.iter().zip(rows) {
            axpy(yi, x, self.row_mut(i));
        }
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
}

impl Dims {
    pub fn new(vocab_size: usize, d_emb: usize, d_hidden: usize) -> Result<Self> {
        if vocab_size == 0 || d_emb == 0 || d_hidden == 0 {
            return Err(Error::config("dims", "all dimensions must be positive"));
        }
        Ok(Dims {
            vocab_size,
            d_emb,
            d_hidden,
        })
    }
}

/// Gated recurrent cell. Gate blocks in `w_x`, `w_h` and `b` are stacked as
/// update, reset, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Matrix,
}

impl GruParams {
    fn zeros(d_in: usize, d_h: usize) -> Self {
        GruParams {
            w_x: Matrix::zeros(3 * d_h, d_in),
            w_h: Matrix::zeros(3 * d_h, d_h),
            b: Matrix::zeros(3 * d_h, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub embedding: Matrix,
    pub alpha_rnn: GruParams,
    pub beta_rnn: GruParams,
    pub w_alpha: Matrix,
    pub b_alpha: Matrix,
    pub w_beta: Matrix,
    pub b_beta: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let Dims {
            vocab_size: v,
            d_emb: e,
            d_hidden: h,
        } = dims;
        ModelParams {
            dims,
            embedding: Matrix::zeros(v, e),
            alpha_rnn: GruParams::zeros(e, h),
            beta_rnn: GruParams::zeros(e, h),
            w_alpha: Matrix::zeros(1, h),
            b_alpha: Matrix::zeros(1, 1),
            w_beta: Matrix::zeros(e, h),
            b_beta: Matrix::zeros(e, 1),
            w_out: Matrix::zeros(2, e),
            b_out: Matrix::zeros(2, 1),
        }
    }

    pub const TENSOR_NAMES: [&'static str; 13] = [
        "embedding",
        "alpha_rnn.w_x",
        "alpha_rnn.w_h",
        "alpha_rnn.b",
        "beta_rnn.w_x",
        "beta_rnn.w_h",
        "beta_rnn.b",
        "w_alpha",
        "b_alpha",
        "w_beta",
        "b_beta",
        "w_out",
        "b_out",
    ];

    pub fn tensors(&self) -> [(&'static str, &Matrix); 13] {
        let n = Self::TENSOR_NAMES;
        [
            (n[0], &self.embedding),
            (n[1], &self.alpha_rnn.w_x),
            (n[2], &self.alpha_rnn.w_h),
            (n[3], &self.alpha_rnn.b),
            (n[4], &self.beta_rnn.w_x),
            (n[5], &self.beta_rnn.w_h),
            (n[6], &self.beta_rnn.b),
            (n[7], &self.w_alpha),
            (n[8], &self.b_alpha),
            (n[9], &self.w_beta),
            (n[10], &self.b_beta),
            (n[11], &self.w_out),
            (n[12], &self.b_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 13] {
        let n = Self::TENSOR_NAMES;
        [
            (n[0], &mut self.embedding),
            (n[1], &mut self.alpha_rnn.w_x),
            (n[2], &mut self.alpha_rnn.w_h),
            (n[3], &mut self.alpha_rnn.b),
            (n[4], &mut self.beta_rnn.w_x),
            (n[5], &mut self.beta_rnn.w_h),
            (n[6], &mut self.beta_rnn.b),
            (n[7], &mut self.w_alpha),
            (n[8], &mut self.b_alpha),
            (n[9], &mut self.w_beta),
            (n[10], &mut self.b_beta),
            (n[11], &mut self.w_out),
            (n[12], &mut self.b_out),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, m) in self.tensors_mut() {
            m.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, m)| m.data.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    /// Text container: a version line, a dims line, then each tensor's header
    /// followed by its row-major values as IEEE-754 bit patterns in hex.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let d = self.dims;
        writeln!(out, "alc-checkpoint 1").unwrap();
        writeln!(out, "dims {} {} {}", d.vocab_size, d.d_emb, d.d_hidden).unwrap();
        for (name, m) in self.tensors() {
            writeln!(out, "tensor {name} {} {}", m.rows, m.cols).unwrap();
            for r in 0..m.rows {
                let row: Vec<String> = m.row(r).iter().map(|x| format!("{:016x}", x.to_bits())).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some("alc-checkpoint 1") {
            return Err(bad("unsupported header".into()));
        }
        let dims_line = lines.next().ok_or_else(|| bad("missing dims".into()))?;
        let d: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| bad("missing dims".into()))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(format!("bad dims `{dims_line}`"))))
            .collect::<Result<_>>()?;
        let [v, e, h] = d[..] else {
            return Err(bad("dims needs three values".into()));
        };
        let mut params = ModelParams::zeros(Dims::new(v, e, h)?);
        for (name, m) in params.tensors_mut() {
            let header = lines.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if header != format!("tensor {name} {} {}", m.rows, m.cols) {
                return Err(bad(format!("expected tensor {name} {}x{}, found `{header}`", m.rows, m.cols)));
            }
            for r in 0..m.rows {
                let line = lines.next().ok_or_else(|| bad(format!("{name}: missing row {r}")))?;
                let row = m.row_mut(r);
                let mut n = 0;
                for (slot, tok) in row.iter_mut().zip(line.split_whitespace()) {
                    let bits = u64::from_str_radix(tok, 16).map_err(|_| bad(format!("{name}: bad value `{tok}`")))?;
                    *slot = f64::from_bits(bits);
                    n += 1;
                }
                if n != m.cols || line.split_whitespace().count() != m.cols {
                    return Err(bad(format!("{name}: row {r} has wrong length")));
                }
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

/// Uniform Glorot initialization of every weight matrix; biases start at zero.
pub fn init_params(dims: Dims, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(dims);
    let mut rng = rng::stream(seed, &[rng::tag("init")]);
    let Dims { d_emb: e, d_hidden: h, .. } = dims;
    let fans = [
        (dims.vocab_size, e),
        (e, h),
        (h, h),
        (0, 0),
        (e, h),
        (h, h),
        (0, 0),
        (h, 1),
        (0, 0),
        (h, e),
        (0, 0),
        (e, 2),
        (0, 0),
    ];
    for ((_, m), (fan_in, fan_out)) in params.tensors_mut().into_iter().zip(fans) {
        if fan_in + fan_out == 0 {
            continue;
        }
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        m.data.iter_mut().for_each(|x| *x = rng.random_range(-s..s));
    }
    params
}

/// Sum of the embedding rows of `codes`.
pub fn embed_visit(codes: &[u32], params: &ModelParams) -> Result<Vec<f64>> {
    let mut v = vec![0.0; params.dims.d_emb];
    for &k in codes {
        if k as usize >= params.dims.vocab_size {
            return Err(Error::CodeOutOfRange {
                index: k,
                size: params.dims.vocab_size,
            });
        }
        axpy(1.0, params.embedding.row(k as usize), &mut v);
    }
    Ok(v)
}

/// Sequences padded with empty visits to the longest one in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sequences: Vec<Vec<Vec<u32>>>,
    pub mask: Vec<Vec<bool>>,
    /// Loss targets: clean labels for plain epochs, noisy labels for corrected ones.
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn new(sequences: Vec<Vec<Vec<u32>>>, labels: Vec<Label>) -> Self {
        assert_eq!(sequences.len(), labels.len());
        let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut mask = Vec::with_capacity(sequences.len());
        let sequences = sequences
            .into_iter()
            .map(|mut s| {
                let n = s.len();
                mask.push((0..max_len).map(|i| i < n).collect());
                s.resize(max_len, Vec::new());
                s
            })
            .collect();
        Batch { sequences, mask, labels }
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = (&'a LabeledExample, Label)>) -> Self {
        let (seqs, labels) = examples.into_iter().map(|(e, l)| (e.sequence(), l)).unzip();
        Batch::new(seqs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn valid(&self, i: usize) -> &[Vec<u32>] {
        let n = self.mask[i].iter().take_while(|&&m| m).count();
        &self.sequences[i][..n]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GruStep {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h_prev: Vec<f64>,
}

/// Intermediate values of one example's forward pass. Per-visit vectors are
/// indexed in time order over the real (unpadded) visits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub visit_embeddings: Vec<Vec<f64>>,
    pub alpha_states: Vec<Vec<f64>>,
    pub beta_states: Vec<Vec<f64>>,
    /// Visit attention over the padded length; zero at padded positions.
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub context: Vec<f64>,
    pub probs: [f64; 2],
    alpha_steps: Vec<GruStep>,
    beta_steps: Vec<GruStep>,
}

impl ForwardTrace {
    pub fn n_visits(&self) -> usize {
        self.visit_embeddings.len()
    }
}

fn gru_step(p: &GruParams, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, GruStep) {
    let d = h_prev.len();
    let mut a = p.b.data.clone();
    p.w_x.gemv(0..3 * d, x, &mut a);
    p.w_h.gemv(0..2 * d, h_prev, &mut a[..2 * d]);
    let z: Vec<f64> = a[..d].iter().map(|&v| sigmoid(v)).collect();
    let r: Vec<f64> = a[d..2 * d].iter().map(|&v| sigmoid(v)).collect();
    let s: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    p.w_h.gemv(2 * d..3 * d, &s, &mut a[2 * d..]);
    let n: Vec<f64> = a[2 * d..].iter().map(|v| v.tanh()).collect();
    let h = (0..d).map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i]).collect();
    (
        h,
        GruStep {
            z,
            r,
            n,
            h_prev: h_prev.to_vec(),
        },
    )
}

/// Accumulates parameter gradients of one GRU step into `g`, adds the input
/// gradient to `dx`, and returns the gradient for the previous state.
fn gru_step_backward(p: &GruParams, g: &mut GruParams, step: &GruStep, x: &[f64], dh: &[f64], dx: &mut [f64]) -> Vec<f64> {
    let d = dh.len();
    let GruStep { z, r, n, h_prev } = step;
    let mut da = vec![0.0; 3 * d];
    let mut dh_prev = vec![0.0; d];
    for i in 0..d {
        let dn = dh[i] * (1.0 - z[i]);
        let dz = dh[i] * (h_prev[i] - n[i]);
        dh_prev[i] = dh[i] * z[i];
        da[i] = dz * z[i] * (1.0 - z[i]);
        da[2 * d + i] = dn * (1.0 - n[i] * n[i]);
    }
    let mut ds = vec![0.0; d];
    p.w_h.gemv_t(2 * d..3 * d, &da[2 * d..], &mut ds);
    for i in 0..d {
        let dr = ds[i] * h_prev[i];
        dh_prev[i] += ds[i] * r[i];
        da[d + i] = dr * r[i] * (1.0 - r[i]);
    }
    let s: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    g.w_x.ger(0..3 * d, &da, x);
    g.w_h.ger(0..2 * d, &da[..2 * d], h_prev);
    g.w_h.ger(2 * d..3 * d, &da[2 * d..], &s);
    axpy(1.0, &da, &mut g.b.data);
    p.w_x.gemv_t(0..3 * d, &da, dx);
    p.w_h.gemv_t(0..2 * d, &da[..2 * d], &mut dh_prev);
    dh_prev
}

fn forward_one(seq: &[Vec<u32>], padded_len: usize, params: &ModelParams) -> Result<ForwardTrace> {
    let t_len = seq.len();
    if t_len == 0 {
        return Err(Error::EmptyDataset("sequence without visits".into()));
    }
    let Dims { d_emb: e, d_hidden: h, .. } = params.dims;
    let v: Vec<Vec<f64>> = seq.iter().map(|c| embed_visit(c, params)).collect::<Result<_>>()?;

    let run = |p: &GruParams| {
        let mut states = vec![Vec::new(); t_len];
        let mut steps = Vec::with_capacity(t_len);
        let mut prev = vec![0.0; h];
        for t in (0..t_len).rev() {
            let (next, step) = gru_step(p, &v[t], &prev);
            steps.push(step);
            states[t] = next.clone();
            prev = next;
        }
        steps.reverse();
        (states, steps)
    };
    let (g, alpha_steps) = run(&params.alpha_rnn);
    let (hs, beta_steps) = run(&params.beta_rnn);

    let mut alpha: Vec<f64> = g.iter().map(|gt| dot(&params.w_alpha.data, gt) + params.b_alpha.data[0]).collect();
    softmax_in_place(&mut alpha);
    let beta: Vec<Vec<f64>> = hs
        .iter()
        .map(|ht| {
            let mut a = params.b_beta.data.clone();
            params.w_beta.gemv(0..e, ht, &mut a);
            a.iter_mut().for_each(|x| *x = x.tanh());
            a
        })
        .collect();
    let mut context = vec![0.0; e];
    for t in 0..t_len {
        for j in 0..e {
            context[j] += alpha[t] * (beta[t][j] * v[t][j]);
        }
    }
    let mut logits = params.b_out.data.clone();
    params.w_out.gemv(0..2, &context, &mut logits);
    softmax_in_place(&mut logits);
    alpha.resize(padded_len.max(t_len), 0.0);
    Ok(ForwardTrace {
        visit_embeddings: v,
        alpha_states: g,
        beta_states: hs,
        alpha,
        beta,
        context,
        probs: [logits[0], logits[1]],
        alpha_steps,
        beta_steps,
    })
}

pub fn forward(batch: &Batch, params: &ModelParams) -> Result<Vec<ForwardTrace>> {
    let padded = batch.sequences.first().map_or(0, Vec::len);
    let idx: Vec<usize> = (0..batch.len()).collect();
    par::map(&idx, |&i| forward_one(batch.valid(i), padded, params))
        .into_iter()
        .collect()
}

/// Class probabilities for each example.
pub fn predict(examples: &[LabeledExample], params: &ModelParams) -> Result<Vec<[f64; 2]>> {
    par::map(examples, |ex| forward_one(&ex.sequence(), 0, params).map(|t| t.probs))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Cross-entropy on the model's own posterior.
    Plain,
    /// Cross-entropy on the noisy-label posterior `Cᵀ p`.
    Corrected(CorruptionMatrix),
}

pub fn loss_clean(trace: &ForwardTrace, label: Label) -> f64 {
    -(trace.probs[label.index()] + LOG_EPS).ln()
}

pub fn loss_corrected(trace: &ForwardTrace, noisy_label: Label, c: &CorruptionMatrix) -> f64 {
    let q = corrected_probabilities(trace.probs, c);
    -(q[noisy_label.index()] + LOG_EPS).ln()
}

pub fn loss(trace: &ForwardTrace, label: Label, kind: &LossKind) -> f64 {
    match kind {
        LossKind::Plain => loss_clean(trace, label),
        LossKind::Corrected(c) => loss_corrected(trace, label, c),
    }
}

/// Gradient of the example loss with respect to the output logits.
fn logit_grad(p: [f64; 2], label: Label, kind: &LossKind) -> [f64; 2] {
    let y = label.index();
    let dp = match kind {
        LossKind::Plain => {
            let mut dp = [0.0; 2];
            dp[y] = -1.0 / (p[y] + LOG_EPS);
            dp
        }
        LossKind::Corrected(c) => {
            let q = corrected_probabilities(p, c);
            let s = -1.0 / (q[y] + LOG_EPS);
            [c.entries[0][y] * s, c.entries[1][y] * s]
        }
    };
    let inner = p[0] * dp[0] + p[1] * dp[1];
    [p[0] * (dp[0] - inner), p[1] * (dp[1] - inner)]
}

fn backward_one(seq: &[Vec<u32>], tr: &ForwardTrace, dlogits: [f64; 2], params: &ModelParams, g: &mut ModelParams) {
    let t_len = tr.n_visits();
    let Dims { d_emb: e, d_hidden: h, .. } = params.dims;

    g.w_out.ger(0..2, &dlogits, &tr.context);
    axpy(1.0, &dlogits, &mut g.b_out.data);
    let mut dc = vec![0.0; e];
    params.w_out.gemv_t(0..2, &dlogits, &mut dc);

    let mut dv = vec![vec![0.0; e]; t_len];
    let mut dalpha = vec![0.0; t_len];
    let mut dg_direct = vec![vec![0.0; h]; t_len];
    let mut dh_direct = vec![vec![0.0; h]; t_len];
    for t in 0..t_len {
        let (a, b, v) = (tr.alpha[t], &tr.beta[t], &tr.visit_embeddings[t]);
        let mut da_beta = vec![0.0; e];
        for j in 0..e {
            dalpha[t] += dc[j] * b[j] * v[j];
            dv[t][j] += a * dc[j] * b[j];
            da_beta[j] = a * dc[j] * v[j] * (1.0 - b[j] * b[j]);
        }
        g.w_beta.ger(0..e, &da_beta, &tr.beta_states[t]);
        axpy(1.0, &da_beta, &mut g.b_beta.data);
        params.w_beta.gemv_t(0..e, &da_beta, &mut dh_direct[t]);
    }
    let inner: f64 = (0..t_len).map(|t| tr.alpha[t] * dalpha[t]).sum();
    for t in 0..t_len {
        let de = tr.alpha[t] * (dalpha[t] - inner);
        axpy(de, &tr.alpha_states[t], &mut g.w_alpha.data);
        g.b_alpha.data[0] += de;
        axpy(de, &params.w_alpha.data, &mut dg_direct[t]);
    }

    // The recurrences ran from the last visit to the first, so gradients flow
    // from the first visit towards the last.
    for (p, gp, steps, direct) in [
        (&params.alpha_rnn, &mut g.alpha_rnn, &tr.alpha_steps, &dg_direct),
        (&params.beta_rnn, &mut g.beta_rnn, &tr.beta_steps, &dh_direct),
    ] {
        let mut carry = vec![0.0; h];
        for t in 0..t_len {
            axpy(1.0, &direct[t], &mut carry);
            carry = gru_step_backward(p, gp, &steps[t], &tr.visit_embeddings[t], &carry, &mut dv[t]);
        }
    }

    for (codes, dvt) in seq.iter().zip(&dv) {
        for &k in codes {
            axpy(1.0, dvt, g.embedding.row_mut(k as usize));
        }
    }
}

/// Mean batch loss and its gradient with respect to every parameter.
pub fn backward(batch: &Batch, params: &ModelParams, kind: &LossKind) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let padded = batch.sequences.first().map_or(0, Vec::len);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let chunks = par::map_chunks(&idx, GRAD_CHUNK, |chunk| -> Result<(f64, ModelParams)> {
        let mut grads = ModelParams::zeros(params.dims);
        let mut total = 0.0;
        for &i in chunk {
            let seq = batch.valid(i);
            let tr = forward_one(seq, padded, params)?;
            let label = batch.labels[i];
            total += loss(&tr, label, kind);
            backward_one(seq, &tr, logit_grad(tr.probs, label, kind), params, &mut grads);
        }
        Ok((total, grads))
    });
    let mut iter = chunks.into_iter();
    let (mut total, mut grads) = iter.next().expect("non-empty batch")?;
    for c in iter {
        let (l, g) = c?;
        total += l;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((total / n, grads))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(batch: &Batch, params: &ModelParams, kind: &LossKind) -> Result<f64> {
    let traces = forward(batch, params)?;
    let total: f64 = traces.iter().zip(&batch.labels).map(|(t, &l)| loss(t, l, kind)).sum();
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims::new(20, 8, 8).unwrap()
    }

    fn seq(visits: &[&[u32]]) -> Vec<Vec<u32>> {
        visits.iter().map(|v| v.to_vec()).collect()
    }

    #[test]
    fn embedding_sums_rows() {
        let p = init_params(dims(), 1);
        assert_eq!(embed_visit(&[], &p).unwrap(), vec![0.0; 8]);
        assert_eq!(embed_visit(&[3], &p).unwrap(), p.embedding.row(3).to_vec());
        let v = embed_visit(&[3, 5], &p).unwrap();
        let expect: Vec<f64> = p.embedding.row(3).iter().zip(p.embedding.row(5)).map(|(a, b)| a + b).collect();
        assert_eq!(v, expect);
        assert!(matches!(embed_visit(&[20], &p), Err(Error::CodeOutOfRange { index: 20, .. })));
    }

    #[test]
    fn forward_basics() {
        let p = init_params(dims(), 2);
        let batch = Batch::new(vec![seq(&[&[1, 2], &[3]]), seq(&[&[4]]), seq(&[&[5], &[6], &[7, 8]])], vec![Label::Preterm; 3]);
        let traces = forward(&batch, &p).unwrap();
        for (i, tr) in traces.iter().enumerate() {
            assert!((tr.probs[0] + tr.probs[1] - 1.0).abs() < 1e-9);
            assert_eq!(tr.alpha.len(), 3);
            let n = tr.n_visits();
            assert!((tr.alpha[..n].iter().sum::<f64>() - 1.0).abs() < 1e-9, "example {i}");
            assert!(tr.alpha[n..].iter().all(|&a| a == 0.0));
        }
        assert_eq!(traces[1].alpha[0], 1.0);
        let empty = Batch::new(vec![vec![]], vec![Label::Preterm]);
        assert!(forward(&empty, &p).is_err());
    }

    #[test]
    fn zero_params_are_uninformative() {
        let p = ModelParams::zeros(dims());
        let batch = Batch::new(vec![seq(&[&[1, 2], &[3]]), seq(&[&[9]])], vec![Label::FullTerm; 2]);
        for tr in forward(&batch, &p).unwrap() {
            assert_eq!(tr.probs, [0.5, 0.5]);
        }
    }

    #[test]
    fn padding_is_inert() {
        let p = init_params(dims(), 3);
        let s = vec![seq(&[&[1, 2], &[3]]), seq(&[&[4], &[5, 6]])];
        let labels = vec![Label::Preterm, Label::FullTerm];
        let a = Batch::new(s.clone(), labels.clone());
        let mut longer = s.clone();
        longer.push(seq(&[&[7], &[8], &[9], &[10], &[11]]));
        let b = Batch::new(longer, vec![Label::Preterm, Label::FullTerm, Label::Preterm]);
        let ta = forward(&a, &p).unwrap();
        let tb = forward(&b, &p).unwrap();
        for i in 0..2 {
            assert!((ta[i].probs[0] - tb[i].probs[0]).abs() <= 1e-12);
            assert_eq!(tb[i].alpha[2..], [0.0, 0.0, 0.0]);
        }
        // gradients of the shared examples do not depend on padding length
        let b2 = Batch {
            sequences: b.sequences[..2].to_vec(),
            mask: b.mask[..2].to_vec(),
            labels: labels.clone(),
        };
        let (la, ga) = backward(&a, &p, &LossKind::Plain).unwrap();
        let (lb, gb) = backward(&b2, &p, &LossKind::Plain).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    fn trace_with(probs: [f64; 2]) -> ForwardTrace {
        ForwardTrace {
            visit_embeddings: vec![],
            alpha_states: vec![],
            beta_states: vec![],
            alpha: vec![],
            beta: vec![],
            context: vec![],
            probs,
            alpha_steps: vec![],
            beta_steps: vec![],
        }
    }

    #[test]
    fn loss_values() {
        let t = trace_with([1.0, 0.0]);
        assert!(loss_clean(&t, Label::Preterm) < 1e-6);
        let half = trace_with([0.5, 0.5]);
        assert!((loss_clean(&half, Label::FullTerm) - std::f64::consts::LN_2).abs() < 1e-6);
        let c = CorruptionMatrix::new([[0.68, 0.32], [0.2, 0.8]]).unwrap();
        assert!((loss_corrected(&t, Label::Preterm, &c) - 0.3857).abs() < 1e-4);
        assert!((loss_corrected(&t, Label::FullTerm, &c) - 1.1394).abs() < 1e-4);
        let id = CorruptionMatrix::identity();
        for p0 in [0.0, 0.1, 0.37, 0.5, 0.99] {
            let t = trace_with([p0, 1.0 - p0]);
            for l in Label::ALL {
                assert_eq!(loss_corrected(&t, l, &id).to_bits(), loss_clean(&t, l).to_bits());
            }
        }
    }

    #[test]
    fn mean_loss_is_mean_of_examples() {
        let p = init_params(dims(), 4);
        let batch = Batch::new(vec![seq(&[&[1], &[2]]), seq(&[&[3, 4]]), seq(&[&[5], &[6]])], vec![Label::Preterm, Label::FullTerm, Label::FullTerm]);
        let traces = forward(&batch, &p).unwrap();
        let mean = traces.iter().zip(&batch.labels).map(|(t, &l)| loss_clean(t, l)).sum::<f64>() / 3.0;
        let (l, _) = backward(&batch, &p, &LossKind::Plain).unwrap();
        assert!((l - mean).abs() < 1e-12);
        assert!((batch_loss(&batch, &p, &LossKind::Plain).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let p = init_params(dims(), 5);
        let batch = Batch::new(vec![seq(&[&[1, 2], &[3]]), seq(&[&[4], &[2]])], vec![Label::Preterm, Label::FullTerm]);
        let (_, g) = backward(&batch, &p, &LossKind::Plain).unwrap();
        for k in 0..20 {
            let used = [1, 2, 3, 4].contains(&k);
            let nz = g.embedding.row(k).iter().any(|&x| x != 0.0);
            assert_eq!(used, nz, "row {k}");
        }
        assert!(g.first_non_finite().is_none());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(dims(), 7);
        assert_eq!(a, init_params(dims(), 7));
        assert_ne!(a, init_params(dims(), 8));
        assert!(a.b_out.data.iter().all(|&x| x == 0.0));
        let s = (6.0f64 / 28.0).sqrt();
        assert!(a.embedding.data.iter().all(|x| x.abs() <= s));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = init_params(dims(), 9);
        p.b_alpha.data[0] = -0.0;
        p.b_out.data[1] = f64::MIN_POSITIVE / 3.0;
        let text = p.to_checkpoint();
        let q = ModelParams::from_checkpoint(&text).unwrap();
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(q.tensors()) {
            assert_eq!(a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert!(ModelParams::from_checkpoint("alc-checkpoint 2\n").is_err());
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(ModelParams::from_checkpoint(&truncated).is_err());
    }
}
