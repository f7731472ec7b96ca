//! Tiny decoder-only transformer with hand-written reverse-mode gradients.
//!
//! Pre-norm residual blocks, learned absolute positions, GELU MLPs. All
//! parameters live in one flat `f64` vector so the optimizer, checkpoints and
//! finite-difference checks can treat them uniformly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::TokenSample;
use crate::rng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the context of {context}")]
    Length { len: usize, context: usize },
    #[error("token id {0} outside the vocabulary")]
    Token(u32),
    #[error("sample has no positions in its loss mask")]
    EmptyLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub init_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl NetConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            context_len: 128,
            init_scale: 0.02,
            seed: 0,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.context_len == 0
        {
            return bad(String::from("all dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return bad(format!("init_scale {} must be finite and non-negative", self.init_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head: Option<usize>,
    total: usize,
}

impl Layout {
    fn new(c: &NetConfig) -> Self {
        let d = c.d_model;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let wte = take(c.vocab_size * d);
        let wpe = take(c.context_len * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head = (!c.tie_embeddings).then(|| take(d * c.vocab_size));
        Self { wte, wpe, layers, lnf_g, lnf_b, head, total: off }
    }
}

/// Weights of the transformer plus its architecture config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: NetConfig,
    data: Vec<f64>,
}

/// Per-position logits, row-major `(rows, vocab)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// `(tokens, labels, mask)`: position `p` is scored against `labels[p]` iff `mask[p]`.
pub struct Example<'a> {
    pub tokens: &'a [u32],
    pub labels: &'a [u32],
    pub mask: &'a [bool],
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    y: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_out: Vec<f64>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
}

/// Keys and values of every processed position, for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

// ---- kernels -------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Rows handled together so each weight row is loaded once per block.
const BLOCK: usize = 4;

/// `out[t, :] = bias + inp[t, :] * w` with `w` stored `(k, n)` row-major.
/// Every output element accumulates over `k` in order, so the result does not
/// depend on how rows are blocked.
fn matmul(out: &mut [f64], inp: &[f64], w: &[f64], bias: Option<&[f64]>, rows: usize, k: usize, n: usize) {
    for t in 0..rows {
        let o = &mut out[t * n..(t + 1) * n];
        match bias {
            Some(b) => o.copy_from_slice(b),
            None => o.fill(0.0),
        }
    }
    let full = rows - rows % BLOCK;
    for t0 in (0..full).step_by(BLOCK) {
        let (o0, rest) = out[t0 * n..(t0 + BLOCK) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for kk in 0..k {
            let a = [inp[t0 * k + kk], inp[(t0 + 1) * k + kk], inp[(t0 + 2) * k + kk], inp[(t0 + 3) * k + kk]];
            let wr = &w[kk * n..(kk + 1) * n];
            for j in 0..n {
                let x = wr[j];
                o0[j] += a[0] * x;
                o1[j] += a[1] * x;
                o2[j] += a[2] * x;
                o3[j] += a[3] * x;
            }
        }
    }
    for t in full..rows {
        let o = &mut out[t * n..(t + 1) * n];
        for (kk, &a) in inp[t * k..(t + 1) * k].iter().enumerate() {
            axpy(o, a, &w[kk * n..(kk + 1) * n]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    dinp: &mut [f64],
    dw: &mut [f64],
    dbias: Option<&mut [f64]>,
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    rows: usize,
    k: usize,
    n: usize,
) {
    let full = rows - rows % BLOCK;
    for t0 in (0..full).step_by(BLOCK) {
        let g: [&[f64]; BLOCK] = core::array::from_fn(|i| &dout[(t0 + i) * n..(t0 + i + 1) * n]);
        for kk in 0..k {
            let wr = &w[kk * n..(kk + 1) * n];
            for (i, gi) in g.iter().enumerate() {
                dinp[(t0 + i) * k + kk] += dot(gi, wr);
            }
            let x: [f64; BLOCK] = core::array::from_fn(|i| inp[(t0 + i) * k + kk]);
            let dr = &mut dw[kk * n..(kk + 1) * n];
            for j in 0..n {
                // Same summation order as one row at a time.
                dr[j] = (((dr[j] + x[0] * g[0][j]) + x[1] * g[1][j]) + x[2] * g[2][j]) + x[3] * g[3][j];
            }
        }
    }
    for t in full..rows {
        let g = &dout[t * n..(t + 1) * n];
        let x = &inp[t * k..(t + 1) * k];
        let di = &mut dinp[t * k..(t + 1) * k];
        for kk in 0..k {
            di[kk] += dot(g, &w[kk * n..(kk + 1) * n]);
            axpy(&mut dw[kk * n..(kk + 1) * n], x[kk], g);
        }
    }
    if let Some(db) = dbias {
        for t in 0..rows {
            axpy(db, 1.0, &dout[t * n..(t + 1) * n]);
        }
    }
}

fn layernorm(out: &mut [f64], mean: &mut [f64], rstd: &mut [f64], x: &[f64], g: &[f64], b: &[f64], d: usize) {
    for t in 0..mean.len() {
        let row = &x[t * d..(t + 1) * d];
        let m = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let r = 1.0 / libm::sqrt(var + LN_EPS);
        let o = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            o[i] = (row[i] - m) * r * g[i] + b[i];
        }
        mean[t] = m;
        rstd[t] = r;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    x: &[f64],
    g: &[f64],
    mean: &[f64],
    rstd: &[f64],
    d: usize,
) {
    let mut norm = vec![0.0; d];
    let mut dnorm = vec![0.0; d];
    for t in 0..mean.len() {
        let row = &x[t * d..(t + 1) * d];
        let go = &dout[t * d..(t + 1) * d];
        for i in 0..d {
            norm[i] = (row[i] - mean[t]) * rstd[t];
            dnorm[i] = go[i] * g[i];
            dg[i] += go[i] * norm[i];
            db[i] += go[i];
        }
        let mean_dnorm = dnorm.iter().sum::<f64>() / d as f64;
        let mean_dnorm_norm = dot(&dnorm, &norm) / d as f64;
        let dxr = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            dxr[i] += rstd[t] * (dnorm[i] - mean_dnorm - norm[i] * mean_dnorm_norm);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn log_softmax_at(row: &[f64], label: usize) -> (f64, f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    let lse = max + libm::log(sum);
    (row[label] - lse, max, sum)
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

// ---- model -----------------------------------------------------------------

impl ModelParameters {
    /// Seeded Gaussian initialisation scaled by `init_scale`; layer-norm gains
    /// start at one, biases at zero, residual projections are scaled down by
    /// `sqrt(2 * n_layers)`.
    pub fn init(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut r = rng::seeded(config.seed, 0x6e6574);
        let d = config.d_model;
        let scale = config.init_scale;
        let resid = scale / libm::sqrt(2.0 * config.n_layers as f64);
        let mut fill = |data: &mut [f64], off: usize, len: usize, s: f64| {
            for v in &mut data[off..off + len] {
                *v = rng::normal(&mut r) * s;
            }
        };
        fill(&mut data, layout.wte, config.vocab_size * d, scale);
        fill(&mut data, layout.wpe, config.context_len * d, scale);
        for l in &layout.layers {
            data[l.ln1_g..l.ln1_g + d].fill(1.0);
            fill(&mut data, l.w_qkv, d * 3 * d, scale);
            fill(&mut data, l.w_o, d * d, resid);
            data[l.ln2_g..l.ln2_g + d].fill(1.0);
            fill(&mut data, l.w_fc, d * 4 * d, scale);
            fill(&mut data, l.w_proj, 4 * d * d, resid);
        }
        data[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        if let Some(h) = layout.head {
            fill(&mut data, h, d * config.vocab_size, scale);
        }
        Ok(Self { config, data })
    }

    /// Rebuilds parameters from a flat vector, checking its length and values.
    pub fn from_flat(config: NetConfig, data: Vec<f64>) -> Result<Self, NetError> {
        config.validate()?;
        let expected = Layout::new(&config).total;
        if data.len() != expected {
            return Err(NetError::Config(format!("{} parameters supplied, {expected} expected", data.len())));
        }
        if !all_finite(&data) {
            return Err(NetError::NonFinite(String::from("loaded parameters")));
        }
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index range of the token-embedding row for `token`.
    pub fn embedding_row(&self, token: u32) -> core::ops::Range<usize> {
        let d = self.config.d_model;
        let start = Layout::new(&self.config).wte + token as usize * d;
        start..start + d
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.data[off..off + len]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), NetError> {
        if tokens.len() > self.config.context_len {
            return Err(NetError::Length { len: tokens.len(), context: self.config.context_len });
        }
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(NetError::Token(t)),
            None => Ok(()),
        }
    }

    fn forward_cached(&self, tokens: &[u32]) -> Result<Cache, NetError> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let layout = Layout::new(c);
        let (t_len, d, h) = (tokens.len(), c.d_model, c.n_heads);
        let hd = d / h;
        let scale = 1.0 / libm::sqrt(hd as f64);

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.p(layout.wte + tok as usize * d, d);
            let p = self.p(layout.wpe + t * d, d);
            for i in 0..d {
                x[t * d + i] = e[i] + p[i];
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for (li, l) in layout.layers.iter().enumerate() {
            let mut lc = LayerCache {
                x_in: x.clone(),
                ln1: vec![0.0; t_len * d],
                ln1_mean: vec![0.0; t_len],
                ln1_rstd: vec![0.0; t_len],
                qkv: vec![0.0; t_len * 3 * d],
                att: vec![0.0; h * t_len * t_len],
                y: vec![0.0; t_len * d],
                x_mid: Vec::new(),
                ln2: vec![0.0; t_len * d],
                ln2_mean: vec![0.0; t_len],
                ln2_rstd: vec![0.0; t_len],
                fc: vec![0.0; t_len * 4 * d],
                act: vec![0.0; t_len * 4 * d],
            };
            layernorm(&mut lc.ln1, &mut lc.ln1_mean, &mut lc.ln1_rstd, &x, self.p(l.ln1_g, d), self.p(l.ln1_b, d), d);
            matmul(&mut lc.qkv, &lc.ln1, self.p(l.w_qkv, d * 3 * d), Some(self.p(l.b_qkv, 3 * d)), t_len, d, 3 * d);
            for head in 0..h {
                for t in 0..t_len {
                    let q = &lc.qkv[t * 3 * d + head * hd..t * 3 * d + (head + 1) * hd];
                    let att = &mut lc.att[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let k = &lc.qkv[s * 3 * d + d + head * hd..s * 3 * d + d + (head + 1) * hd];
                        att[s] = dot(q, k) * scale;
                        max = max.max(att[s]);
                    }
                    let mut sum = 0.0;
                    for a in &mut att[..=t] {
                        *a = libm::exp(*a - max);
                        sum += *a;
                    }
                    for a in &mut att[..=t] {
                        *a /= sum;
                    }
                    let yrow = &mut lc.y[t * d + head * hd..t * d + (head + 1) * hd];
                    for s in 0..=t {
                        let v = &lc.qkv[s * 3 * d + 2 * d + head * hd..s * 3 * d + 2 * d + (head + 1) * hd];
                        axpy(yrow, att[s], v);
                    }
                }
            }
            let mut attn_out = vec![0.0; t_len * d];
            matmul(&mut attn_out, &lc.y, self.p(l.w_o, d * d), Some(self.p(l.b_o, d)), t_len, d, d);
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }
            lc.x_mid = x.clone();
            layernorm(&mut lc.ln2, &mut lc.ln2_mean, &mut lc.ln2_rstd, &x, self.p(l.ln2_g, d), self.p(l.ln2_b, d), d);
            matmul(&mut lc.fc, &lc.ln2, self.p(l.w_fc, d * 4 * d), Some(self.p(l.b_fc, 4 * d)), t_len, d, 4 * d);
            for (a, &f) in lc.act.iter_mut().zip(&lc.fc) {
                *a = gelu(f);
            }
            let mut mlp_out = vec![0.0; t_len * d];
            matmul(&mut mlp_out, &lc.act, self.p(l.w_proj, 4 * d * d), Some(self.p(l.b_proj, d)), t_len, 4 * d, d);
            for (xi, m) in x.iter_mut().zip(&mlp_out) {
                *xi += m;
            }
            if !all_finite(&x) {
                return Err(NetError::NonFinite(format!("layer {li} forward")));
            }
            layers.push(lc);
        }

        let mut lnf = vec![0.0; t_len * d];
        let mut lnf_mean = vec![0.0; t_len];
        let mut lnf_rstd = vec![0.0; t_len];
        layernorm(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, self.p(layout.lnf_g, d), self.p(layout.lnf_b, d), d);
        Ok(Cache { tokens: tokens.to_vec(), layers, x_out: x, lnf, lnf_mean, lnf_rstd })
    }

    fn head_logits(&self, hidden: &[f64], out: &mut [f64]) {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let layout = Layout::new(&self.config);
        match layout.head {
            Some(h) => matmul(out, hidden, self.p(h, d * v), None, 1, d, v),
            None => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(hidden, self.p(layout.wte + j * d, d));
                }
            }
        }
    }

    /// Logits for every position under causal attention.
    pub fn forward(&self, tokens: &[u32]) -> Result<Logits, NetError> {
        let cache = self.forward_cached(tokens)?;
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut data = vec![0.0; tokens.len() * v];
        for t in 0..tokens.len() {
            self.head_logits(&cache.lnf[t * d..(t + 1) * d], &mut data[t * v..(t + 1) * v]);
        }
        Ok(Logits { rows: tokens.len(), vocab: v, data })
    }

    /// Mean negative log-likelihood over the masked positions of one example.
    pub fn example_loss(&self, ex: &Example<'_>) -> Result<f64, NetError> {
        self.example_loss_and_grad(ex, None, 0.0)
    }

    /// Mean masked NLL of a codec sample under teacher forcing.
    pub fn loss(&self, sample: &TokenSample) -> Result<f64, NetError> {
        let (tokens, labels, mask) = sample.teacher_forced();
        self.example_loss(&Example { tokens: &tokens, labels: &labels, mask: &mask })
    }

    /// Accumulates `scale * d(loss)/d(params)` into `grad` when given and
    /// returns the example's loss.
    fn example_loss_and_grad(&self, ex: &Example<'_>, grad: Option<&mut [f64]>, scale: f64) -> Result<f64, NetError> {
        let positions: Vec<usize> = (0..ex.tokens.len()).filter(|&p| ex.mask[p]).collect();
        if positions.is_empty() {
            return Err(NetError::EmptyLoss);
        }
        if let Some(&bad) = ex.labels.iter().find(|&&l| l as usize >= self.config.vocab_size) {
            return Err(NetError::Token(bad));
        }
        let cache = self.forward_cached(ex.tokens)?;
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let n = positions.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; positions.len() * v];
        let mut row = vec![0.0; v];
        for (i, &p) in positions.iter().enumerate() {
            self.head_logits(&cache.lnf[p * d..(p + 1) * d], &mut row);
            let label = ex.labels[p] as usize;
            let (logp, max, sum) = log_softmax_at(&row, label);
            loss -= logp;
            let dl = &mut dlogits[i * v..(i + 1) * v];
            for j in 0..v {
                dl[j] = libm::exp(row[j] - max) / sum * scale / n;
            }
            dl[label] -= scale / n;
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(NetError::NonFinite(String::from("loss")));
        }
        if let Some(g) = grad {
            self.backward(&cache, &positions, &dlogits, g)?;
        }
        Ok(loss)
    }

    fn backward(&self, cache: &Cache, positions: &[usize], dlogits: &[f64], grad: &mut [f64]) -> Result<(), NetError> {
        let c = &self.config;
        let layout = Layout::new(c);
        let (d, v, h) = (c.d_model, c.vocab_size, c.n_heads);
        let hd = d / h;
        let t_len = cache.tokens.len();
        let scale = 1.0 / libm::sqrt(hd as f64);

        let mut dlnf = vec![0.0; t_len * d];
        for (i, &p) in positions.iter().enumerate() {
            let dl = &dlogits[i * v..(i + 1) * v];
            let hidden = &cache.lnf[p * d..(p + 1) * d];
            let dh = &mut dlnf[p * d..(p + 1) * d];
            match layout.head {
                Some(off) => {
                    let (w, dw) = (self.p(off, d * v), &mut grad[off..off + d * v]);
                    matmul_backward(dh, dw, None, dl, hidden, w, 1, d, v);
                }
                None => {
                    for (j, &g) in dl.iter().enumerate() {
                        let row = layout.wte + j * d;
                        axpy(dh, g, &self.data[row..row + d]);
                        axpy(&mut grad[row..row + d], g, hidden);
                    }
                }
            }
        }

        let mut dx = vec![0.0; t_len * d];
        {
            let (dg, db) = split_two(grad, layout.lnf_g, layout.lnf_b, d);
            layernorm_backward(
                &mut dx,
                dg,
                db,
                &dlnf,
                &cache.x_out,
                self.p(layout.lnf_g, d),
                &cache.lnf_mean,
                &cache.lnf_rstd,
                d,
            );
        }

        for (li, (l, lc)) in layout.layers.iter().zip(&cache.layers).enumerate().rev() {
            // MLP branch
            let mut dact = vec![0.0; t_len * 4 * d];
            {
                let (dw, db) = split_two(grad, l.w_proj, l.b_proj, 4 * d * d);
                matmul_backward(&mut dact, dw, Some(&mut db[..d]), &dx, &lc.act, self.p(l.w_proj, 4 * d * d), t_len, 4 * d, d);
            }
            for (da, &f) in dact.iter_mut().zip(&lc.fc) {
                *da *= gelu_grad(f);
            }
            let mut dln2 = vec![0.0; t_len * d];
            {
                let (dw, db) = split_two(grad, l.w_fc, l.b_fc, d * 4 * d);
                matmul_backward(&mut dln2, dw, Some(&mut db[..4 * d]), &dact, &lc.ln2, self.p(l.w_fc, d * 4 * d), t_len, d, 4 * d);
            }
            {
                let (dg, db) = split_two(grad, l.ln2_g, l.ln2_b, d);
                layernorm_backward(&mut dx, dg, db, &dln2, &lc.x_mid, self.p(l.ln2_g, d), &lc.ln2_mean, &lc.ln2_rstd, d);
            }

            // attention branch
            let mut dy = vec![0.0; t_len * d];
            {
                let (dw, db) = split_two(grad, l.w_o, l.b_o, d * d);
                matmul_backward(&mut dy, dw, Some(&mut db[..d]), &dx, &lc.y, self.p(l.w_o, d * d), t_len, d, d);
            }
            let mut dqkv = vec![0.0; t_len * 3 * d];
            let mut datt = vec![0.0; t_len];
            for head in 0..h {
                for t in 0..t_len {
                    let att = &lc.att[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                    let dyr = &dy[t * d + head * hd..t * d + (head + 1) * hd];
                    for s in 0..=t {
                        let vo = s * 3 * d + 2 * d + head * hd;
                        datt[s] = dot(dyr, &lc.qkv[vo..vo + hd]);
                        axpy(&mut dqkv[vo..vo + hd], att[s], dyr);
                    }
                    let inner = dot(&att[..=t], &datt[..=t]);
                    let qo = t * 3 * d + head * hd;
                    for s in 0..=t {
                        let ds = att[s] * (datt[s] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = s * 3 * d + d + head * hd;
                        for i in 0..hd {
                            dqkv[qo + i] += ds * lc.qkv[ko + i];
                            dqkv[ko + i] += ds * lc.qkv[qo + i];
                        }
                    }
                }
            }
            let mut dln1 = vec![0.0; t_len * d];
            {
                let (dw, db) = split_two(grad, l.w_qkv, l.b_qkv, d * 3 * d);
                matmul_backward(&mut dln1, dw, Some(&mut db[..3 * d]), &dqkv, &lc.ln1, self.p(l.w_qkv, d * 3 * d), t_len, d, 3 * d);
            }
            {
                let (dg, db) = split_two(grad, l.ln1_g, l.ln1_b, d);
                layernorm_backward(&mut dx, dg, db, &dln1, &lc.x_in, self.p(l.ln1_g, d), &lc.ln1_mean, &lc.ln1_rstd, d);
            }
            if !all_finite(&dx) {
                return Err(NetError::NonFinite(format!("layer {li} backward")));
            }
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            let e = layout.wte + tok as usize * d;
            axpy(&mut grad[e..e + d], 1.0, g);
            let p = layout.wpe + t * d;
            axpy(&mut grad[p..p + d], 1.0, g);
        }
        Ok(())
    }

    /// Mean batch loss (mean over samples of each sample's mean masked NLL)
    /// and its exact gradient, accumulated in batch order.
    pub fn grad(&self, batch: &[TokenSample]) -> Result<(f64, Vec<f64>), NetError> {
        if batch.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        let mut grad = vec![0.0; self.data.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for sample in batch {
            total += self.sample_loss_and_grad(sample, &mut grad, scale)?;
        }
        Ok((total * scale, grad))
    }

    /// Per-sample loss with its gradient scaled by `scale` accumulated into `grad`.
    pub fn sample_loss_and_grad(&self, sample: &TokenSample, grad: &mut [f64], scale: f64) -> Result<f64, NetError> {
        let (tokens, labels, mask) = sample.teacher_forced();
        self.example_loss_and_grad(&Example { tokens: &tokens, labels: &labels, mask: &mask }, Some(grad), scale)
    }

    /// Gradient of one explicit example (used by checks on hand-built masks).
    pub fn example_grad(&self, ex: &Example<'_>) -> Result<(f64, Vec<f64>), NetError> {
        let mut grad = vec![0.0; self.data.len()];
        let loss = self.example_loss_and_grad(ex, Some(&mut grad), 1.0)?;
        Ok((loss, grad))
    }

    // ---- incremental decoding ------------------------------------------------

    pub fn new_kv_cache(&self) -> KvCache {
        let n = self.config.n_layers;
        KvCache { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn step_token(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f64>, NetError> {
        let c = &self.config;
        if cache.len >= c.context_len {
            return Err(NetError::Length { len: cache.len + 1, context: c.context_len });
        }
        if token as usize >= c.vocab_size {
            return Err(NetError::Token(token));
        }
        let layout = Layout::new(c);
        let (d, h) = (c.d_model, c.n_heads);
        let hd = d / h;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let pos = cache.len;

        let mut x: Vec<f64> = self
            .p(layout.wte + token as usize * d, d)
            .iter()
            .zip(self.p(layout.wpe + pos * d, d))
            .map(|(a, b)| a + b)
            .collect();
        let (mut m, mut r) = ([0.0], [0.0]);
        let mut ln = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut y = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut fc = vec![0.0; 4 * d];
        let mut att = vec![0.0; pos + 1];
        for (li, l) in layout.layers.iter().enumerate() {
            layernorm(&mut ln, &mut m, &mut r, &x, self.p(l.ln1_g, d), self.p(l.ln1_b, d), d);
            matmul(&mut qkv, &ln, self.p(l.w_qkv, d * 3 * d), Some(self.p(l.b_qkv, 3 * d)), 1, d, 3 * d);
            cache.keys[li].extend_from_slice(&qkv[d..2 * d]);
            cache.values[li].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&cache.keys[li], &cache.values[li]);
            y.fill(0.0);
            for head in 0..h {
                let q = &qkv[head * hd..(head + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=pos {
                    att[s] = dot(q, &keys[s * d + head * hd..s * d + (head + 1) * hd]) * scale;
                    max = max.max(att[s]);
                }
                let mut sum = 0.0;
                for a in &mut att[..=pos] {
                    *a = libm::exp(*a - max);
                    sum += *a;
                }
                for a in &mut att[..=pos] {
                    *a /= sum;
                }
                let yrow = &mut y[head * hd..(head + 1) * hd];
                for s in 0..=pos {
                    axpy(yrow, att[s], &values[s * d + head * hd..s * d + (head + 1) * hd]);
                }
            }
            matmul(&mut tmp, &y, self.p(l.w_o, d * d), Some(self.p(l.b_o, d)), 1, d, d);
            for (xi, a) in x.iter_mut().zip(&tmp) {
                *xi += a;
            }
            layernorm(&mut ln, &mut m, &mut r, &x, self.p(l.ln2_g, d), self.p(l.ln2_b, d), d);
            matmul(&mut fc, &ln, self.p(l.w_fc, d * 4 * d), Some(self.p(l.b_fc, 4 * d)), 1, d, 4 * d);
            for f in fc.iter_mut() {
                *f = gelu(*f);
            }
            matmul(&mut tmp, &fc, self.p(l.w_proj, 4 * d * d), Some(self.p(l.b_proj, d)), 1, 4 * d, d);
            for (xi, a) in x.iter_mut().zip(&tmp) {
                *xi += a;
            }
        }
        cache.len += 1;
        layernorm(&mut ln, &mut m, &mut r, &x, self.p(layout.lnf_g, d), self.p(layout.lnf_b, d), d);
        let mut logits = vec![0.0; c.vocab_size];
        self.head_logits(&ln, &mut logits);
        if !all_finite(&logits) {
            return Err(NetError::NonFinite(String::from("decode logits")));
        }
        Ok(logits)
    }

    /// Feeds `tokens` and returns the logits after the last one.
    pub fn prefill(&self, cache: &mut KvCache, tokens: &[u32]) -> Result<Vec<f64>, NetError> {
        if tokens.is_empty() {
            return Err(NetError::Usage(String::from("empty prefix")));
        }
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.step_token(cache, t)?;
        }
        Ok(logits)
    }

    /// Generates up to `max_new` tokens after `prefix`, stopping after the
    /// first token in `stop`. Temperature zero is argmax with ties going to the
    /// lowest id; generation also stops when the context is full.
    pub fn decode<R: RngCore + ?Sized>(
        &self,
        prefix: &[u32],
        stop: &[u32],
        max_new: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<u32>, NetError> {
        if prefix.is_empty() {
            return Err(NetError::Usage(String::from("empty prefix")));
        }
        if prefix.len() > self.config.context_len {
            return Err(NetError::Length { len: prefix.len(), context: self.config.context_len });
        }
        let mut out = Vec::new();
        if max_new == 0 {
            return Ok(out);
        }
        let mut cache = self.new_kv_cache();
        let mut logits = self.prefill(&mut cache, prefix)?;
        loop {
            let next = sample_token(&logits, temperature, rng);
            out.push(next);
            if stop.contains(&next) || out.len() >= max_new || cache.len() >= self.config.context_len {
                return Ok(out);
            }
            logits = self.step_token(&mut cache, next)?;
        }
    }
}

/// Argmax (lowest id on ties) at temperature zero, otherwise a softmax draw.
pub fn sample_token<R: RngCore + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&v| libm::exp((v - max) / temperature)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng::unit(rng) * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (weights.len() - 1) as u32
}

fn split_two(grad: &mut [f64], a: usize, b: usize, a_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + a_len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + a_len], hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Modality;

    fn tiny(seed: u64) -> ModelParameters {
        let cfg = NetConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            context_len: 16,
            init_scale: 0.3,
            seed,
            tie_embeddings: false,
        };
        ModelParameters::init(cfg).unwrap()
    }

    fn sample(input: &[u32], target: &[u32]) -> TokenSample {
        TokenSample {
            input: input.to_vec(),
            target: target.to_vec(),
            loss_mask: vec![true; target.len()],
            modality: Modality::Act,
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(tiny(3), tiny(3));
        assert_ne!(tiny(3), tiny(4));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = NetConfig::new(10);
        cfg.d_model = 130;
        cfg.n_heads = 4;
        assert!(matches!(ModelParameters::init(cfg), Err(NetError::Config(_))));
    }

    #[test]
    fn zero_scale_gives_uniform_logits() {
        let mut cfg = NetConfig::new(13);
        cfg.init_scale = 0.0;
        cfg.d_model = 8;
        let m = ModelParameters::init(cfg).unwrap();
        let logits = m.forward(&[1, 2, 3]).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
        let s = sample(&[1, 2, 3], &[4, 5]);
        let loss = m.loss(&s).unwrap();
        assert!((loss - libm::log(13.0)).abs() < 1e-12);
    }

    #[test]
    fn causal_prefix_logits_unchanged() {
        let m = tiny(1);
        let a = m.forward(&[1, 2, 3, 4]).unwrap();
        let b = m.forward(&[1, 2, 3, 4, 9, 7]).unwrap();
        for i in 0..4 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_eq!(m.forward(&[5]).unwrap().rows, 1);
    }

    #[test]
    fn softmax_rows_normalise() {
        let m = tiny(2);
        let l = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        for i in 0..l.rows {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let p: f64 = row.iter().map(|v| libm::exp(v - max) / z).sum();
            assert!((p - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn overlength_is_rejected() {
        let m = tiny(0);
        let long: Vec<u32> = (0..17).map(|i| i % 11).collect();
        assert!(matches!(m.forward(&long), Err(NetError::Length { .. })));
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = tiny(5);
        let toks = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let full = m.forward(&toks).unwrap();
        let mut cache = m.new_kv_cache();
        for (i, &t) in toks.iter().enumerate() {
            let row = m.step_token(&mut cache, t).unwrap();
            assert_eq!(&row[..], full.row(i));
        }
    }

    #[test]
    fn single_mask_position_is_that_nll() {
        let m = tiny(6);
        let tokens = [1u32, 2, 3, 4];
        let labels = [2u32, 3, 4, 5];
        let mask = [false, false, true, false];
        let loss = m.example_loss(&Example { tokens: &tokens, labels: &labels, mask: &mask }).unwrap();
        let logits = m.forward(&tokens).unwrap();
        let (logp, _, _) = log_softmax_at(logits.row(2), 4);
        assert!((loss + logp).abs() < 1e-12);
        let none = [false; 4];
        assert_eq!(
            m.example_loss(&Example { tokens: &tokens, labels: &labels, mask: &none }),
            Err(NetError::EmptyLoss)
        );
    }

    #[test]
    fn unmasked_labels_never_matter() {
        let m = tiny(7);
        let tokens = [1u32, 2, 3, 4, 5];
        let mask = [false, true, false, true, false];
        let a = [9u32, 3, 9, 5, 9];
        let b = [0u32, 3, 7, 5, 1];
        let la = m.example_loss(&Example { tokens: &tokens, labels: &a, mask: &mask }).unwrap();
        let lb = m.example_loss(&Example { tokens: &tokens, labels: &b, mask: &mask }).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn duplicated_batch_has_same_mean_and_gradient() {
        let m = tiny(8);
        let s1 = sample(&[1, 2, 3], &[4, 5]);
        let s2 = sample(&[6, 7], &[8, 9, 10]);
        let (l1, g1) = m.grad(&[s1.clone(), s2.clone()]).unwrap();
        let (l2, g2) = m.grad(&[s1.clone(), s1, s2.clone(), s2]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.grad(&[]), Err(NetError::EmptyBatch));
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let m = tiny(9);
        let s = sample(&[1, 2, 3], &[4, 5]);
        let (_, g) = m.grad(&[s]).unwrap();
        for tok in [0u32, 6, 7, 8, 9, 10] {
            assert!(g[m.embedding_row(tok)].iter().all(|&v| v == 0.0), "token {tok}");
        }
        assert!(g[m.embedding_row(1)].iter().any(|&v| v != 0.0));
    }

    fn finite_difference_check(m: &mut ModelParameters, batch: &[TokenSample], coords: usize, seed: u64) -> f64 {
        let (_, analytic) = m.grad(batch).unwrap();
        let mean_loss = |m: &ModelParameters| {
            batch.iter().map(|s| m.loss(s).unwrap()).sum::<f64>() / batch.len() as f64
        };
        let mut r = rng::seeded(seed, 99);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for _ in 0..coords {
            let i = rng::below(&mut r, m.len());
            let orig = m.flat()[i];
            m.flat_mut()[i] = orig + h;
            let up = mean_loss(m);
            m.flat_mut()[i] = orig - h;
            let down = mean_loss(m);
            m.flat_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = tiny(10);
        let batch = [sample(&[1, 2, 3, 4], &[5, 6, 2]), sample(&[7, 8], &[9, 10, 1, 3])];
        let worst = finite_difference_check(&mut m, &batch, 300, 1);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn tied_embedding_gradients_match_finite_differences() {
        let mut cfg = *tiny(0).config();
        cfg.tie_embeddings = true;
        cfg.seed = 12;
        let mut m = ModelParameters::init(cfg).unwrap();
        let batch = [sample(&[1, 2, 3], &[5, 6])];
        let worst = finite_difference_check(&mut m, &batch, 300, 2);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn decoding_rules() {
        let m = tiny(11);
        let mut r = rng::seeded(0, 0);
        let a = m.decode(&[1, 2], &[], 6, 0.0, &mut r).unwrap();
        let b = m.decode(&[1, 2], &[], 6, 0.0, &mut r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let first = a[0];
        assert_eq!(m.decode(&[1, 2], &[first], 6, 0.0, &mut r).unwrap(), vec![first]);
        assert!(m.decode(&[1, 2], &[], 0, 0.0, &mut r).unwrap().is_empty());
        assert!(matches!(m.decode(&[], &[], 3, 0.0, &mut r), Err(NetError::Usage(_))));
        let sampled = m.decode(&[1, 2], &[], 6, 1.0, &mut r).unwrap();
        assert!(sampled.iter().all(|&t| t < 11));
        let long = m.decode(&[1; 14], &[], 10, 0.0, &mut r).unwrap();
        assert_eq!(long.len(), 3);
    }

    #[test]
    fn argmax_ties_break_low() {
        let mut r = rng::seeded(0, 0);
        assert_eq!(sample_token(&[0.5, 2.0, 2.0, 1.0], 0.0, &mut r), 1);
    }
}
