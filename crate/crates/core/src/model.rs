//! A tiny pre-LayerNorm decoder-only transformer with hand-written reverse
//! mode differentiation.
//!
//! Each decoder block holds the projections the scorer reads by name
//! (`w_q`, `w_k`, `w_v`, `w_up`, `w_down`) plus `w_o`. The output head is tied
//! to the token embedding. Layer indices are decoder-block indices, 0-based.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::numcore::{dot, matmul, matmul_nt, matmul_tn, Matrix, Rng};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return fail("vocab_size, d_model, n_heads and max_seq_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff < self.d_model {
            return fail(format!("d_ff {} smaller than d_model {}", self.d_ff, self.d_model));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The projection matrices that can be scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    #[serde(rename = "w_q")]
    Wq,
    #[serde(rename = "w_k")]
    Wk,
    #[serde(rename = "w_v")]
    Wv,
    #[serde(rename = "w_up")]
    Wup,
    #[serde(rename = "w_down")]
    Wdown,
}

impl Module {
    pub const ALL: [Module; 5] = [Module::Wq, Module::Wk, Module::Wv, Module::Wup, Module::Wdown];

    pub fn name(self) -> &'static str {
        match self {
            Module::Wq => "w_q",
            Module::Wk => "w_k",
            Module::Wv => "w_v",
            Module::Wup => "w_up",
            Module::Wdown => "w_down",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown module {s:?} (expected one of w_q, w_k, w_v, w_up, w_down)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_scale: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_scale: Matrix,
    pub ln2_bias: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerParams {
    fn tensors(&self) -> [(&'static str, &Matrix); 10] {
        [
            ("ln1_scale", &self.ln1_scale),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_scale", &self.ln2_scale),
            ("ln2_bias", &self.ln2_bias),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.ln1_scale,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_scale,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn module(&self, module: Module) -> &Matrix {
        match module {
            Module::Wq => &self.w_q,
            Module::Wk => &self.w_k,
            Module::Wv => &self.w_v,
            Module::Wup => &self.w_up,
            Module::Wdown => &self.w_down,
        }
    }
}

/// All trainable parameters. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub token_embedding: Matrix,
    pub pos_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_scale: Matrix,
    pub lnf_bias: Matrix,
}

impl ParamStore {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (d, f) = (config.d_model, config.d_ff);
        let token_embedding = Matrix::randn(config.vocab_size, d, INIT_STD, &mut rng);
        let pos_embedding = Matrix::randn(config.max_seq_len, d, INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_scale: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                w_q: Matrix::randn(d, d, INIT_STD, &mut rng),
                w_k: Matrix::randn(d, d, INIT_STD, &mut rng),
                w_v: Matrix::randn(d, d, INIT_STD, &mut rng),
                w_o: Matrix::randn(d, d, INIT_STD, &mut rng),
                ln2_scale: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                w_up: Matrix::randn(d, f, INIT_STD, &mut rng),
                w_down: Matrix::randn(f, d, INIT_STD, &mut rng),
            })
            .collect();
        Ok(ParamStore {
            token_embedding,
            pos_embedding,
            layers,
            lnf_scale: Matrix::filled(1, d, 1.0),
            lnf_bias: Matrix::zeros(1, d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ParamStore {
            token_embedding: z(&self.token_embedding),
            pos_embedding: z(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_scale: z(&l.ln1_scale),
                    ln1_bias: z(&l.ln1_bias),
                    w_q: z(&l.w_q),
                    w_k: z(&l.w_k),
                    w_v: z(&l.w_v),
                    w_o: z(&l.w_o),
                    ln2_scale: z(&l.ln2_scale),
                    ln2_bias: z(&l.ln2_bias),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            lnf_scale: z(&self.lnf_scale),
            lnf_bias: z(&self.lnf_bias),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("pos_embedding".to_string(), &self.pos_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("lnf_scale".to_string(), &self.lnf_scale));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out
    }

    /// Mutable tensors, same order as [`ParamStore::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.pos_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_scale);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn lookup(&self, layer: usize, module: Module) -> Result<&Matrix> {
        self.layers
            .get(layer)
            .map(|l| l.module(module))
            .ok_or_else(|| {
                Error::Config(format!(
                    "layer {layer} outside model depth {}",
                    self.layers.len()
                ))
            })
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ParamStore) -> Result<()> {
        let theirs = other.tensors();
        let ours = self.tensors_mut();
        if ours.len() != theirs.len() {
            return Err(Error::Shape("parameter stores differ in layout".into()));
        }
        for (a, (_, b)) in ours.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    /// SHA-256 over tensor names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.tensors() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Model config plus weights, serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        fsutil::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        ckpt.config.validate()?;
        let fresh = ParamStore::init(&ckpt.config)?;
        let same_layout = fresh
            .tensors()
            .iter()
            .zip(ckpt.params.tensors())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
            && fresh.tensors().len() == ckpt.params.tensors().len();
        if !same_layout {
            return Err(Error::Shape(format!(
                "{}: tensors do not match the stored config",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One causal T×T probability matrix per head.
    probs: Vec<Matrix>,
    o: Matrix,
    ln2: LnCache,
    b: Matrix,
    u: Matrix,
    g: Matrix,
}

/// Activations cached by one forward call.
pub struct ForwardTrace {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Matrix,
}

impl ForwardTrace {
    /// Attention probabilities of `head` in `layer`; row t is zero past column t.
    pub fn attention(&self, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer].probs[head]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

fn layer_norm(x: &Matrix, scale: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut out = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mu) * rs;
        }
        let xh = xhat.row(r);
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = xh[c] * scale.data()[c] + bias.data()[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Accumulates scale/bias grads and returns the input gradient.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    scale: &Matrix,
    dscale: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dscale.data_mut()[c] += dyr[c] * xh[c];
            dbias.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * scale.data()[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn check_store(config: &ModelConfig, params: &ParamStore) -> Result<()> {
    if params.layers.len() != config.n_layers
        || params.token_embedding.shape() != (config.vocab_size, config.d_model)
        || params.pos_embedding.shape() != (config.max_seq_len, config.d_model)
    {
        return Err(Error::Shape("parameter store does not match model config".into()));
    }
    Ok(())
}

/// Causal self-attention for one layer. Returns the concatenated head outputs
/// and per-head probabilities.
fn attention(config: &ModelConfig, q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Vec<Matrix>) {
    let t = q.rows();
    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut o = Matrix::zeros(t, config.d_model);
    let mut probs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let prow = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in prow.iter_mut().enumerate().take(i + 1) {
                let s = dot(qi, &k.row(j)[cols.clone()]) * inv_sqrt;
                *slot = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for pj in prow.iter_mut().take(i + 1) {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            for pj in prow.iter_mut().take(i + 1) {
                *pj /= sum;
            }
            let orow = &mut o.row_mut(i)[cols.clone()];
            for j in 0..=i {
                let pij = p.get(i, j);
                for (oc, vc) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *oc += pij * vc;
                }
            }
        }
        probs.push(p);
    }
    (o, probs)
}

/// Forward pass. Returns logits (seq_len × vocab_size) and the trace needed
/// for the backward pass.
pub fn forward(config: &ModelConfig, params: &ParamStore, tokens: &[u32]) -> Result<(Matrix, ForwardTrace)> {
    check_store(config, params)?;
    check_tokens(config, tokens)?;
    let t = tokens.len();
    let d = config.d_model;
    let mut x = Matrix::zeros(t, d);
    for (pos, &tok) in tokens.iter().enumerate() {
        let e = params.token_embedding.row(tok as usize);
        let p = params.pos_embedding.row(pos);
        for (c, out) in x.row_mut(pos).iter_mut().enumerate() {
            *out = e[c] + p[c];
        }
    }

    let mut caches = Vec::with_capacity(config.n_layers);
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&x, &lp.ln1_scale, &lp.ln1_bias);
        let q = matmul(&a, &lp.w_q)?;
        let k = matmul(&a, &lp.w_k)?;
        let v = matmul(&a, &lp.w_v)?;
        let (o, probs) = attention(config, &q, &k, &v);
        x.add_assign(&matmul(&o, &lp.w_o)?)?;

        let (b, ln2) = layer_norm(&x, &lp.ln2_scale, &lp.ln2_bias);
        let u = matmul(&b, &lp.w_up)?;
        let mut g = u.clone();
        for val in g.data_mut() {
            *val = gelu(*val);
        }
        x.add_assign(&matmul(&g, &lp.w_down)?)?;
        caches.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            b,
            u,
            g,
        });
    }

    let (hf, lnf) = layer_norm(&x, &params.lnf_scale, &params.lnf_bias);
    let logits = matmul_nt(&hf, &params.token_embedding)?;
    let trace = ForwardTrace {
        tokens: tokens.to_vec(),
        layers: caches,
        lnf,
        hf,
    };
    Ok((logits, trace))
}

/// Positions `t ≥ 1` with `mask[t]`; logits row `t−1` predicts token `t`.
fn target_positions(tokens: &[u32], loss_mask: &[bool]) -> Result<Vec<usize>> {
    if loss_mask.len() != tokens.len() {
        return Err(Error::Shape(format!(
            "loss mask length {} vs {} tokens",
            loss_mask.len(),
            tokens.len()
        )));
    }
    let targets: Vec<usize> = (1..tokens.len()).filter(|&t| loss_mask[t]).collect();
    if targets.is_empty() {
        return Err(Error::Domain("loss mask selects no predictable position".into()));
    }
    Ok(targets)
}

fn log_softmax_at(row: &[f64], target: usize) -> (f64, f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    (row[target] - max - sum.ln(), max, sum)
}

/// Mean next-token cross-entropy over masked positions, forward only.
pub fn loss(config: &ModelConfig, params: &ParamStore, tokens: &[u32], loss_mask: &[bool]) -> Result<f64> {
    let targets = target_positions(tokens, loss_mask)?;
    let (logits, _) = forward(config, params, tokens)?;
    let total: f64 = targets
        .iter()
        .map(|&t| -log_softmax_at(logits.row(t - 1), tokens[t] as usize).0)
        .sum();
    Ok(total / targets.len() as f64)
}

/// Loss plus gradients of every parameter. `params` is not modified.
pub fn loss_and_grads(
    config: &ModelConfig,
    params: &ParamStore,
    tokens: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, ParamStore)> {
    let targets = target_positions(tokens, loss_mask)?;
    let (logits, trace) = forward(config, params, tokens)?;
    let n = targets.len() as f64;
    let (t_len, vocab) = logits.shape();

    let mut total = 0.0;
    let mut dlogits = Matrix::zeros(t_len, vocab);
    for &t in &targets {
        let row = logits.row(t - 1);
        let target = tokens[t] as usize;
        let (logp, max, sum) = log_softmax_at(row, target);
        total -= logp;
        let drow = dlogits.row_mut(t - 1);
        for (dv, v) in drow.iter_mut().zip(row) {
            *dv = (v - max).exp() / sum / n;
        }
        drow[target] -= 1.0 / n;
    }
    let loss = total / n;

    let grads = backward(config, params, &trace, &dlogits)?;
    Ok((loss, grads))
}

fn backward(config: &ModelConfig, params: &ParamStore, trace: &ForwardTrace, dlogits: &Matrix) -> Result<ParamStore> {
    let mut grads = params.zeros_like();
    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    // logits = hf · Eᵀ
    grads.token_embedding.add_assign(&matmul_tn(dlogits, &trace.hf)?)?;
    let dhf = matmul(dlogits, &params.token_embedding)?;
    let mut dx = layer_norm_backward(
        &dhf,
        &trace.lnf,
        &params.lnf_scale,
        &mut grads.lnf_scale,
        &mut grads.lnf_bias,
    );

    for (li, (lp, c)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];

        // MLP branch: x += gelu(b·W_up)·W_down
        gl.w_down.add_assign(&matmul_tn(&c.g, &dx)?)?;
        let mut du = matmul_nt(&dx, &lp.w_down)?;
        for (dv, uv) in du.data_mut().iter_mut().zip(c.u.data()) {
            *dv *= gelu_grad(*uv);
        }
        gl.w_up.add_assign(&matmul_tn(&c.b, &du)?)?;
        let db = matmul_nt(&du, &lp.w_up)?;
        let dln2 = layer_norm_backward(&db, &c.ln2, &lp.ln2_scale, &mut gl.ln2_scale, &mut gl.ln2_bias);
        dx.add_assign(&dln2)?;

        // attention branch: x += attn(a)·W_o
        gl.w_o.add_assign(&matmul_tn(&c.o, &dx)?)?;
        let d_o = matmul_nt(&dx, &lp.w_o)?;
        let t = d_o.rows();
        let mut dq = Matrix::zeros(t, config.d_model);
        let mut dk = Matrix::zeros(t, config.d_model);
        let mut dv = Matrix::zeros(t, config.d_model);
        let mut dp = vec![0.0; t];
        for h in 0..config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &c.probs[h];
            for i in 0..t {
                let doi = &d_o.row(i)[cols.clone()];
                let prow = &p.row(i)[..=i];
                let mut weighted = 0.0;
                for j in 0..=i {
                    dp[j] = dot(doi, &c.v.row(j)[cols.clone()]);
                    weighted += prow[j] * dp[j];
                    let dvj = &mut dv.row_mut(j)[cols.clone()];
                    for (a, b) in dvj.iter_mut().zip(doi) {
                        *a += prow[j] * b;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &c.k.row(j)[cols.clone()];
                    let dqi = &mut dq.row_mut(i)[cols.clone()];
                    for (a, b) in dqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let qi = &c.q.row(i)[cols.clone()];
                    let dkj = &mut dk.row_mut(j)[cols.clone()];
                    for (a, b) in dkj.iter_mut().zip(qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        gl.w_q.add_assign(&matmul_tn(&c.a, &dq)?)?;
        gl.w_k.add_assign(&matmul_tn(&c.a, &dk)?)?;
        gl.w_v.add_assign(&matmul_tn(&c.a, &dv)?)?;
        let mut da = matmul_nt(&dq, &lp.w_q)?;
        da.add_assign(&matmul_nt(&dk, &lp.w_k)?)?;
        da.add_assign(&matmul_nt(&dv, &lp.w_v)?)?;
        let dln1 = layer_norm_backward(&da, &c.ln1, &lp.ln1_scale, &mut gl.ln1_scale, &mut gl.ln1_bias);
        dx.add_assign(&dln1)?;
    }

    for (pos, &tok) in trace.tokens.iter().enumerate() {
        let dxr = dx.row(pos);
        for (g, v) in grads.token_embedding.row_mut(tok as usize).iter_mut().zip(dxr) {
            *g += v;
        }
        for (g, v) in grads.pos_embedding.row_mut(pos).iter_mut().zip(dxr) {
            *g += v;
        }
    }
    Ok(grads)
}
