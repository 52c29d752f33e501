//! Forward pass, autoregressive generation, and perplexity for the
//! pre-norm decoder-only transformer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{positional_encodings, Checkpoint, ModelConfig, TokenSequence, Weights};
use crate::numerics::{softmax_rows, Matrix};
use crate::regeneration::{self, PerturbationConfig};
use crate::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Everything a forward pass exposes: logits, per-layer hidden states
/// (index 0 is the post-embedding layer input), and per-layer per-head
/// causal attention matrices.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Matrix,
    pub hidden_states: Vec<Matrix>,
    pub attentions: Vec<Vec<Matrix>>,
}

impl ForwardTrace {
    /// Head-averaged n x n attention matrix of one layer.
    pub fn head_avg_attention(&self, layer: usize) -> Result<Matrix> {
        let heads = self
            .attentions
            .get(layer)
            .ok_or_else(|| Error::Model(format!("layer {} out of range", layer)))?;
        let n = heads[0].rows();
        let mut avg = Matrix::zeros(n, n);
        for h in heads {
            for (o, v) in avg.data_mut().iter_mut().zip(h.data()) {
                *o += v;
            }
        }
        let scale = 1.0 / heads.len() as f64;
        for v in avg.data_mut() {
            *v *= scale;
        }
        Ok(avg)
    }
}

/// Per-layer intermediates kept for backpropagation.
pub(crate) struct LayerCache {
    pub ln1_xhat: Matrix,
    pub ln1_inv_std: Vec<f64>,
    pub ln1_out: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn_probs: Vec<Matrix>,
    pub attn_concat: Matrix,
    pub ln2_xhat: Matrix,
    pub ln2_inv_std: Vec<f64>,
    pub ln2_out: Matrix,
    pub ffn_pre: Matrix,
    pub ffn_act: Matrix,
}

pub(crate) struct ForwardCache {
    pub hidden: Vec<Matrix>,
    pub layers: Vec<LayerCache>,
    pub lnf_xhat: Matrix,
    pub lnf_inv_std: Vec<f64>,
    pub lnf_out: Matrix,
    pub logits: Matrix,
}

/// Row-wise layer norm. Returns (output, xhat, inv_std).
pub(crate) fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_stds = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        inv_stds.push(inv_std);
        for j in 0..d {
            let xh = (row[j] - mean) * inv_std;
            xhat.set(i, j, xh);
            out.set(i, j, gamma.get(0, j) * xh + beta.get(0, j));
        }
    }
    (out, xhat, inv_stds)
}

pub(crate) fn gelu(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(x: &mut Matrix, b: &Matrix) {
    let cols = x.cols();
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        for j in 0..cols {
            row[j] += b.get(0, j);
        }
    }
}

/// Full forward pass keeping all intermediates. `x0` is the layer-0 input
/// (embeddings plus positional encodings).
pub(crate) fn forward_cache(cfg: &ModelConfig, w: &Weights, x0: Matrix) -> Result<ForwardCache> {
    let n = x0.rows();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut hidden = vec![x0];
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for lw in &w.layers {
        let block_in = hidden.last().unwrap().clone();
        let (ln1_out, ln1_xhat, ln1_inv_std) = layer_norm(&block_in, &lw.ln1_gamma, &lw.ln1_beta);

        let q = ln1_out.matmul(&lw.wq)?;
        let k = ln1_out.matmul(&lw.wk)?;
        let v = ln1_out.matmul(&lw.wv)?;

        let mut attn_probs = Vec::with_capacity(n_heads);
        let mut attn_concat = Matrix::zeros(n, d);
        for h in 0..n_heads {
            let lo = h * d_head;
            // scores_ij = q_i . k_j / sqrt(d_head), causal
            let mut scores = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[lo..lo + d_head];
                for j in 0..=i {
                    let kj = &k.row(j)[lo..lo + d_head];
                    scores.set(i, j, crate::numerics::dot(qi, kj) * scale);
                }
            }
            let probs = softmax_rows(&scores, true)?;
            for i in 0..n {
                for j in 0..=i {
                    let a = probs.get(i, j);
                    if a == 0.0 {
                        continue;
                    }
                    let vj = &v.row(j)[lo..lo + d_head];
                    let out_row = attn_concat.row_mut(i);
                    for (t, &vv) in out_row[lo..lo + d_head].iter_mut().zip(vj) {
                        *t += a * vv;
                    }
                }
            }
            attn_probs.push(probs);
        }

        let attn_out = attn_concat.matmul(&lw.wo)?;
        let mut res1 = block_in.clone();
        for (r, a) in res1.data_mut().iter_mut().zip(attn_out.data()) {
            *r += a;
        }

        let (ln2_out, ln2_xhat, ln2_inv_std) = layer_norm(&res1, &lw.ln2_gamma, &lw.ln2_beta);
        let mut ffn_pre = ln2_out.matmul(&lw.w1)?;
        add_bias(&mut ffn_pre, &lw.b1);
        let mut ffn_act = ffn_pre.clone();
        for v in ffn_act.data_mut() {
            *v = gelu(*v);
        }
        let mut ffn_out = ffn_act.matmul(&lw.w2)?;
        add_bias(&mut ffn_out, &lw.b2);

        let mut res2 = res1.clone();
        for (r, f) in res2.data_mut().iter_mut().zip(ffn_out.data()) {
            *r += f;
        }

        layers.push(LayerCache {
            ln1_xhat,
            ln1_inv_std,
            ln1_out,
            q,
            k,
            v,
            attn_probs,
            attn_concat,
            ln2_xhat,
            ln2_inv_std,
            ln2_out,
            ffn_pre,
            ffn_act,
        });
        hidden.push(res2);
    }

    let (lnf_out, lnf_xhat, lnf_inv_std) =
        layer_norm(hidden.last().unwrap(), &w.lnf_gamma, &w.lnf_beta);
    let mut logits = lnf_out.matmul(&w.w_out)?;
    add_bias(&mut logits, &w.b_out);

    Ok(ForwardCache {
        hidden,
        layers,
        lnf_xhat,
        lnf_inv_std,
        lnf_out,
        logits,
    })
}

/// Runs the model over a token sequence.
///
/// With `embedding_override` given, the embedding table is bypassed and the
/// override rows (plus positional encodings) feed layer 1. The checkpoint
/// is never mutated.
pub fn forward(
    ckpt: &Checkpoint,
    seq: &TokenSequence,
    embedding_override: Option<&Matrix>,
) -> Result<ForwardTrace> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::Model("empty sequence".into()));
    }
    if n > ckpt.config.max_seq_len {
        return Err(Error::Model(format!(
            "sequence length {} exceeds max_seq_len {}",
            n, ckpt.config.max_seq_len
        )));
    }
    let d = ckpt.config.d_model;
    let emb = match embedding_override {
        Some(o) => {
            if o.rows() != n || o.cols() != d {
                return Err(Error::Model(format!(
                    "embedding override shape {}x{}, expected {}x{}",
                    o.rows(),
                    o.cols(),
                    n,
                    d
                )));
            }
            o.clone()
        }
        None => ckpt.token_embeddings(seq)?,
    };
    let pe = positional_encodings(n, d);
    let mut x0 = emb;
    for (x, p) in x0.data_mut().iter_mut().zip(pe.data()) {
        *x += p;
    }

    let cache = forward_cache(&ckpt.config, &ckpt.weights, x0)?;
    Ok(ForwardTrace {
        logits: cache.logits,
        hidden_states: cache.hidden,
        attentions: cache.layers.into_iter().map(|l| l.attn_probs).collect(),
    })
}

/// Decoding strategy for `generate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

pub(crate) struct SamplerState {
    sampler: Sampler,
    rng: Option<ChaCha8Rng>,
}

impl SamplerState {
    pub fn new(sampler: Sampler) -> Self {
        let rng = match sampler {
            Sampler::Greedy => None,
            Sampler::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        SamplerState { sampler, rng }
    }

    /// Picks the next token id from a row of logits. Greedy ties break
    /// toward the lowest id.
    pub fn next_token(&mut self, logits: &[f64]) -> u32 {
        match self.sampler {
            Sampler::Greedy => argmax(logits),
            Sampler::Temperature { tau, .. } => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
                let total: f64 = weights.iter().sum();
                let u: f64 = self.rng.as_mut().unwrap().gen_range(0.0..1.0);
                let mut acc = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    acc += w / total;
                    if u < acc {
                        return i as u32;
                    }
                }
                (logits.len() - 1) as u32
            }
        }
    }
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Autoregressive decoding: returns `prompt ++ generated`, always of
/// length `prompt.len() + steps`.
pub fn generate(
    ckpt: &Checkpoint,
    prompt: &TokenSequence,
    steps: usize,
    sampler: Sampler,
) -> Result<TokenSequence> {
    if prompt.is_empty() {
        return Err(Error::Model("empty prompt".into()));
    }
    let mut ids = prompt.0.clone();
    let mut state = SamplerState::new(sampler);
    for _ in 0..steps {
        let trace = forward(ckpt, &TokenSequence(ids.clone()), None)?;
        let last = trace.logits.row(trace.logits.rows() - 1);
        ids.push(state.next_token(last));
    }
    Ok(TokenSequence(ids))
}

/// exp(mean next-token negative log-likelihood) over positions 1..n-1.
///
/// With a perturbation config, the token embeddings first pass through the
/// recursive regeneration before the forward pass.
pub fn perplexity(
    ckpt: &Checkpoint,
    text: &str,
    perturbation: Option<&PerturbationConfig>,
) -> Result<f64> {
    let seq = ckpt.vocab.encode(text);
    perplexity_of_sequence(ckpt, &seq, perturbation)
}

pub fn perplexity_of_sequence(
    ckpt: &Checkpoint,
    seq: &TokenSequence,
    perturbation: Option<&PerturbationConfig>,
) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::Model("perplexity needs at least 2 tokens".into()));
    }
    let trace = match perturbation {
        None => forward(ckpt, seq, None)?,
        Some(cfg) => {
            let clean = forward(ckpt, seq, None)?;
            let w = clean.head_avg_attention(cfg.attention_layer)?;
            let e0 = ckpt.token_embeddings(seq)?;
            let ptrace = regeneration::regenerate(&e0, &w, cfg)?;
            forward(ckpt, seq, Some(&ptrace.perturbed))?
        }
    };
    Ok(mean_nll_from_logits(&trace.logits, &seq.0).exp())
}

/// Mean next-token negative log-likelihood straight from a logits matrix.
pub fn mean_nll_from_logits(logits: &Matrix, ids: &[u32]) -> f64 {
    let n = ids.len();
    let mut total = 0.0;
    for i in 0..n - 1 {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[ids[i + 1] as usize];
    }
    total / (n - 1) as f64
}
