//! Next-token cross-entropy training with Adam. Single-threaded and
//! bitwise reproducible given seed and corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::{forward_cache, gelu_grad, ForwardCache};
use super::{positional_encodings, Checkpoint, ModelConfig, Vocab, Weights};
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Optimizer and data-sampling hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            steps: 2000,
            batch: 8,
            seq_len: 32,
            seed: 0,
        }
    }
}

/// Trained checkpoint plus the per-step loss log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Trains a model from scratch on a plain-text corpus.
///
/// The vocabulary is built from the corpus (capped at
/// `cfg.vocab_size - 4` non-reserved words); the effective vocab size
/// replaces `cfg.vocab_size` in the returned checkpoint.
pub fn train(corpus: &str, cfg: &ModelConfig, hyper: &TrainHyper) -> Result<TrainOutcome> {
    cfg.validate()?;
    if hyper.seq_len + 1 > cfg.max_seq_len {
        return Err(Error::Model(format!(
            "seq_len {} + 1 exceeds max_seq_len {}",
            hyper.seq_len, cfg.max_seq_len
        )));
    }
    let vocab = Vocab::build(corpus, cfg.vocab_size.saturating_sub(4))?;
    let ids: Vec<u32> = vocab.encode(corpus).0;
    if ids.len() < hyper.seq_len + 1 {
        return Err(Error::Model(format!(
            "corpus too small: {} tokens, need at least {}",
            ids.len(),
            hyper.seq_len + 1
        )));
    }
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..*cfg
    };

    let mut weights = Weights::init(&config, hyper.seed);
    let mut opt = Adam::new(&weights, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let max_start = ids.len() - hyper.seq_len - 1;

    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut batch = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            let start = rng.gen_range(0..=max_start);
            batch.push(ids[start..start + hyper.seq_len + 1].to_vec());
        }
        let (loss, grads) = loss_and_gradients(&config, &weights, &batch)?;
        opt.step(&mut weights, &grads);
        losses.push(loss);
        if step % 100 == 0 {
            log::info!("step {} loss {:.4}", step, loss);
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config,
            vocab,
            weights,
        },
        losses,
    })
}

/// Trailing-window mean of a loss log.
pub fn smoothed(losses: &[f64], window: usize) -> f64 {
    let w = window.min(losses.len()).max(1);
    losses[losses.len() - w..].iter().sum::<f64>() / w as f64
}

/// Mean next-token cross-entropy of a batch of windows (each
/// `seq_len + 1` ids: inputs are `[..n]`, targets `[1..]`) and its full
/// gradient. Exposed so gradients can be checked against finite
/// differences.
pub fn loss_and_gradients(
    cfg: &ModelConfig,
    w: &Weights,
    batch: &[Vec<u32>],
) -> Result<(f64, Weights)> {
    if batch.is_empty() {
        return Err(Error::Model("empty batch".into()));
    }
    let n = batch[0].len() - 1;
    let pe = positional_encodings(n, cfg.d_model);
    let total_positions = (batch.len() * n) as f64;

    let mut grads = Weights::zeros(cfg);
    let mut total_loss = 0.0;
    for window in batch {
        if window.len() != n + 1 {
            return Err(Error::Model("ragged batch".into()));
        }
        let inputs = &window[..n];
        let targets = &window[1..];

        let mut x0 = Matrix::zeros(n, cfg.d_model);
        for (i, &id) in inputs.iter().enumerate() {
            x0.row_mut(i).copy_from_slice(w.embedding.row(id as usize));
            for (x, p) in x0.row_mut(i).iter_mut().zip(pe.row(i)) {
                *x += p;
            }
        }
        let cache = forward_cache(cfg, w, x0)?;

        // Softmax + cross-entropy; dlogits = (p - onehot) / total_positions.
        let mut dlogits = Matrix::zeros(n, cfg.vocab_size);
        for i in 0..n {
            let row = cache.logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                dlogits.set(i, j, e);
                sum += e;
            }
            let target = targets[i] as usize;
            total_loss += (max + sum.ln() - row[target]) / total_positions;
            for j in 0..cfg.vocab_size {
                let p = dlogits.get(i, j) / sum;
                dlogits.set(i, j, (p - if j == target { 1.0 } else { 0.0 }) / total_positions);
            }
        }

        backward(cfg, w, &cache, inputs, &dlogits, &mut grads)?;
    }
    Ok((total_loss, grads))
}

fn colsum_into(m: &Matrix, acc: &mut Matrix) {
    for i in 0..m.rows() {
        for (a, v) in acc.row_mut(0).iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
}

/// Layer-norm backward. Accumulates dgamma/dbeta and returns dx.
fn layer_norm_backward(
    dy: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gamma: &Matrix,
    dgamma: &mut Matrix,
    dbeta: &mut Matrix,
) -> Matrix {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let dy_row = dy.row(i);
        let xh_row = xhat.row(i);
        let mut m1 = 0.0; // mean of dxhat
        let mut m2 = 0.0; // mean of dxhat * xhat
        for j in 0..d {
            let dxh = dy_row[j] * gamma.get(0, j);
            m1 += dxh;
            m2 += dxh * xh_row[j];
            dgamma.row_mut(0)[j] += dy_row[j] * xh_row[j];
            dbeta.row_mut(0)[j] += dy_row[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            let dxh = dy_row[j] * gamma.get(0, j);
            dx.set(i, j, inv_std[i] * (dxh - m1 - xh_row[j] * m2));
        }
    }
    dx
}

fn backward(
    cfg: &ModelConfig,
    w: &Weights,
    cache: &ForwardCache,
    inputs: &[u32],
    dlogits: &Matrix,
    grads: &mut Weights,
) -> Result<()> {
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let n = dlogits.rows();

    // Output projection.
    let d_lnf_out = dlogits.matmul(&w.w_out.transpose())?;
    add_into(&mut grads.w_out, &cache.lnf_out.transpose().matmul(dlogits)?);
    colsum_into(dlogits, &mut grads.b_out);

    let mut d_hidden = layer_norm_backward(
        &d_lnf_out,
        &cache.lnf_xhat,
        &cache.lnf_inv_std,
        &w.lnf_gamma,
        &mut grads.lnf_gamma,
        &mut grads.lnf_beta,
    );

    for (layer_idx, lc) in cache.layers.iter().enumerate().rev() {
        let lw = &w.layers[layer_idx];
        let lg = &mut grads.layers[layer_idx];
        let d_res2 = d_hidden;

        // FFN branch: res2 = res1 + gelu(ln2_out W1 + b1) W2 + b2.
        add_into(&mut lg.w2, &lc.ffn_act.transpose().matmul(&d_res2)?);
        colsum_into(&d_res2, &mut lg.b2);
        let d_act = d_res2.matmul(&lw.w2.transpose())?;
        let mut d_pre = d_act;
        for (g, pre) in d_pre.data_mut().iter_mut().zip(lc.ffn_pre.data()) {
            *g *= gelu_grad(*pre);
        }
        add_into(&mut lg.w1, &lc.ln2_out.transpose().matmul(&d_pre)?);
        colsum_into(&d_pre, &mut lg.b1);
        let d_ln2_out = d_pre.matmul(&lw.w1.transpose())?;
        let mut d_res1 = layer_norm_backward(
            &d_ln2_out,
            &lc.ln2_xhat,
            &lc.ln2_inv_std,
            &lw.ln2_gamma,
            &mut lg.ln2_gamma,
            &mut lg.ln2_beta,
        );
        add_into(&mut d_res1, &d_res2);

        // Attention branch: res1 = block_in + (concat heads) Wo.
        let d_attn_out = &d_res1;
        add_into(&mut lg.wo, &lc.attn_concat.transpose().matmul(d_attn_out)?);
        let d_concat = d_attn_out.matmul(&lw.wo.transpose())?;

        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..n_heads {
            let lo = h * d_head;
            let probs = &lc.attn_probs[h];
            for i in 0..n {
                let dctx = &d_concat.row(i)[lo..lo + d_head];
                // dA_ij = dctx . v_j ; dV_j += A_ij * dctx
                let mut da = vec![0.0; i + 1];
                for j in 0..=i {
                    let vj = &lc.v.row(j)[lo..lo + d_head];
                    da[j] = crate::numerics::dot(dctx, vj);
                    let a = probs.get(i, j);
                    if a != 0.0 {
                        for (t, &g) in dv.row_mut(j)[lo..lo + d_head].iter_mut().zip(dctx) {
                            *t += a * g;
                        }
                    }
                }
                // Softmax backward on the causal row.
                let mut inner = 0.0;
                for j in 0..=i {
                    inner += da[j] * probs.get(i, j);
                }
                for j in 0..=i {
                    let ds = probs.get(i, j) * (da[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k.row(j)[lo..lo + d_head];
                    for (t, &kv) in dq.row_mut(i)[lo..lo + d_head].iter_mut().zip(kj) {
                        *t += ds * kv;
                    }
                    let qi: Vec<f64> = lc.q.row(i)[lo..lo + d_head].to_vec();
                    for (t, &qv) in dk.row_mut(j)[lo..lo + d_head].iter_mut().zip(&qi) {
                        *t += ds * qv;
                    }
                }
            }
        }

        add_into(&mut lg.wq, &lc.ln1_out.transpose().matmul(&dq)?);
        add_into(&mut lg.wk, &lc.ln1_out.transpose().matmul(&dk)?);
        add_into(&mut lg.wv, &lc.ln1_out.transpose().matmul(&dv)?);

        let mut d_ln1_out = dq.matmul(&lw.wq.transpose())?;
        add_into(&mut d_ln1_out, &dk.matmul(&lw.wk.transpose())?);
        add_into(&mut d_ln1_out, &dv.matmul(&lw.wv.transpose())?);

        let mut d_block_in = layer_norm_backward(
            &d_ln1_out,
            &lc.ln1_xhat,
            &lc.ln1_inv_std,
            &lw.ln1_gamma,
            &mut lg.ln1_gamma,
            &mut lg.ln1_beta,
        );
        add_into(&mut d_block_in, &d_res1);
        d_hidden = d_block_in;
    }

    // Embedding table.
    for (i, &id) in inputs.iter().enumerate() {
        for (g, v) in grads
            .embedding
            .row_mut(id as usize)
            .iter_mut()
            .zip(d_hidden.row(i))
        {
            *g += v;
        }
    }
    Ok(())
}

fn add_into(acc: &mut Matrix, m: &Matrix) {
    for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
        *a += v;
    }
}

/// Plain Adam with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(weights: &Weights, lr: f64) -> Adam {
        let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.data().len()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    fn step(&mut self, weights: &mut Weights, grads: &Weights) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let gtensors = grads.tensors();
        for (idx, wt) in weights.tensors_mut().into_iter().enumerate() {
            let g = gtensors[idx].data();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (j, w) in wt.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
