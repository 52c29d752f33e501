//! Word-level tokenizer, decoder-only toy transformer with exposed hidden
//! states and attention maps, Adam trainer, and bit-exact checkpoint I/O.

pub mod checkpoint;
pub mod train;
mod transformer;
pub mod vocab;

pub use transformer::{
    forward, generate, mean_nll_from_logits, perplexity, perplexity_of_sequence, ForwardTrace,
    Sampler,
};

pub(crate) fn sampler_state(sampler: Sampler) -> transformer::SamplerState {
    transformer::SamplerState::new(sampler)
}
pub use vocab::{tokenize, TokenSequence, Vocab};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

/// Architecture hyperparameters of the toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    /// Desk-scale default: trains in minutes, deep enough for per-layer
    /// attention analysis.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            vocab_size: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::Model("config fields must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Model(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// V x d token embedding table.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gamma: Matrix,
    pub lnf_beta: Matrix,
    /// d x V output projection.
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl Weights {
    /// Zero-initialized weights with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Weights {
        let d = cfg.d_model;
        let layer = || LayerWeights {
            ln1_gamma: Matrix::zeros(1, d),
            ln1_beta: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_gamma: Matrix::zeros(1, d),
            ln2_beta: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, cfg.d_ff),
            b1: Matrix::zeros(1, cfg.d_ff),
            w2: Matrix::zeros(cfg.d_ff, d),
            b2: Matrix::zeros(1, d),
        };
        Weights {
            embedding: Matrix::zeros(cfg.vocab_size, d),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            lnf_gamma: Matrix::zeros(1, d),
            lnf_beta: Matrix::zeros(1, d),
            w_out: Matrix::zeros(d, cfg.vocab_size),
            b_out: Matrix::zeros(1, cfg.vocab_size),
        }
    }

    /// Seeded scaled-normal init (std 0.02); layer-norm gains start at 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::zeros(cfg);
        {
            let mut fill = |m: &mut Matrix| {
                for v in m.data_mut() {
                    *v = 0.02 * normal_sample(&mut rng);
                }
            };
            fill(&mut w.embedding);
            for l in &mut w.layers {
                fill(&mut l.wq);
                fill(&mut l.wk);
                fill(&mut l.wv);
                fill(&mut l.wo);
                fill(&mut l.w1);
                fill(&mut l.w2);
            }
            fill(&mut w.w_out);
        }
        for l in &mut w.layers {
            for v in l.ln1_gamma.data_mut() {
                *v = 1.0;
            }
            for v in l.ln2_gamma.data_mut() {
                *v = 1.0;
            }
        }
        for v in w.lnf_gamma.data_mut() {
            *v = 1.0;
        }
        w
    }

    /// All tensors in the documented fixed order (also the checkpoint
    /// serialization order): embedding, then per layer
    /// [ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma, ln2_beta,
    /// w1, b1, w2, b2], then lnf_gamma, lnf_beta, w_out, b_out.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend([
                &l.ln1_gamma,
                &l.ln1_beta,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ln2_gamma,
                &l.ln2_beta,
                &l.w1,
                &l.b1,
                &l.w2,
                &l.b2,
            ]);
        }
        out.extend([&self.lnf_gamma, &self.lnf_beta, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([
            &mut self.lnf_gamma,
            &mut self.lnf_beta,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }
}

/// Box-Muller standard normal; two uniform draws per sample keeps the
/// stream independent of the platform's float parsing.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Trained or loaded model state: config, vocabulary, and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub weights: Weights,
}

impl Checkpoint {
    /// Checks tensor shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        if self.vocab.len() != cfg.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocab size {} does not match config vocab_size {}",
                self.vocab.len(),
                cfg.vocab_size
            )));
        }
        let check = |m: &Matrix, r: usize, c: usize, name: &str| -> Result<()> {
            if m.rows() != r || m.cols() != c {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}x{}, expected {}x{}",
                    name,
                    m.rows(),
                    m.cols(),
                    r,
                    c
                )));
            }
            Ok(())
        };
        let d = cfg.d_model;
        check(&self.weights.embedding, cfg.vocab_size, d, "embedding")?;
        if self.weights.layers.len() != cfg.n_layers {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        for (i, l) in self.weights.layers.iter().enumerate() {
            let n = format!("layer{}", i);
            check(&l.ln1_gamma, 1, d, &n)?;
            check(&l.ln1_beta, 1, d, &n)?;
            check(&l.wq, d, d, &n)?;
            check(&l.wk, d, d, &n)?;
            check(&l.wv, d, d, &n)?;
            check(&l.wo, d, d, &n)?;
            check(&l.ln2_gamma, 1, d, &n)?;
            check(&l.ln2_beta, 1, d, &n)?;
            check(&l.w1, d, cfg.d_ff, &n)?;
            check(&l.b1, 1, cfg.d_ff, &n)?;
            check(&l.w2, cfg.d_ff, d, &n)?;
            check(&l.b2, 1, d, &n)?;
        }
        check(&self.weights.lnf_gamma, 1, d, "lnf_gamma")?;
        check(&self.weights.lnf_beta, 1, d, "lnf_beta")?;
        check(&self.weights.w_out, d, cfg.vocab_size, "w_out")?;
        check(&self.weights.b_out, 1, cfg.vocab_size, "b_out")?;
        Ok(())
    }

    /// Token embeddings for a sequence, straight from the table (no
    /// positional encodings).
    pub fn token_embeddings(&self, seq: &TokenSequence) -> Result<Matrix> {
        let d = self.config.d_model;
        let mut e = Matrix::zeros(seq.len(), d);
        for (i, &id) in seq.0.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Model(format!("token id {} out of range", id)));
            }
            e.row_mut(i)
                .copy_from_slice(self.weights.embedding.row(id as usize));
        }
        Ok(e)
    }
}

/// Sinusoidal positional encodings, n x d.
pub(crate) fn positional_encodings(n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |pos, j| {
        let i = j / 2;
        let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
        if j % 2 == 0 {
            rate.sin()
        } else {
            rate.cos()
        }
    })
}
