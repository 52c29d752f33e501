//! Recursive attention-conditioned embedding perturbation, applied at
//! inference time. Model weights are never touched; the only injection
//! point is the embedding override of [`crate::model::forward`].
//!
//! One outer iteration updates every position from the iteration-start
//! embeddings (simultaneous update, so traversal order cannot matter),
//! then renormalizes each row back to its original norm. After the last
//! iteration a residual step pulls the result back toward the original
//! embeddings: `E' = E - lambda * (E - E0)`, a descent step on
//! `L(E) = 1/2 * sum ||e_i - e_i0||^2`.

use serde::{Deserialize, Serialize};

use crate::model::{forward, Checkpoint, Sampler, TokenSequence};
use crate::numerics::{norm, Matrix};
use crate::{Error, Result};

/// Elementwise activation applied to the context drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }
}

/// Whether the prompt is perturbed once or the whole growing sequence is
/// re-perturbed before every decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    PromptOnly,
    Continuous,
}

fn default_false() -> bool {
    false
}

/// Parameters of the recursive perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Step size applied to the activated context drift.
    pub alpha: f64,
    /// Number of outer iterations; 0 is the identity.
    pub depth: usize,
    /// Residual pull-back coefficient, in [0, 1].
    pub lambda: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Layer whose head-averaged attention supplies the weights.
    #[serde(default)]
    pub attention_layer: usize,
    /// Neighborhood size: keep the k largest-weight causal entries of each
    /// attention row and renormalize. `None` keeps all causal positions.
    #[serde(default)]
    pub neighborhood_k: Option<usize>,
    #[serde(default = "default_false")]
    pub recompute_attention: bool,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn identity() -> Self {
        PerturbationConfig {
            alpha: 0.0,
            depth: 0,
            lambda: 0.0,
            activation: Activation::Tanh,
            attention_layer: 0,
            neighborhood_k: None,
            recompute_attention: false,
            mode: Mode::PromptOnly,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Perturbation("alpha must be finite and >= 0".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Perturbation("lambda must be finite and >= 0".into()));
        }
        if self.lambda > 1.0 {
            return Err(Error::Perturbation(
                "lambda > 1 would overshoot past the original embeddings".into(),
            ));
        }
        if self.neighborhood_k == Some(0) {
            return Err(Error::Perturbation("neighborhood_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Record of one regeneration run.
#[derive(Debug, Clone)]
pub struct PerturbationTrace {
    pub original: Matrix,
    pub perturbed: Matrix,
    /// Mean per-position delta norm of each outer iteration.
    pub iteration_mean_delta: Vec<f64>,
    /// The head-averaged attention matrix the run used.
    pub attention: Matrix,
}

/// Attention-weighted context vector `C_i = sum_j W_ij e_j` over causal
/// positions. With `k` smaller than the causal neighborhood, only the k
/// largest-weight entries are kept and renormalized to sum 1.
pub fn attention_context(
    embeddings: &Matrix,
    attention: &Matrix,
    i: usize,
    k: Option<usize>,
) -> Result<Vec<f64>> {
    if attention.cols() != embeddings.rows() || i >= attention.rows() {
        return Err(Error::Perturbation("attention/embedding shape mismatch".into()));
    }
    let causal = i + 1;
    let row = &attention.row(i)[..causal];
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Perturbation(format!(
            "attention row {} is not stochastic (sum {})",
            i, sum
        )));
    }

    // (weight, position) pairs after optional top-k truncation.
    let mut weighted: Vec<(f64, usize)>;
    match k {
        Some(k) if k < causal => {
            let mut idx: Vec<usize> = (0..causal).collect();
            // Largest weight first; ties by position for determinism.
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(k);
            idx.sort_unstable();
            let kept: f64 = idx.iter().map(|&j| row[j]).sum();
            if kept == 0.0 {
                return Err(Error::Perturbation("top-k attention mass is zero".into()));
            }
            weighted = idx.iter().map(|&j| (row[j] / kept, j)).collect();
        }
        _ => {
            weighted = Vec::with_capacity(causal);
            for (j, &w) in row.iter().enumerate() {
                weighted.push((w, j));
            }
        }
    }

    let d = embeddings.cols();
    let mut ctx = vec![0.0; d];
    for (w, j) in weighted {
        if w == 0.0 {
            continue;
        }
        for (c, &e) in ctx.iter_mut().zip(embeddings.row(j)) {
            *c += w * e;
        }
    }
    Ok(ctx)
}

/// Perturbation step `alpha * sigma(C_i - e_i)`, elementwise.
pub fn perturb_delta(e_i: &[f64], c_i: &[f64], cfg: &PerturbationConfig) -> Result<Vec<f64>> {
    if e_i.len() != c_i.len() {
        return Err(Error::Perturbation(format!(
            "perturb_delta dimension mismatch: {} vs {}",
            e_i.len(),
            c_i.len()
        )));
    }
    Ok(e_i
        .iter()
        .zip(c_i)
        .map(|(&e, &c)| cfg.alpha * cfg.activation.apply(c - e))
        .collect())
}

/// Runs the full recursive regeneration over an embedding matrix.
pub fn regenerate(e0: &Matrix, attention: &Matrix, cfg: &PerturbationConfig) -> Result<PerturbationTrace> {
    cfg.validate()?;
    let n = e0.rows();
    if attention.rows() != n || attention.cols() != n {
        return Err(Error::Perturbation(format!(
            "attention shape {}x{}, expected {}x{}",
            attention.rows(),
            attention.cols(),
            n,
            n
        )));
    }
    let original_norms: Vec<f64> = (0..n).map(|i| norm(e0.row(i))).collect();
    if let Some(i) = original_norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Perturbation(format!("zero-norm embedding row {}", i)));
    }

    let mut e = e0.clone();
    let mut iteration_mean_delta = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        // Simultaneous update: all deltas come from the iteration-start state.
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let ctx = attention_context(&e, attention, i, cfg.neighborhood_k)?;
            deltas.push(perturb_delta(e.row(i), &ctx, cfg)?);
        }
        let mut mean_delta = 0.0;
        for (i, delta) in deltas.iter().enumerate() {
            mean_delta += norm(delta);
            let row = e.row_mut(i);
            for (v, d) in row.iter_mut().zip(delta) {
                *v += d;
            }
            // Renormalize to the ORIGINAL row norm.
            let cur = norm(row);
            if cur == 0.0 {
                return Err(Error::Perturbation(format!(
                    "row {} collapsed to zero during iteration",
                    i
                )));
            }
            let scale = original_norms[i] / cur;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        iteration_mean_delta.push(mean_delta / n as f64);
        if !e.is_finite() {
            return Err(Error::Perturbation("non-finite embeddings after iteration".into()));
        }
    }

    // Residual descent step on L(E) = 1/2 sum ||e_i - e_i0||^2.
    let mut perturbed = e;
    for (v, v0) in perturbed.data_mut().iter_mut().zip(e0.data()) {
        *v -= cfg.lambda * (*v - v0);
    }

    Ok(PerturbationTrace {
        original: e0.clone(),
        perturbed,
        iteration_mean_delta,
        attention: attention.clone(),
    })
}

/// Uniform-causal extension of a prompt attention matrix to a longer
/// sequence: original rows keep their weights (zero-padded), each new row
/// spreads mass uniformly over its causal positions.
fn extend_causal(w0: &Matrix, n: usize) -> Matrix {
    let p = w0.rows();
    Matrix::from_fn(n, n, |i, j| {
        if i < p {
            if j < p {
                w0.get(i, j)
            } else {
                0.0
            }
        } else if j <= i {
            1.0 / (i + 1) as f64
        } else {
            0.0
        }
    })
}

/// Generation through perturbed embeddings.
///
/// The attention source is a clean (unperturbed) forward pass at
/// `cfg.attention_layer`, head-averaged. In `PromptOnly` mode the prompt
/// embeddings are regenerated once and decoding proceeds with the override
/// pinned at prompt positions; in `Continuous` mode the full current
/// sequence is regenerated before every decoding step. `alpha = 0`
/// reproduces [`crate::model::generate`] bitwise.
pub fn generate_perturbed(
    ckpt: &Checkpoint,
    prompt: &TokenSequence,
    steps: usize,
    sampler: Sampler,
    cfg: &PerturbationConfig,
) -> Result<(TokenSequence, PerturbationTrace)> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Model("empty prompt".into()));
    }
    if cfg.attention_layer >= ckpt.config.n_layers {
        return Err(Error::Perturbation(format!(
            "attention_layer {} out of range (n_layers {})",
            cfg.attention_layer, ckpt.config.n_layers
        )));
    }

    let clean = forward(ckpt, prompt, None)?;
    let w0 = clean.head_avg_attention(cfg.attention_layer)?;
    let e0 = ckpt.token_embeddings(prompt)?;
    let prompt_trace = regenerate(&e0, &w0, cfg)?;

    let p = prompt.len();
    let d = ckpt.config.d_model;
    let mut ids = prompt.0.clone();
    let mut state = crate::model::sampler_state(sampler);

    for _ in 0..steps {
        let n = ids.len();
        let seq = TokenSequence(ids.clone());
        let override_emb = match cfg.mode {
            Mode::PromptOnly => {
                // Perturbed rows for the prompt, table rows after it.
                let mut m = Matrix::zeros(n, d);
                for i in 0..n {
                    if i < p {
                        m.row_mut(i).copy_from_slice(prompt_trace.perturbed.row(i));
                    } else {
                        m.row_mut(i)
                            .copy_from_slice(ckpt.weights.embedding.row(ids[i] as usize));
                    }
                }
                m
            }
            Mode::Continuous => {
                let w = if cfg.recompute_attention {
                    forward(ckpt, &seq, None)?.head_avg_attention(cfg.attention_layer)?
                } else {
                    extend_causal(&w0, n)
                };
                let e_cur = ckpt.token_embeddings(&seq)?;
                regenerate(&e_cur, &w, cfg)?.perturbed
            }
        };
        let trace = forward(ckpt, &seq, Some(&override_emb))?;
        let last = trace.logits.row(trace.logits.rows() - 1);
        ids.push(state.next_token(last));
    }

    Ok((TokenSequence(ids), prompt_trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_causal(n: usize) -> Matrix {
        Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 })
    }

    fn cfg(alpha: f64, depth: usize, lambda: f64) -> PerturbationConfig {
        PerturbationConfig {
            alpha,
            depth,
            lambda,
            ..PerturbationConfig::identity()
        }
    }

    #[test]
    fn context_one_hot_row_returns_that_embedding() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut w = Matrix::zeros(3, 3);
        w.set(0, 0, 1.0);
        w.set(1, 0, 1.0);
        w.set(2, 1, 1.0);
        let c = attention_context(&e, &w, 2, None).unwrap();
        assert_eq!(c, vec![3.0, 4.0]);
    }

    #[test]
    fn context_uniform_is_mean() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = uniform_causal(2);
        let c = attention_context(&e, &w, 1, None).unwrap();
        assert_eq!(c, vec![0.5, 0.5]);
    }

    #[test]
    fn context_top1_renormalizes() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let mut w = Matrix::zeros(3, 3);
        w.set(0, 0, 1.0);
        w.set(1, 0, 1.0);
        w.set(2, 0, 0.3);
        w.set(2, 2, 0.7);
        let c = attention_context(&e, &w, 2, Some(1)).unwrap();
        assert_eq!(c, vec![0.0, 2.0]);
    }

    #[test]
    fn context_rejects_non_stochastic_row() {
        let e = Matrix::zeros(2, 2);
        let mut w = Matrix::zeros(2, 2);
        w.set(0, 0, 1.0);
        w.set(1, 0, 0.4); // row sums to 0.4
        assert!(attention_context(&e, &w, 1, None).is_err());
    }

    #[test]
    fn delta_alpha_zero_is_zero() {
        let c = cfg(0.0, 1, 0.0);
        let d = perturb_delta(&[1.0, -2.0], &[5.0, 5.0], &c).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn delta_fixed_point_when_context_equals_embedding() {
        let c = cfg(0.7, 1, 0.0);
        let d = perturb_delta(&[1.0, 2.0], &[1.0, 2.0], &c).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn delta_closed_form_tanh() {
        let c = cfg(0.5, 1, 0.0);
        let d = perturb_delta(&[0.0, 0.0], &[1.0, -1.0], &c).unwrap();
        let expected = 0.5 * 1.0f64.tanh();
        assert!((d[0] - expected).abs() < 1e-15);
        assert!((d[1] + expected).abs() < 1e-15);
    }

    #[test]
    fn delta_dimension_mismatch_errors() {
        let c = cfg(0.1, 1, 0.0);
        assert!(perturb_delta(&[1.0], &[1.0, 2.0], &c).is_err());
    }

    #[test]
    fn regenerate_k0_lambda0_is_bitwise_identity() {
        let e0 = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.8]]).unwrap();
        let t = regenerate(&e0, &uniform_causal(2), &cfg(0.5, 0, 0.0)).unwrap();
        assert_eq!(t.perturbed, e0);
    }

    #[test]
    fn regenerate_alpha0_is_identity() {
        let e0 = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.8]]).unwrap();
        let t = regenerate(&e0, &uniform_causal(2), &cfg(0.0, 5, 0.7)).unwrap();
        assert_eq!(t.perturbed, e0);
    }

    #[test]
    fn regenerate_matches_straight_line_replay() {
        // Independent step-by-step replay of the algorithm: context,
        // delta, update, renorm, then the residual step.
        let e0 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = uniform_causal(2);
        let c = cfg(0.1, 1, 0.0);
        let t = regenerate(&e0, &w, &c).unwrap();

        // Position 0: C = e0[0]; delta = 0.1*tanh(0) = 0; stays (1,0).
        // Position 1: C = 0.5*(1,0)+0.5*(0,1) = (0.5,0.5);
        //   delta = 0.1*tanh((0.5,-0.5)); e = (d0, 1+d1); renorm to 1.
        let d0 = 0.1 * 0.5f64.tanh();
        let d1 = 0.1 * (-0.5f64).tanh();
        let raw = [d0, 1.0 + d1];
        let nrm = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
        let expected = [raw[0] / nrm, raw[1] / nrm];

        assert!((t.perturbed.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(t.perturbed.get(0, 1).abs() < 1e-12);
        assert!((t.perturbed.get(1, 0) - expected[0]).abs() < 1e-12);
        assert!((t.perturbed.get(1, 1) - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn regenerate_rejects_zero_row_and_bad_lambda() {
        let e0 = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(regenerate(&e0, &uniform_causal(2), &cfg(0.1, 1, 0.0)).is_err());
        let ok = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(regenerate(&ok, &uniform_causal(2), &cfg(0.1, 1, 1.5)).is_err());
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        // L(E) = 1/2 sum ||e - e0||^2 has gradient E - E0; check the
        // analytic form against central differences on random instances.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let loss = |e: &Matrix, e0: &Matrix| -> f64 {
            e.data()
                .iter()
                .zip(e0.data())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        for _ in 0..5 {
            let e0 = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let e = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            for idx in 0..12 {
                let h = 1e-6;
                let mut ep = e.clone();
                let mut em = e.clone();
                ep.data_mut()[idx] += h;
                em.data_mut()[idx] -= h;
                let fd = (loss(&ep, &e0) - loss(&em, &e0)) / (2.0 * h);
                let analytic = e.data()[idx] - e0.data()[idx];
                let denom = analytic.abs().max(1e-3);
                assert!(
                    ((fd - analytic) / denom).abs() < 1e-7,
                    "fd {} vs analytic {}",
                    fd,
                    analytic
                );
            }
        }
    }

    proptest! {
        #[test]
        fn norms_preserved_each_iteration(
            vals in proptest::collection::vec(-2.0..2.0f64, 12),
            alpha in 0.0..0.5f64,
            depth in 1usize..4,
        ) {
            let e0 = Matrix::from_vec(4, 3, vals).unwrap();
            prop_assume!((0..4).all(|i| norm(e0.row(i)) > 1e-3));
            let w = uniform_causal(4);
            // Depth 1 of the full run already exercises the renorm; check
            // the final state of every depth prefix.
            for k in 1..=depth {
                let t = regenerate(&e0, &w, &cfg(alpha, k, 0.0)).unwrap();
                for i in 0..4 {
                    let n1 = norm(t.perturbed.row(i));
                    let n0 = norm(e0.row(i));
                    prop_assert!((n1 - n0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn residual_contracts_toward_original(
            vals in proptest::collection::vec(-2.0..2.0f64, 12),
            lambda in 0.0..=1.0f64,
        ) {
            let e0 = Matrix::from_vec(4, 3, vals).unwrap();
            prop_assume!((0..4).all(|i| norm(e0.row(i)) > 1e-3));
            let w = uniform_causal(4);
            let pre = regenerate(&e0, &w, &cfg(0.3, 3, 0.0)).unwrap();
            let post = regenerate(&e0, &w, &cfg(0.3, 3, lambda)).unwrap();
            let dist_pre = pre.perturbed.sub(&e0).unwrap().frobenius_norm();
            let dist_post = post.perturbed.sub(&e0).unwrap().frobenius_norm();
            prop_assert!(dist_post <= dist_pre + 1e-12);
        }
    }
}
