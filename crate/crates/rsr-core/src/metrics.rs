//! Quantifies perturbation effects: embedding and hidden-state shift,
//! lexical variability, attention-distribution stability, semantic drift.
//! All functions are pure and deterministic.

use serde::Serialize;

use crate::model::{forward, tokenize, Checkpoint, ForwardTrace, TokenSequence, Vocab};
use crate::numerics::{cosine_sim, pca2, Matrix};
use crate::regeneration::PerturbationTrace;
use crate::{Error, Result};

/// Paired 2-D projections of clean and perturbed final-layer hidden
/// states, on shared axes.
#[derive(Debug, Clone, Serialize)]
pub struct PcaPoints {
    pub original: Vec<[f64; 2]>,
    pub perturbed: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
}

/// Representational shift between original and perturbed embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct ShiftReport {
    pub mean_cosine: f64,
    pub mean_euclidean: f64,
    /// One entry per hidden state, embedding layer included
    /// (length n_layers + 1).
    pub per_layer_hidden_distance: Vec<f64>,
    pub pca_points: PcaPoints,
}

/// Compares clean and perturbed representations for one sequence.
///
/// Hidden-state distances come from running the model twice (with and
/// without the embedding override) and averaging row-wise Euclidean
/// distance per layer. The PCA is a joint two-population projection: both
/// runs' final hidden states share the same axes.
pub fn embedding_shift(
    trace: &PerturbationTrace,
    ckpt: &Checkpoint,
    seq: &TokenSequence,
) -> Result<ShiftReport> {
    let n = seq.len();
    if trace.original.rows() != n || trace.perturbed.rows() != n {
        return Err(Error::Metrics(format!(
            "trace has {} rows, sequence has {} tokens",
            trace.original.rows(),
            n
        )));
    }

    let mut mean_cosine = 0.0;
    let mut mean_euclidean = 0.0;
    for i in 0..n {
        let a = trace.original.row(i);
        let b = trace.perturbed.row(i);
        mean_cosine += cosine_sim(a, b)?;
        mean_euclidean += row_distance(a, b);
    }
    mean_cosine /= n as f64;
    mean_euclidean /= n as f64;

    let clean = forward(ckpt, seq, None)?;
    let perturbed = forward(ckpt, seq, Some(&trace.perturbed))?;

    let mut per_layer = Vec::with_capacity(clean.hidden_states.len());
    for (hc, hp) in clean.hidden_states.iter().zip(&perturbed.hidden_states) {
        let mut dist = 0.0;
        for i in 0..n {
            dist += row_distance(hc.row(i), hp.row(i));
        }
        per_layer.push(dist / n as f64);
    }

    // Joint PCA over both final-layer populations.
    let last_c = clean.hidden_states.last().unwrap();
    let last_p = perturbed.hidden_states.last().unwrap();
    let mut stacked = Matrix::zeros(2 * n, ckpt.config.d_model);
    for i in 0..n {
        stacked.row_mut(i).copy_from_slice(last_c.row(i));
        stacked.row_mut(n + i).copy_from_slice(last_p.row(i));
    }
    let p = pca2(&stacked)?;
    let point = |i: usize| [p.projections.get(i, 0), p.projections.get(i, 1)];
    let pca_points = PcaPoints {
        original: (0..n).map(point).collect(),
        perturbed: (n..2 * n).map(point).collect(),
        eigenvalues: p.eigenvalues,
    };

    Ok(ShiftReport {
        mean_cosine,
        mean_euclidean,
        per_layer_hidden_distance: per_layer,
        pca_points,
    })
}

fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Tunable constants behind the lexical metrics. The defaults are the
/// documented reference values; override to taste.
#[derive(Debug, Clone)]
pub struct LexicalConfig {
    /// A token repeats if it occurred within this many preceding tokens.
    pub repetition_window: usize,
    /// Words with training-corpus frequency below this are rare.
    pub rare_threshold: u64,
    pub stopwords: Vec<&'static str>,
}

/// Fixed 50-word stopword list used by the default lexical density.
pub const STOPWORDS: [&str; 50] = [
    "the", "a", "an", "and", "or", "but", "if", "then", "of", "to", "in", "on", "at", "by", "for",
    "with", "from", "as", "is", "are", "was", "were", "be", "been", "it", "its", "this", "that",
    "these", "those", "he", "she", "they", "we", "you", "i", "his", "her", "their", "our", "not",
    "no", "do", "does", "did", "have", "has", "had", "will", "so",
];

impl Default for LexicalConfig {
    fn default() -> Self {
        LexicalConfig {
            repetition_window: 10,
            rare_threshold: 5,
            stopwords: STOPWORDS.to_vec(),
        }
    }
}

/// Lexical variability profile of a text.
#[derive(Debug, Clone, Serialize)]
pub struct LexicalProfile {
    pub ttr: f64,
    pub mean_sentence_len: f64,
    pub lexical_density: f64,
    pub repetition_rate: f64,
    pub rare_word_rate: f64,
    pub token_count: usize,
    pub type_count: usize,
}

/// Computes the lexical profile of a text against a training vocabulary.
///
/// Sentences split on `. ! ?`; those delimiters are excluded from token
/// counts. Lexical density counts tokens that are neither stopwords nor
/// punctuation. Rarity uses the vocabulary's training-corpus frequencies;
/// out-of-vocabulary words count as rare.
pub fn lexical_profile(text: &str, vocab: &Vocab, cfg: &LexicalConfig) -> Result<LexicalProfile> {
    let raw = tokenize(text);
    let mut tokens: Vec<&str> = Vec::with_capacity(raw.len());
    let mut sentence_lens = Vec::new();
    let mut current_len = 0usize;
    for t in &raw {
        if matches!(t.as_str(), "." | "!" | "?") {
            if current_len > 0 {
                sentence_lens.push(current_len);
                current_len = 0;
            }
        } else {
            tokens.push(t);
            current_len += 1;
        }
    }
    if current_len > 0 {
        sentence_lens.push(current_len);
    }
    if tokens.is_empty() {
        return Err(Error::Metrics("no non-delimiter tokens".into()));
    }

    let token_count = tokens.len();
    let mut types = std::collections::HashSet::new();
    for t in &tokens {
        types.insert(*t);
    }
    let type_count = types.len();

    let lexical = tokens
        .iter()
        .filter(|t| {
            let t: &str = t;
            !cfg.stopwords.contains(&t) && t != ","
        })
        .count();

    let mut repeats = 0usize;
    for (i, t) in tokens.iter().enumerate() {
        let lo = i.saturating_sub(cfg.repetition_window);
        if tokens[lo..i].contains(t) {
            repeats += 1;
        }
    }

    let rare = tokens
        .iter()
        .filter(|t| {
            vocab
                .id(t)
                .and_then(|id| vocab.freq(id))
                .map(|f| f < cfg.rare_threshold)
                .unwrap_or(true)
        })
        .count();

    Ok(LexicalProfile {
        ttr: type_count as f64 / token_count as f64,
        mean_sentence_len: token_count as f64 / sentence_lens.len() as f64,
        lexical_density: lexical as f64 / token_count as f64,
        repetition_rate: repeats as f64 / token_count as f64,
        rare_word_rate: rare as f64 / token_count as f64,
        token_count,
        type_count,
    })
}

/// Per-layer population standard deviation of the head-averaged causal
/// attention entries, for a clean and a perturbed trace.
pub fn attention_variance(
    trace_clean: &ForwardTrace,
    trace_perturbed: &ForwardTrace,
) -> Result<Vec<(f64, f64)>> {
    if trace_clean.attentions.len() != trace_perturbed.attentions.len() {
        return Err(Error::Metrics("layer count mismatch".into()));
    }
    let n_layers = trace_clean.attentions.len();
    let mut out = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let a = trace_clean.head_avg_attention(l)?;
        let b = trace_perturbed.head_avg_attention(l)?;
        if a.rows() != b.rows() {
            return Err(Error::Metrics("sequence length mismatch".into()));
        }
        out.push((causal_std(&a), causal_std(&b)));
    }
    Ok(out)
}

fn causal_std(m: &Matrix) -> f64 {
    let mut vals = Vec::new();
    for i in 0..m.rows() {
        for j in 0..=i.min(m.cols() - 1) {
            vals.push(m.get(i, j));
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Semantic-drift curve of a token sequence.
#[derive(Debug, Clone, Serialize)]
pub struct DriftCurve {
    pub window: usize,
    /// Similarity values for window ends `w ..= horizon`
    /// (length `horizon - window + 1`).
    pub values: Vec<f64>,
}

/// Cosine similarity between each sliding window's embedding centroid and
/// the opening window's centroid, using the checkpoint's embedding table,
/// so drift is a property of the emitted tokens alone.
pub fn semantic_drift(
    ckpt: &Checkpoint,
    tokens: &TokenSequence,
    window: usize,
    horizon: usize,
) -> Result<DriftCurve> {
    if window == 0 {
        return Err(Error::Metrics("window must be positive".into()));
    }
    if horizon < 2 * window {
        return Err(Error::Metrics(format!(
            "horizon {} must be at least twice the window {}",
            horizon, window
        )));
    }
    if tokens.len() < horizon {
        return Err(Error::Metrics(format!(
            "sequence length {} shorter than horizon {}",
            tokens.len(),
            horizon
        )));
    }
    let centroid = |ids: &[u32]| -> Result<Vec<f64>> {
        let d = ckpt.config.d_model;
        let mut c = vec![0.0; d];
        for &id in ids {
            if id as usize >= ckpt.config.vocab_size {
                return Err(Error::Metrics(format!("token id {} out of range", id)));
            }
            for (v, e) in c.iter_mut().zip(ckpt.weights.embedding.row(id as usize)) {
                *v += e;
            }
        }
        for v in c.iter_mut() {
            *v /= ids.len() as f64;
        }
        Ok(c)
    };

    let reference = centroid(&tokens.0[..window])?;
    let mut values = Vec::with_capacity(horizon - window + 1);
    for t in window..=horizon {
        let win = centroid(&tokens.0[t - window..t])?;
        // Bitwise-equal centroids are similarity 1 by definition; this
        // makes the first point exactly 1.
        let s = if win == reference {
            1.0
        } else {
            cosine_sim(&win, &reference)?
        };
        values.push(s);
    }
    Ok(DriftCurve { window, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Weights};
    use crate::model::vocab::RESERVED;

    fn test_ckpt() -> Checkpoint {
        let words: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                ["the", "cat", "sat", "ran", "hello", "rareword"]
                    .iter()
                    .map(|s| s.to_string()),
            )
            .collect();
        let freqs = vec![0, 0, 0, 0, 100, 40, 20, 10, 6, 2];
        let vocab = Vocab::from_parts(words, freqs);
        let config = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            vocab_size: vocab.len(),
        };
        Checkpoint {
            weights: Weights::init(&config, 5),
            config,
            vocab,
        }
    }

    #[test]
    fn shift_identity_trace_is_zero() {
        let ckpt = test_ckpt();
        let seq = TokenSequence(vec![4, 5, 6]);
        let e = ckpt.token_embeddings(&seq).unwrap();
        let trace = PerturbationTrace {
            original: e.clone(),
            perturbed: e,
            iteration_mean_delta: vec![],
            attention: Matrix::zeros(3, 3),
        };
        let r = embedding_shift(&trace, &ckpt, &seq).unwrap();
        assert!((r.mean_cosine - 1.0).abs() < 1e-12);
        assert!(r.mean_euclidean.abs() < 1e-12);
        for d in &r.per_layer_hidden_distance {
            assert!(d.abs() < 1e-12);
        }
        assert_eq!(
            r.per_layer_hidden_distance.len(),
            ckpt.config.n_layers + 1
        );
    }

    #[test]
    fn shift_orthogonal_swap() {
        let ckpt = test_ckpt();
        let seq = TokenSequence(vec![4, 5]);
        let mut orig = Matrix::zeros(2, 8);
        orig.set(0, 0, 1.0);
        orig.set(1, 1, 1.0);
        let mut pert = Matrix::zeros(2, 8);
        pert.set(0, 1, 1.0);
        pert.set(1, 0, 1.0);
        let trace = PerturbationTrace {
            original: orig,
            perturbed: pert,
            iteration_mean_delta: vec![],
            attention: Matrix::zeros(2, 2),
        };
        let r = embedding_shift(&trace, &ckpt, &seq).unwrap();
        assert!(r.mean_cosine.abs() < 1e-12);
        assert!((r.mean_euclidean - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn lexical_fixture_hand_counts() {
        let ckpt = test_ckpt();
        let p = lexical_profile(
            "the cat sat . the cat ran .",
            &ckpt.vocab,
            &LexicalConfig::default(),
        )
        .unwrap();
        assert_eq!(p.token_count, 6);
        assert_eq!(p.type_count, 4);
        assert!((p.ttr - 4.0 / 6.0).abs() < 1e-12);
        assert!((p.mean_sentence_len - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lexical_singleton() {
        let ckpt = test_ckpt();
        let p = lexical_profile("hello", &ckpt.vocab, &LexicalConfig::default()).unwrap();
        assert_eq!(p.ttr, 1.0);
        assert_eq!(p.repetition_rate, 0.0);
    }

    #[test]
    fn lexical_repetition_window() {
        let ckpt = test_ckpt();
        let p = lexical_profile("a a a a", &ckpt.vocab, &LexicalConfig::default()).unwrap();
        assert!((p.repetition_rate - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lexical_rare_words() {
        let ckpt = test_ckpt();
        // "rareword" freq 2 < 5, unknown word maps to rare, "the" freq 100.
        let p = lexical_profile("the rareword zzz", &ckpt.vocab, &LexicalConfig::default())
            .unwrap();
        assert!((p.rare_word_rate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lexical_delimiter_invariance() {
        let ckpt = test_ckpt();
        let cfg = LexicalConfig::default();
        let a = lexical_profile("the cat sat . the cat ran .", &ckpt.vocab, &cfg).unwrap();
        let b = lexical_profile("the cat sat ! the cat ran ?", &ckpt.vocab, &cfg).unwrap();
        assert_eq!(a.ttr, b.ttr);
        assert_eq!(a.mean_sentence_len, b.mean_sentence_len);
        assert_eq!(a.repetition_rate, b.repetition_rate);
    }

    #[test]
    fn lexical_empty_errors() {
        let ckpt = test_ckpt();
        assert!(lexical_profile(". . .", &ckpt.vocab, &LexicalConfig::default()).is_err());
    }

    #[test]
    fn ttr_decreases_with_duplicate() {
        let ckpt = test_ckpt();
        let cfg = LexicalConfig::default();
        let a = lexical_profile("cat sat ran", &ckpt.vocab, &cfg).unwrap();
        assert_eq!(a.ttr, 1.0);
        let b = lexical_profile("cat sat ran cat", &ckpt.vocab, &cfg).unwrap();
        assert!(b.ttr < a.ttr);
    }

    #[test]
    fn attention_std_degenerate_and_identity() {
        let ckpt = test_ckpt();
        let t1 = forward(&ckpt, &TokenSequence(vec![4]), None).unwrap();
        let pairs = attention_variance(&t1, &t1).unwrap();
        for (a, b) in pairs {
            assert_eq!(a, 0.0);
            assert_eq!(b, 0.0);
        }
        let t2 = forward(&ckpt, &TokenSequence(vec![4, 5, 6]), None).unwrap();
        let pairs = attention_variance(&t2, &t2).unwrap();
        for (a, b) in pairs {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn attention_std_hand_case() {
        // Head-averaged [[1],[0.5,0.5]] -> population std of {1, 0.5, 0.5}.
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let s = causal_std(&m);
        let mean = (1.0 + 0.5 + 0.5) / 3.0;
        let expected = (((1.0f64 - mean).powi(2) + 2.0 * (0.5 - mean).powi(2)) / 3.0).sqrt();
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.23570226039551587).abs() < 1e-12);
    }

    #[test]
    fn drift_constant_stream_is_one() {
        let ckpt = test_ckpt();
        let tokens = TokenSequence(vec![5; 30]);
        let c = semantic_drift(&ckpt, &tokens, 5, 25).unwrap();
        assert_eq!(c.values.len(), 21);
        for v in &c.values {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn drift_periodic_returns_to_one() {
        let ckpt = test_ckpt();
        let half: Vec<u32> = vec![4, 5, 6, 7, 8, 4, 5, 6, 7, 8];
        let mut ids = half.clone();
        ids.extend(&half);
        let horizon = ids.len();
        let c = semantic_drift(&ckpt, &TokenSequence(ids), 10, horizon).unwrap();
        assert_eq!(c.values[0], 1.0);
        assert_eq!(*c.values.last().unwrap(), 1.0);
    }

    #[test]
    fn drift_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let ckpt = test_ckpt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<u32> = (0..120).map(|_| rng.gen_range(4..10)).collect();
        let w = 10;
        let horizon = 100;
        let c = semantic_drift(&ckpt, &TokenSequence(ids.clone()), w, horizon).unwrap();

        // Straight-line two-pass oracle.
        let emb = |id: u32| ckpt.weights.embedding.row(id as usize).to_vec();
        let cen = |slice: &[u32]| {
            let mut acc = vec![0.0; ckpt.config.d_model];
            for &id in slice {
                for (a, v) in acc.iter_mut().zip(emb(id)) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= slice.len() as f64;
            }
            acc
        };
        let rf = cen(&ids[..w]);
        for (idx, t) in (w..=horizon).enumerate() {
            let cw = cen(&ids[t - w..t]);
            let expected = if cw == rf {
                1.0
            } else {
                cosine_sim(&cw, &rf).unwrap()
            };
            assert!((c.values[idx] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_short_sequence_errors() {
        let ckpt = test_ckpt();
        assert!(semantic_drift(&ckpt, &TokenSequence(vec![4; 10]), 4, 20).is_err());
    }
}
