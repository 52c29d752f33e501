//! Experiment orchestrator: runs clean-vs-perturbed generation grids over
//! a prompt set, computes every metric, and writes deterministic JSON/CSV
//! reports. Outputs are byte-identical for identical inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{
    attention_variance, embedding_shift, lexical_profile, semantic_drift, LexicalConfig,
    LexicalProfile, ShiftReport,
};
use crate::model::{
    checkpoint::load_checkpoint, forward, generate, perplexity_of_sequence, Checkpoint, Sampler,
};
use crate::regeneration::{generate_perturbed, Activation, Mode, PerturbationConfig};
use crate::{Error, Result};

/// Full experiment description, loaded from JSON (lower_snake_case keys).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub checkpoint: PathBuf,
    /// File with one prompt per line.
    pub prompts: PathBuf,
    pub sampler: Sampler,
    pub alpha_grid: Vec<f64>,
    pub depth_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub attention_layer: usize,
    #[serde(default)]
    pub neighborhood_k: Option<usize>,
    #[serde(default)]
    pub recompute_attention: bool,
    #[serde(default)]
    pub mode: Mode,
    /// Total sequence length each generation runs to.
    pub horizon: usize,
    pub drift_window: usize,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

/// One (grid point x prompt) result.
#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub grid_index: usize,
    pub prompt_index: usize,
    pub alpha: f64,
    pub depth: usize,
    pub lambda: f64,
    pub seed: u64,
    pub clean_text: String,
    pub perturbed_text: String,
    pub shift: ShiftReport,
    pub lexical_clean: LexicalProfile,
    pub lexical_perturbed: LexicalProfile,
    pub drift_clean: Vec<f64>,
    pub drift_perturbed: Vec<f64>,
    /// Per layer (std_clean, std_perturbed).
    pub attention_variance: Vec<(f64, f64)>,
    pub perplexity_clean: f64,
    pub perplexity_perturbed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
    pub format: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub metadata: RunMetadata,
    pub drift_window: usize,
    pub horizon: usize,
    pub n_layers: usize,
    pub cells: Vec<CellReport>,
}

/// Splitmix-style seed derivation, so grid cells are independent of
/// execution order and of each other. The grid key is derived from the
/// grid-point VALUES (not its position), which keeps sub-grid runs
/// byte-identical to the corresponding rows of a full grid.
///
/// `mix(master, key, prompt) = finalize(master + C1*(key+1) + C2*(prompt+1))`
/// with C1 = 0x9E3779B97F4A7C15, C2 = 0xBF58476D1CE4E5B9 and the
/// splitmix64 finalizer.
pub fn mix_seed(master: u64, grid_key: u64, prompt_index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(grid_key.wrapping_add(1)))
        .wrapping_add(0xBF58476D1CE4E5B9u64.wrapping_mul(prompt_index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn grid_key(alpha: f64, depth: usize, lambda: f64) -> u64 {
    let mut z = alpha.to_bits();
    z = z.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(depth as u64);
    z = z.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(lambda.to_bits());
    z
}

/// A resolved grid point.
#[derive(Debug, Clone, Copy)]
pub struct GridPoint {
    pub alpha: f64,
    pub depth: usize,
    pub lambda: f64,
}

impl ExperimentConfig {
    /// Cartesian product of the grids, alpha fastest.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut pts = Vec::new();
        for &lambda in &self.lambda_grid {
            for &depth in &self.depth_grid {
                for &alpha in &self.alpha_grid {
                    pts.push(GridPoint {
                        alpha,
                        depth,
                        lambda,
                    });
                }
            }
        }
        pts
    }

    fn perturbation_for(&self, pt: GridPoint, seed: u64) -> PerturbationConfig {
        PerturbationConfig {
            alpha: pt.alpha,
            depth: pt.depth,
            lambda: pt.lambda,
            activation: self.activation,
            attention_layer: self.attention_layer,
            neighborhood_k: self.neighborhood_k,
            recompute_attention: self.recompute_attention,
            mode: self.mode,
            seed,
        }
    }

    /// Validates everything that can be checked before touching the model.
    pub fn validate(&self) -> Result<()> {
        if !self.checkpoint.exists() {
            return Err(Error::Experiment(format!(
                "checkpoint path {} does not exist",
                self.checkpoint.display()
            )));
        }
        if !self.prompts.exists() {
            return Err(Error::Experiment(format!(
                "prompts path {} does not exist",
                self.prompts.display()
            )));
        }
        let pts = self.grid_points();
        if pts.is_empty() {
            return Err(Error::Experiment("empty perturbation grid".into()));
        }
        for (i, pt) in pts.iter().enumerate() {
            let cfg = self.perturbation_for(*pt, 0);
            cfg.validate().map_err(|e| {
                Error::Experiment(format!(
                    "grid point {} (alpha={}, depth={}, lambda={}): {}",
                    i, pt.alpha, pt.depth, pt.lambda, e
                ))
            })?;
        }
        if self.drift_window == 0 || self.horizon < 2 * self.drift_window {
            return Err(Error::Experiment(format!(
                "horizon {} must be at least twice drift_window {}",
                self.horizon, self.drift_window
            )));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{:02x}", b).unwrap();
    }
    s
}

fn sampler_with_seed(base: Sampler, seed: u64) -> Sampler {
    match base {
        Sampler::Greedy => Sampler::Greedy,
        Sampler::Temperature { tau, .. } => Sampler::Temperature { tau, seed },
    }
}

/// Runs the whole grid and writes report.json plus the CSV files into
/// `output_dir`. Nothing is written until every cell has been computed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let ckpt = load_checkpoint(&config.checkpoint)?;
    if config.horizon > ckpt.config.max_seq_len {
        return Err(Error::Experiment(format!(
            "horizon {} exceeds model max_seq_len {}",
            config.horizon, ckpt.config.max_seq_len
        )));
    }

    let prompt_text = std::fs::read_to_string(&config.prompts)?;
    let prompts: Vec<&str> = prompt_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if prompts.is_empty() {
        return Err(Error::Experiment("no prompts".into()));
    }

    let lex_cfg = LexicalConfig::default();
    let mut cells = Vec::new();
    for (gi, pt) in config.grid_points().iter().enumerate() {
        for (pi, prompt) in prompts.iter().enumerate() {
            let cell = run_cell(&ckpt, config, &lex_cfg, *pt, gi, pi, prompt)?;
            cells.push(cell);
        }
    }

    let report = ExperimentReport {
        metadata: RunMetadata {
            config_hash: config.config_hash()?,
            master_seed: config.master_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            format: 1,
        },
        drift_window: config.drift_window,
        horizon: config.horizon,
        n_layers: ckpt.config.n_layers,
        cells,
    };

    write_outputs(&report, &config.output_dir)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    ckpt: &Checkpoint,
    config: &ExperimentConfig,
    lex_cfg: &LexicalConfig,
    pt: GridPoint,
    grid_index: usize,
    prompt_index: usize,
    prompt: &str,
) -> Result<CellReport> {
    let seq = ckpt.vocab.encode(prompt);
    if seq.len() < 2 {
        return Err(Error::Experiment(format!(
            "prompt {} too short after encoding",
            prompt_index
        )));
    }
    if seq.len() >= config.horizon {
        return Err(Error::Experiment(format!(
            "prompt {} has {} tokens, horizon {} leaves no room to generate",
            prompt_index,
            seq.len(),
            config.horizon
        )));
    }
    let steps = config.horizon - seq.len();
    let seed = mix_seed(
        config.master_seed,
        grid_key(pt.alpha, pt.depth, pt.lambda),
        prompt_index as u64,
    );
    let sampler = sampler_with_seed(config.sampler, seed);
    let pcfg = config.perturbation_for(pt, seed);

    let clean_seq = generate(ckpt, &seq, steps, sampler)?;
    let (pert_seq, ptrace) = generate_perturbed(ckpt, &seq, steps, sampler, &pcfg)?;

    let shift = embedding_shift(&ptrace, ckpt, &seq)?;

    let clean_text = ckpt.vocab.decode(&clean_seq)?;
    let perturbed_text = ckpt.vocab.decode(&pert_seq)?;
    let lexical_clean = lexical_profile(&clean_text, &ckpt.vocab, lex_cfg)?;
    let lexical_perturbed = lexical_profile(&perturbed_text, &ckpt.vocab, lex_cfg)?;

    let drift_clean = semantic_drift(ckpt, &clean_seq, config.drift_window, config.horizon)?;
    let drift_perturbed = semantic_drift(ckpt, &pert_seq, config.drift_window, config.horizon)?;

    let trace_clean = forward(ckpt, &seq, None)?;
    let trace_pert = forward(ckpt, &seq, Some(&ptrace.perturbed))?;
    let attn_var = attention_variance(&trace_clean, &trace_pert)?;

    let perplexity_clean = perplexity_of_sequence(ckpt, &seq, None)?;
    let perplexity_perturbed = perplexity_of_sequence(ckpt, &seq, Some(&pcfg))?;

    Ok(CellReport {
        grid_index,
        prompt_index,
        alpha: pt.alpha,
        depth: pt.depth,
        lambda: pt.lambda,
        seed,
        clean_text,
        perturbed_text,
        shift,
        lexical_clean,
        lexical_perturbed,
        drift_clean: drift_clean.values,
        drift_perturbed: drift_perturbed.values,
        attention_variance: attn_var,
        perplexity_clean,
        perplexity_perturbed,
    })
}

fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_vec_pretty(report)?,
    )?;
    std::fs::write(dir.join("shift.csv"), shift_csv(report))?;
    std::fs::write(dir.join("lexical.csv"), lexical_csv(report))?;
    std::fs::write(
        dir.join("attention_variance.csv"),
        attention_variance_csv(report),
    )?;
    std::fs::write(dir.join("drift.csv"), drift_csv(report))?;
    std::fs::write(dir.join("pca_points.csv"), pca_points_csv(report))?;
    Ok(())
}

pub fn shift_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(
        "grid_index,prompt_index,alpha,depth,lambda,mean_cosine,mean_euclidean,perplexity_clean,perplexity_perturbed",
    );
    for l in 0..=report.n_layers {
        write!(s, ",hidden_distance_l{}", l).unwrap();
    }
    s.push('\n');
    for c in &report.cells {
        write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.grid_index,
            c.prompt_index,
            c.alpha,
            c.depth,
            c.lambda,
            c.shift.mean_cosine,
            c.shift.mean_euclidean,
            c.perplexity_clean,
            c.perplexity_perturbed
        )
        .unwrap();
        for d in &c.shift.per_layer_hidden_distance {
            write!(s, ",{}", d).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn lexical_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(
        "grid_index,prompt_index,variant,ttr,mean_sentence_len,lexical_density,repetition_rate,rare_word_rate,token_count,type_count\n",
    );
    for c in &report.cells {
        for (variant, p) in [("clean", &c.lexical_clean), ("perturbed", &c.lexical_perturbed)] {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.grid_index,
                c.prompt_index,
                variant,
                p.ttr,
                p.mean_sentence_len,
                p.lexical_density,
                p.repetition_rate,
                p.rare_word_rate,
                p.token_count,
                p.type_count
            )
            .unwrap();
        }
    }
    s
}

pub fn attention_variance_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("grid_index,prompt_index,layer,std_clean,std_perturbed\n");
    for c in &report.cells {
        for (layer, (a, b)) in c.attention_variance.iter().enumerate() {
            writeln!(s, "{},{},{},{},{}", c.grid_index, c.prompt_index, layer, a, b).unwrap();
        }
    }
    s
}

pub fn drift_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("grid_index,prompt_index,variant,step,similarity\n");
    for c in &report.cells {
        for (variant, values) in [("clean", &c.drift_clean), ("perturbed", &c.drift_perturbed)] {
            for (i, v) in values.iter().enumerate() {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    c.grid_index,
                    c.prompt_index,
                    variant,
                    report.drift_window + i,
                    v
                )
                .unwrap();
            }
        }
    }
    s
}

pub fn pca_points_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("grid_index,prompt_index,population,position,pc1,pc2\n");
    for c in &report.cells {
        for (pop, pts) in [
            ("original", &c.shift.pca_points.original),
            ("perturbed", &c.shift.pca_points.perturbed),
        ] {
            for (i, p) in pts.iter().enumerate() {
                writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.grid_index, c.prompt_index, pop, i, p[0], p[1]
                )
                .unwrap();
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_spreads_and_is_stable() {
        let a = mix_seed(1, 0, 0);
        let b = mix_seed(1, 0, 1);
        let c = mix_seed(1, 1, 0);
        let d = mix_seed(2, 0, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, mix_seed(1, 0, 0));
    }

    #[test]
    fn grid_key_depends_on_values_only() {
        assert_eq!(grid_key(0.1, 3, 0.5), grid_key(0.1, 3, 0.5));
        assert_ne!(grid_key(0.1, 3, 0.5), grid_key(0.2, 3, 0.5));
        assert_ne!(grid_key(0.1, 3, 0.5), grid_key(0.1, 4, 0.5));
    }

    #[test]
    fn validate_rejects_missing_paths_and_bad_grid() {
        let cfg = ExperimentConfig {
            checkpoint: PathBuf::from("/nonexistent/ckpt"),
            prompts: PathBuf::from("/nonexistent/prompts"),
            sampler: Sampler::Greedy,
            alpha_grid: vec![0.1],
            depth_grid: vec![1],
            lambda_grid: vec![0.1],
            activation: Activation::Tanh,
            attention_layer: 0,
            neighborhood_k: None,
            recompute_attention: false,
            mode: Mode::PromptOnly,
            horizon: 40,
            drift_window: 10,
            output_dir: PathBuf::from("/tmp/out"),
            master_seed: 0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_point_errors_name_the_point() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("c");
        let prompts = dir.path().join("p");
        std::fs::write(&ckpt, b"x").unwrap();
        std::fs::write(&prompts, b"x").unwrap();
        let cfg = ExperimentConfig {
            checkpoint: ckpt,
            prompts,
            sampler: Sampler::Greedy,
            alpha_grid: vec![0.1],
            depth_grid: vec![1],
            lambda_grid: vec![2.0], // invalid
            activation: Activation::Tanh,
            attention_layer: 0,
            neighborhood_k: None,
            recompute_attention: false,
            mode: Mode::PromptOnly,
            horizon: 40,
            drift_window: 10,
            output_dir: PathBuf::from("/tmp/out"),
            master_seed: 0,
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lambda=2"), "{}", err);
    }
}
