//! Exit-code and surface behavior of the `rsr` binary. Model behavior is
//! covered by unit tests and the acceptance suite; here we train a tiny
//! throwaway model so each invocation finishes in well under a second.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn rsr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rsr"))
}

fn run(args: &[&str]) -> Output {
    rsr().args(args).output().expect("failed to spawn rsr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("killed by signal")
}

struct TinyModel {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
    corpus: PathBuf,
}

static TINY: OnceLock<TinyModel> = OnceLock::new();

fn tiny() -> &'static TinyModel {
    TINY.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        let text = "the cat sat on the mat . the dog ran to the cat . \
                    a bird flew over the mat and the dog slept . "
            .repeat(40);
        std::fs::write(&corpus, text).unwrap();
        let cfg = dir.path().join("train.json");
        std::fs::write(
            &cfg,
            r#"{"model":{"d_model":16,"n_layers":1,"n_heads":2,"d_ff":32,"max_seq_len":64,"vocab_size":64},"hyper":{"steps":30,"seq_len":16}}"#,
        )
        .unwrap();
        let ckpt = dir.path().join("tiny.rsr");
        let out = run(&[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        TinyModel {
            _dir: dir,
            ckpt,
            corpus,
        }
    })
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["generate", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    // Missing required --out.
    assert_eq!(code(&run(&["train", "--corpus", "x.txt"])), 1);
    // Non-numeric value for a numeric flag.
    let m = tiny();
    let out = run(&[
        "generate",
        "--ckpt",
        m.ckpt.to_str().unwrap(),
        "--prompt",
        "the cat",
        "--steps",
        "many",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn data_errors_exit_two() {
    let out = run(&[
        "generate",
        "--ckpt",
        "/nonexistent/model.rsr",
        "--prompt",
        "the cat",
        "--steps",
        "3",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let m = tiny();
    // Malformed inline perturbation JSON is a data error, not usage.
    let out = run(&[
        "generate",
        "--ckpt",
        m.ckpt.to_str().unwrap(),
        "--prompt",
        "the cat",
        "--steps",
        "3",
        "--perturb",
        "{\"alpha\":",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn generate_is_seeded_and_perturbable() {
    let m = tiny();
    let base = [
        "generate",
        "--ckpt",
        m.ckpt.to_str().unwrap(),
        "--prompt",
        "the cat sat",
        "--steps",
        "8",
        "--temperature",
        "0.9",
        "--seed",
        "5",
    ];
    let a = run(&base);
    let b = run(&base);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout, "same seed must give same text");

    // An identity perturbation must not change the output.
    let mut with_identity: Vec<&str> = base.to_vec();
    with_identity.push("--perturb");
    with_identity.push(r#"{"alpha":0.0,"depth":3,"lambda":0.1}"#);
    let c = run(&with_identity);
    assert_eq!(code(&c), 0);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn experiment_failure_leaves_no_partial_outputs() {
    let m = tiny();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // horizon exceeds the tiny model's max_seq_len of 64.
    let cfg = serde_json::json!({
        "checkpoint": m.ckpt,
        "prompts": m.corpus,
        "sampler": {"type": "greedy"},
        "alpha_grid": [0.1],
        "depth_grid": [2],
        "lambda_grid": [0.1],
        "horizon": 500,
        "drift_window": 5,
        "output_dir": out_dir,
        "master_seed": 1
    });
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = run(&["experiment", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(!out_dir.exists(), "failed run must not write outputs");

    let missing = run(&["experiment", "--config", "/nonexistent.json"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn experiment_writes_all_outputs() {
    let m = tiny();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let prompts = dir.path().join("prompts.txt");
    std::fs::write(&prompts, "the cat sat on the mat\nthe dog ran\n").unwrap();
    let cfg = serde_json::json!({
        "checkpoint": m.ckpt,
        "prompts": prompts,
        "sampler": {"type": "temperature", "tau": 0.8, "seed": 0},
        "alpha_grid": [0.0, 0.2],
        "depth_grid": [2],
        "lambda_grid": [0.1],
        "horizon": 30,
        "drift_window": 5,
        "output_dir": out_dir,
        "master_seed": 9
    });
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = run(&["experiment", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "report.json",
        "shift.csv",
        "lexical.csv",
        "attention_variance.csv",
        "drift.csv",
        "pca_points.csv",
    ] {
        let path = out_dir.join(f);
        assert!(path.exists(), "{} missing", f);
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 4);
}

#[test]
fn metrics_prints_csv_header_and_row() {
    let m = tiny();
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("sample.txt");
    std::fs::write(&text, "the cat sat . the cat ran .\n").unwrap();
    let out = run(&[
        "metrics",
        "--ckpt",
        m.ckpt.to_str().unwrap(),
        "--text",
        text.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "ttr,mean_sentence_len,lexical_density,repetition_rate,rare_word_rate,token_count,type_count"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[5], "6");
    assert_eq!(row[6], "4");
}

#[test]
fn checkpoint_roundtrips_through_the_cli() {
    let m = tiny();
    // Retraining with identical settings must produce identical bytes.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"model":{"d_model":16,"n_layers":1,"n_heads":2,"d_ff":32,"max_seq_len":64,"vocab_size":64},"hyper":{"steps":30,"seq_len":16}}"#,
    )
    .unwrap();
    let again = dir.path().join("again.rsr");
    let out = run(&[
        "train",
        "--corpus",
        m.corpus.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(read(&m.ckpt), read(&again), "training is not deterministic");
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}
