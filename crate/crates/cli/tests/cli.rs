use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use trf_cli::commands::{self, CHECKPOINT_DIR, TRF_FILE, VOCAB_FILE};
use trf_cli::config::ExperimentConfig;
use trf_core::corpus::TokenLevel;

const WORDS: &[&str] = &[
    "a", "an", "ab", "ba", "bab", "nab", "ban", "an", "na", "aa", "b", "n", "nan", "abb", "baa",
];

fn trf() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trf"));
    c.env_remove("TRF_SEED")
        .env_remove("TRF_OUTPUT_DIR")
        .env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), WORDS.join("\n")).unwrap();
        fs::write(dir.path().join("valid.txt"), "ab\nna\nbb\n").unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    /// Small char-level experiment; `extra` is appended to `[trf]`.
    fn config(&self, name: &str, out: &str, train: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"seed = 5
output_dir = "{out}"

[corpus]
train = "{train}"
valid = "valid.txt"
level = "char"
max_len = 5

[ngram]
order = 2

[potential]
embed_dim = 4
bank_width = 2
bank_channels = 2
stack_layers = 1
stack_channels = 3
lstm_hidden = 3
init_scale = 0.1

[trf]
reference = "uniform"
{extra}

[nce]
nu = 4
batch_size = 4
epochs = 3
theta_lr = 0.01
zeta_lr = 0.05
oracle_budget = 1000
"#
        );
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }
}

#[test]
fn train_trf_is_reproducible() {
    let f = Fixture::new();
    let a = f.config("a.toml", "run-a", "train.txt", "checkpoint_every = 1");
    let b = f.config("b.toml", "run-b", "train.txt", "checkpoint_every = 1");
    for cfg in [&a, &b] {
        let o = run(trf().arg("train-trf").arg("--config").arg(cfg));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["steps.csv", "epochs.csv", TRF_FILE] {
        assert_eq!(
            fs::read(f.path("run-a").join(file)).unwrap(),
            fs::read(f.path("run-b").join(file)).unwrap(),
            "{file} differs"
        );
    }
    for epoch in 1..=3 {
        assert!(commands::checkpoint_path(&f.path("run-a"), epoch).exists());
    }
    assert!(f.path("run-a").join(CHECKPOINT_DIR).is_dir());
}

#[test]
fn seed_override_changes_the_run() {
    let f = Fixture::new();
    let a = f.config("a.toml", "run-a", "train.txt", "");
    let o = run(trf().arg("train-trf").arg("--config").arg(&a));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(trf()
        .env("TRF_SEED", "6")
        .env("TRF_OUTPUT_DIR", f.path("run-env"))
        .arg("train-trf")
        .arg("--config")
        .arg(&a));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(
        fs::read(f.path("run-a").join("steps.csv")).unwrap(),
        fs::read(f.path("run-env").join("steps.csv")).unwrap()
    );
}

#[test]
fn missing_corpus_is_reported_before_training() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "run", "nope.txt", "");
    let o = run(trf().arg("train-trf").arg("--config").arg(&cfg));
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("corpus.train"), "{e}");
    assert!(!f.path("run").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "run", "train.txt", "temperature = 2");
    let o = run(trf().arg("train-trf").arg("--config").arg(&cfg));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("temperature"), "{}", stderr(&o));
}

#[test]
fn eval_agrees_with_enumeration_after_exact_zeta() {
    let f = Fixture::new();
    let cfg_path = f.config("c.toml", "run", "train.txt", "");
    let cfg = ExperimentConfig::load_with_env(&cfg_path, |_| None).unwrap();
    let mut model = commands::train_trf_cmd(&cfg).unwrap().model;
    model.set_zeta_exact(1_000).unwrap();
    let model_path = f.path("exact.json");
    model.save(&model_path).unwrap();
    let vocab = cfg.output_dir.join(VOCAB_FILE);
    let data = f.path("valid.txt");
    let stored = commands::eval_cmd(&model_path, &data, &vocab, TokenLevel::Char, None).unwrap();
    let exact =
        commands::eval_cmd(&model_path, &data, &vocab, TokenLevel::Char, Some(1_000)).unwrap();
    assert_eq!(stored.sequences, 3);
    assert!((stored.mean_nll - exact.mean_nll).abs() < 1e-9);

    let rows = commands::enumerate_z_cmd(&model_path, 1_000).unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        assert!((r.zeta - r.log_z).abs() < 1e-9);
    }
}

#[test]
fn eval_exact_z_over_budget_suggests_stored_normalizers() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "run", "train.txt", "");
    assert!(run(trf().arg("train-trf").arg("--config").arg(&cfg))
        .status
        .success());
    let out = f.path("run");
    let o = run(trf()
        .arg("eval")
        .arg("--model")
        .arg(out.join(TRF_FILE))
        .arg("--data")
        .arg(f.path("valid.txt"))
        .arg("--vocab")
        .arg(out.join(VOCAB_FILE))
        .args(["--level", "char", "--exact-z", "--budget", "2"]));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--exact-z"), "{}", stderr(&o));

    let o = run(trf()
        .arg("eval")
        .arg("--model")
        .arg(out.join(TRF_FILE))
        .arg("--data")
        .arg(f.path("valid.txt"))
        .arg("--vocab")
        .arg(out.join(VOCAB_FILE))
        .args(["--level", "char"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("sequences,mean_nll,normalizers"));
    assert!(csv.contains(",stored,"));
}

#[test]
fn eval_rejects_malformed_model() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    fs::write(&bad, "{\"format_version\": 1, \"potential\": ").unwrap();
    fs::write(f.path("vocab.txt"), "<s>\n</s>\n<unk>\na\n").unwrap();
    let o = run(trf()
        .arg("eval")
        .arg("--model")
        .arg(&bad)
        .arg("--data")
        .arg(f.path("valid.txt"))
        .arg("--vocab")
        .arg(f.path("vocab.txt")));
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn gradcheck_catches_an_injected_fault() {
    let ok = run(trf().args(["gradcheck", "--seed", "7", "--instances", "2"]));
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let bad = run(trf().args([
        "gradcheck",
        "--seed",
        "7",
        "--instances",
        "2",
        "--inject-fault",
        "0.01",
    ]));
    assert!(!bad.status.success());
}

fn write_rescore(dir: &Path, refs: &str, with_weight: bool, with_dev: bool) -> PathBuf {
    fs::write(dir.join("vocab.txt"), "<s>\n</s>\n<unk>\na\nb\n").unwrap();
    fs::write(dir.join("train.txt"), "a b\na a b\nb a\na b\n").unwrap();
    fs::write(
        dir.join("test.nbest"),
        "u1 1 -1.0 a b\nu1 2 -1.5 b b\nu2 1 -2.0 b a\nu2 2 -2.0 a a\n",
    )
    .unwrap();
    fs::write(dir.join("test.ref"), refs).unwrap();
    let exp = dir.join("exp.toml");
    fs::write(
        &exp,
        r#"seed = 1
output_dir = "lm"
[corpus]
train = "train.txt"
level = "word"
max_len = 6
[ngram]
order = 2
[potential]
embed_dim = 2
bank_width = 0
bank_channels = 0
stack_layers = 0
stack_channels = 0
lstm_hidden = 2
init_scale = 0.1
[trf]
reference = "uniform"
[nce]
nu = 1
batch_size = 2
epochs = 1
theta_lr = 0.01
zeta_lr = 0.01
"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load_with_env(&exp, |_| None).unwrap();
    commands::train_ngram_cmd(&cfg).unwrap();
    let weight = if with_weight { "weight = 1.0" } else { "" };
    let dev = if with_dev {
        "[dev]\nnbest = \"test.nbest\"\nreferences = \"test.ref\"\n"
    } else {
        ""
    };
    let p = dir.join("rescore.toml");
    fs::write(
        &p,
        format!(
            r#"vocab = "lm/vocab.txt"
level = "word"
output_dir = "rescored"

[[member]]
name = "kn"
kind = "ngram"
path = "lm/ngram.json"
{weight}

[test]
nbest = "test.nbest"
references = "test.ref"
{dev}"#
        ),
    )
    .unwrap();
    p
}

#[test]
fn rescore_single_member_matches_its_own_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_rescore(dir.path(), "u1 a b\nu2 b a\n", true, false);
    let o = run(trf().arg("rescore").arg("--config").arg(&p));
    assert!(o.status.success(), "{}", stderr(&o));
    let wer = fs::read_to_string(dir.path().join("rescored/wer.csv")).unwrap();
    let lines: Vec<&str> = wer.lines().collect();
    let kn = lines.iter().find(|l| l.starts_with("kn,")).unwrap();
    let combined = lines.iter().find(|l| l.starts_with("combined,")).unwrap();
    assert_eq!(
        kn.split_once(',').unwrap().1,
        combined.split_once(',').unwrap().1
    );
    let best = fs::read_to_string(dir.path().join("rescored/best.txt")).unwrap();
    assert_eq!(best.lines().count(), 2);
}

#[test]
fn rescore_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_rescore(dir.path(), "u1 a b\nu3 b a\n", true, false);
    let o = run(trf().arg("rescore").arg("--config").arg(&p));
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("u2") || e.contains("u3"), "{e}");
}

#[test]
fn rescore_refuses_weights_with_dev() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_rescore(dir.path(), "u1 a b\nu2 b a\n", true, true);
    let o = run(trf().arg("rescore").arg("--config").arg(&p));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("member[0].weight"), "{}", stderr(&o));
}

#[test]
fn extract_words_splits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("list.txt");
    fs::write(
        &input,
        "The cat sat on a mat, and the dog ran off to get it.\nzebra\n",
    )
    .unwrap();
    let o = run(trf()
        .arg("extract-words")
        .arg("--input")
        .arg(&input)
        .arg("--output-dir")
        .arg(dir.path().join("w"))
        .args(["--every", "4"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let words = fs::read_to_string(dir.path().join("w/words.txt")).unwrap();
    let train = fs::read_to_string(dir.path().join("w/train.txt")).unwrap();
    let valid = fs::read_to_string(dir.path().join("w/valid.txt")).unwrap();
    assert!(!words.contains("zebra"));
    assert_eq!(
        words.lines().count(),
        train.lines().count() + valid.lines().count()
    );
    assert_eq!(valid.lines().count(), words.lines().count() / 4);
}
