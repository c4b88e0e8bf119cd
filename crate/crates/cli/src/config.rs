//! TOML experiment and rescoring configurations.
//!
//! Relative paths are resolved against the directory of the config file and
//! must exist when the file is loaded. `TRF_SEED` and `TRF_OUTPUT_DIR`
//! override the seed and the output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trf_core::corpus::TokenLevel;
use trf_core::nce::NceConfig;
use trf_core::optim::{OptimizerKind, Schedule};
use trf_core::seqnet::PotentialConfig;

use crate::error::{CliError, Result};

pub const SEED_VAR: &str = "TRF_SEED";
pub const OUTPUT_DIR_VAR: &str = "TRF_OUTPUT_DIR";

fn default_one() -> usize {
    1
}

fn default_order() -> usize {
    2
}

fn default_init_scale() -> f64 {
    0.1
}

fn default_adam() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub ngram: NgramSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lstm: Option<LstmSection>,
    pub potential: PotentialSection,
    #[serde(default)]
    pub trf: TrfSection,
    pub nce: NceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub level: TokenLevel,
    /// Maximum sequence length, boundary symbols included.
    pub max_len: usize,
    #[serde(default = "default_one")]
    pub min_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_vocab: Option<usize>,
}

/// Order of the n-gram written by `train-ngram` and of the noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgramSection {
    #[serde(default = "default_order")]
    pub order: usize,
}

impl Default for NgramSection {
    fn default() -> Self {
        Self {
            order: default_order(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmSection {
    pub embed_dim: usize,
    pub hidden: usize,
    #[serde(default = "default_one")]
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_adam")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

/// Potential network dimensions; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    pub embed_dim: usize,
    #[serde(default)]
    pub bank_width: usize,
    #[serde(default)]
    pub bank_channels: usize,
    #[serde(default)]
    pub stack_layers: usize,
    #[serde(default)]
    pub stack_channels: usize,
    pub lstm_hidden: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl PotentialSection {
    pub fn to_config(&self, vocab_size: usize) -> PotentialConfig {
        PotentialConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            bank_width: self.bank_width,
            bank_channels: self.bank_channels,
            stack_layers: self.stack_layers,
            stack_channels: self.stack_channels,
            lstm_hidden: self.lstm_hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    #[default]
    Uniform,
    Ngram,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrfSection {
    #[serde(default)]
    pub reference: ReferenceKind,
    /// Saved n-gram or LSTM model for the `ngram` and `lstm` references.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_model: Option<PathBuf>,
    /// Save the model every this many epochs under `checkpoints/`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(key: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::key(key, format!("no such file: {}", p.display())))
    }
}

fn env_overrides<F>(env: &F, seed: Option<&mut u64>, output_dir: &mut PathBuf) -> Result<()>
where
    F: Fn(&str) -> Option<String>,
{
    if let (Some(seed), Some(v)) = (seed, env(SEED_VAR)) {
        *seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::key(SEED_VAR, format!("not an unsigned integer: {v:?}")))?;
    }
    if let Some(v) = env(OUTPUT_DIR_VAR) {
        *output_dir = PathBuf::from(v);
    }
    Ok(())
}

fn base_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn system_env(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_env(path, system_env)
    }

    pub fn load_with_env<F>(path: &Path, env: F) -> Result<Self>
    where
        F: Fn(&str) -> Option<String>,
    {
        let text = read_config_text(path)?;
        Self::from_toml(&text, path, env)
    }

    /// Parses `text` as if read from `path`.
    pub fn from_toml<F>(text: &str, path: &Path, env: F) -> Result<Self>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut cfg: Self = parse_toml(text, path)?;
        env_overrides(&env, Some(&mut cfg.seed), &mut cfg.output_dir)?;
        let base = base_dir(path);
        resolve(&base, &mut cfg.output_dir);
        resolve(&base, &mut cfg.corpus.train);
        if let Some(p) = cfg.corpus.valid.as_mut() {
            resolve(&base, p);
        }
        if let Some(p) = cfg.trf.reference_model.as_mut() {
            resolve(&base, p);
        }
        cfg.nce.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        require_file("corpus.train", &self.corpus.train)?;
        if let Some(p) = &self.corpus.valid {
            require_file("corpus.valid", p)?;
        }
        if self.corpus.max_len < 3 {
            return Err(CliError::key(
                "corpus.max_len",
                "must be at least 3 (two boundary symbols and one token)",
            ));
        }
        if self.ngram.order < 1 {
            return Err(CliError::key("ngram.order", "must be at least 1"));
        }
        if let Some(l) = &self.lstm {
            if l.embed_dim == 0 || l.hidden == 0 || l.layers == 0 {
                return Err(CliError::key(
                    "lstm",
                    "embed_dim, hidden and layers must be positive",
                ));
            }
            if l.batch_size == 0 {
                return Err(CliError::key("lstm.batch_size", "must be positive"));
            }
            if !(l.learning_rate > 0.0 && l.learning_rate.is_finite()) {
                return Err(CliError::key("lstm.learning_rate", "must be positive"));
            }
        }
        if !(self.potential.init_scale > 0.0 && self.potential.init_scale.is_finite()) {
            return Err(CliError::key("potential.init_scale", "must be positive"));
        }
        self.potential
            .to_config(trf_core::corpus::RESERVED + 1)
            .validate()
            .map_err(|e| CliError::key("potential", e.to_string()))?;
        match (self.trf.reference, &self.trf.reference_model) {
            (ReferenceKind::Uniform, Some(_)) => {
                return Err(CliError::key(
                    "trf.reference_model",
                    "only used with the ngram and lstm references",
                ))
            }
            (ReferenceKind::Uniform, None) => {}
            (_, None) => {
                return Err(CliError::key(
                    "trf.reference_model",
                    "required for the ngram and lstm references",
                ))
            }
            (_, Some(p)) => require_file("trf.reference_model", p)?,
        }
        if self.trf.checkpoint_every == Some(0) {
            return Err(CliError::key("trf.checkpoint_every", "must be positive"));
        }
        self.nce
            .validate()
            .map_err(|e| CliError::key("nce", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::key("config", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemberKind {
    Ngram,
    Lstm,
    Trf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub name: String,
    pub kind: MemberKind,
    pub path: PathBuf,
    /// Fixed weight; required when there is no `[dev]` set to tune on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestSpec {
    pub nbest: PathBuf,
    pub references: PathBuf,
}

fn default_acoustic_weight() -> f64 {
    1.0
}

fn default_grid_steps() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescoreConfig {
    pub vocab: PathBuf,
    #[serde(default)]
    pub level: TokenLevel,
    #[serde(default = "default_acoustic_weight")]
    pub acoustic_weight: f64,
    /// LM weights are tuned on the simplex with spacing `1 / grid_steps`.
    #[serde(default = "default_grid_steps")]
    pub grid_steps: usize,
    pub output_dir: PathBuf,
    #[serde(rename = "member")]
    pub members: Vec<MemberSpec>,
    pub test: NBestSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<NBestSpec>,
}

impl RescoreConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_env(path, system_env)
    }

    pub fn load_with_env<F>(path: &Path, env: F) -> Result<Self>
    where
        F: Fn(&str) -> Option<String>,
    {
        let text = read_config_text(path)?;
        Self::from_toml(&text, path, env)
    }

    pub fn from_toml<F>(text: &str, path: &Path, env: F) -> Result<Self>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut cfg: Self = parse_toml(text, path)?;
        env_overrides(&env, None, &mut cfg.output_dir)?;
        let base = base_dir(path);
        resolve(&base, &mut cfg.output_dir);
        resolve(&base, &mut cfg.vocab);
        for m in &mut cfg.members {
            resolve(&base, &mut m.path);
        }
        for spec in std::iter::once(&mut cfg.test).chain(cfg.dev.as_mut()) {
            resolve(&base, &mut spec.nbest);
            resolve(&base, &mut spec.references);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        require_file("vocab", &self.vocab)?;
        if self.members.is_empty() {
            return Err(CliError::key(
                "member",
                "at least one [[member]] is required",
            ));
        }
        let mut names = BTreeSet::new();
        for (i, m) in self.members.iter().enumerate() {
            if !names.insert(m.name.as_str()) {
                return Err(CliError::key(
                    format!("member[{i}].name"),
                    format!("duplicate name {:?}", m.name),
                ));
            }
            require_file(&format!("member[{i}].path"), &m.path)?;
            match m.weight {
                Some(w) if !w.is_finite() => {
                    return Err(CliError::key(
                        format!("member[{i}].weight"),
                        "must be finite",
                    ))
                }
                None if self.dev.is_none() => {
                    return Err(CliError::key(
                        format!("member[{i}].weight"),
                        "required when no [dev] set is given for tuning",
                    ))
                }
                _ => {}
            }
        }
        if !self.acoustic_weight.is_finite() {
            return Err(CliError::key("acoustic_weight", "must be finite"));
        }
        if self.grid_steps == 0 {
            return Err(CliError::key("grid_steps", "must be positive"));
        }
        require_file("test.nbest", &self.test.nbest)?;
        require_file("test.references", &self.test.references)?;
        if let Some(d) = &self.dev {
            require_file("dev.nbest", &d.nbest)?;
            require_file("dev.references", &d.references)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::key("config", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    fn fixture() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.txt"), "ab\nba\n").unwrap();
        let cfg = dir.path().join("exp.toml");
        (dir, cfg)
    }

    const MINIMAL: &str = r#"
seed = 3
output_dir = "out"

[corpus]
train = "train.txt"
level = "char"
max_len = 4

[potential]
embed_dim = 2
lstm_hidden = 2

[nce]
nu = 2
batch_size = 2
epochs = 1
theta_lr = 0.001
zeta_lr = 0.01
"#;

    #[test]
    fn paths_resolve_against_config_dir() {
        let (dir, path) = fixture();
        let cfg = ExperimentConfig::from_toml(MINIMAL, &path, no_env).unwrap();
        assert_eq!(cfg.corpus.train, dir.path().join("train.txt"));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.nce.seed, 3);
        assert_eq!(cfg.ngram.order, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let (_dir, path) = fixture();
        let text = MINIMAL.replace("epochs = 1", "epochs = 1\nmomentum = 0.9");
        let err = ExperimentConfig::from_toml(&text, &path, no_env)
            .unwrap_err()
            .to_string();
        assert!(err.contains("momentum"), "{err}");
    }

    #[test]
    fn missing_corpus_is_a_clean_error() {
        let (_dir, path) = fixture();
        let text = MINIMAL.replace("train.txt", "absent.txt");
        let err = ExperimentConfig::from_toml(&text, &path, no_env)
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("corpus.train"), "{err}");
    }

    #[test]
    fn env_overrides_seed_and_output() {
        let (dir, path) = fixture();
        let env = |k: &str| match k {
            SEED_VAR => Some("11".to_string()),
            OUTPUT_DIR_VAR => Some("elsewhere".to_string()),
            _ => None,
        };
        let cfg = ExperimentConfig::from_toml(MINIMAL, &path, env).unwrap();
        assert_eq!((cfg.seed, cfg.nce.seed), (11, 11));
        assert_eq!(cfg.output_dir, dir.path().join("elsewhere"));
        let bad = |k: &str| (k == SEED_VAR).then(|| "x".to_string());
        let err = ExperimentConfig::from_toml(MINIMAL, &path, bad)
            .unwrap_err()
            .to_string();
        assert!(err.starts_with(SEED_VAR), "{err}");
    }

    #[test]
    fn reference_model_must_match_kind() {
        let (_dir, path) = fixture();
        let text = format!("{MINIMAL}\n[trf]\nreference = \"ngram\"\n");
        let err = ExperimentConfig::from_toml(&text, &path, no_env)
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("trf.reference_model"), "{err}");
    }

    #[test]
    fn round_trip_is_idempotent() {
        let (_dir, path) = fixture();
        let cfg = ExperimentConfig::from_toml(MINIMAL, &path, no_env).unwrap();
        let once = cfg.to_toml().unwrap();
        let again = ExperimentConfig::from_toml(&once, &path, no_env).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), once);
    }
}
