//! The subcommands, as library functions returning their results. Every
//! artifact is written atomically into the configured output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trf_core::corpus::{
    build_vocabulary, empirical_length_prior, extract_short_words, read_lines, split_train_valid,
    Sequence, TokenLevel, Vocabulary,
};
use trf_core::evalkit::{
    tune_weights, wer_report_csv, CombinedScorer, CorpusWer, LanguageModel, NBestList,
    RankedUtterance, References, ScoreTable,
};
use trf_core::gradcheck::{check_instance, random_instance, SuiteReport};
use trf_core::nce::{train_with_hook, TrainLog};
use trf_core::ngram::{train_ngram, NGramModel};
use trf_core::noise::NoiseDistribution;
use trf_core::seqnet::{
    train_lstm_lm, LstmEpoch, LstmLmConfig, LstmLmParams, LstmTrainConfig, PotentialParams,
};
use trf_core::trf::{Reference, TrfModel, ZetaSource};
use trf_core::util::{derive_seed, write_atomic};

use crate::config::{ExperimentConfig, MemberKind, ReferenceKind, RescoreConfig};
use crate::error::{CliError, Result};

/// Seed streams derived from the experiment seed.
const STREAM_POTENTIAL_INIT: u64 = 10;
const STREAM_LSTM_INIT: u64 = 11;
const STREAM_LSTM_TRAIN: u64 = 12;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const NGRAM_FILE: &str = "ngram.json";
pub const ARPA_FILE: &str = "ngram.arpa";
pub const NGRAM_METRICS_FILE: &str = "ngram_metrics.csv";
pub const LSTM_FILE: &str = "lstm.json";
pub const LSTM_METRICS_FILE: &str = "lstm_epochs.csv";
pub const TRF_FILE: &str = "trf.json";
pub const CONFIG_COPY_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_FILE: &str = "best.txt";
pub const WER_FILE: &str = "wer.csv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(CliError::from)
}

/// Vocabulary and encoded splits of an experiment's corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<Sequence>,
    pub valid: Option<Vec<Sequence>>,
}

fn read_corpus_lines(key: &str, path: &Path) -> Result<Vec<String>> {
    read_lines(path).map_err(|e| CliError::key(key, format!("{}: {e}", path.display())))
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let c = &cfg.corpus;
    let train_lines = read_corpus_lines("corpus.train", &c.train)?;
    let vocab = build_vocabulary(
        train_lines.iter().map(String::as_str),
        c.level,
        c.min_count,
        c.max_vocab,
    )?;
    let train = vocab
        .encode_all(train_lines.iter().map(String::as_str), c.level, c.max_len)
        .map_err(|e| CliError::key("corpus.train", e.to_string()))?;
    let valid = match &c.valid {
        Some(p) => {
            let lines = read_corpus_lines("corpus.valid", p)?;
            Some(
                vocab
                    .encode_all(lines.iter().map(String::as_str), c.level, c.max_len)
                    .map_err(|e| CliError::key("corpus.valid", e.to_string()))?,
            )
        }
        None => None,
    };
    Ok(Corpus {
        vocab,
        train,
        valid,
    })
}

fn prepare_output(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|source| CliError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    write_text(&cfg.output_dir.join(VOCAB_FILE), &corpus.vocab.to_text())?;
    write_text(&cfg.output_dir.join(CONFIG_COPY_FILE), &cfg.to_toml()?)
}

fn mean_sentence_nll(model: &NGramModel, data: &[Sequence]) -> f64 {
    data.iter().map(|x| -model.logprob_sentence(x)).sum::<f64>() / data.len() as f64
}

#[derive(Debug, Clone)]
pub struct NgramRun {
    pub model: NGramModel,
    pub train_nll: f64,
    pub valid_nll: Option<f64>,
}

/// Kneser-Ney n-gram of `ngram.order` on the training split; writes the
/// model as JSON and ARPA plus per-split mean sentence NLL.
pub fn train_ngram_cmd(cfg: &ExperimentConfig) -> Result<NgramRun> {
    let corpus = load_corpus(cfg)?;
    prepare_output(cfg, &corpus)?;
    let model = train_ngram(&corpus.train, cfg.ngram.order, corpus.vocab.len())?;
    let train_nll = mean_sentence_nll(&model, &corpus.train);
    let valid_nll = corpus.valid.as_ref().map(|v| mean_sentence_nll(&model, v));
    model.save(&cfg.output_dir.join(NGRAM_FILE))?;
    let mut arpa = Vec::new();
    model.write_arpa(&mut arpa, corpus.vocab.symbols())?;
    write_atomic(&cfg.output_dir.join(ARPA_FILE), &arpa)?;
    let mut csv = String::from("split,sentences,mean_nll\n");
    let _ = writeln!(csv, "train,{},{}", corpus.train.len(), train_nll);
    if let (Some(v), Some(nll)) = (&corpus.valid, valid_nll) {
        let _ = writeln!(csv, "valid,{},{}", v.len(), nll);
    }
    write_text(&cfg.output_dir.join(NGRAM_METRICS_FILE), &csv)?;
    Ok(NgramRun {
        model,
        train_nll,
        valid_nll,
    })
}

#[derive(Debug, Clone)]
pub struct LstmRun {
    pub params: LstmLmParams,
    pub epochs: Vec<LstmEpoch>,
}

pub fn lstm_epochs_csv(epochs: &[LstmEpoch]) -> String {
    let mut s = String::from("epoch,train_nll,valid_nll\n");
    for e in epochs {
        let valid = e.valid_nll.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_nll, valid);
    }
    s
}

pub fn train_lstm_cmd(cfg: &ExperimentConfig) -> Result<LstmRun> {
    let section = cfg
        .lstm
        .as_ref()
        .ok_or_else(|| CliError::key("lstm", "section is required by train-lstm"))?;
    let corpus = load_corpus(cfg)?;
    prepare_output(cfg, &corpus)?;
    let model_cfg = LstmLmConfig {
        vocab_size: corpus.vocab.len(),
        embed_dim: section.embed_dim,
        hidden: section.hidden,
        layers: section.layers,
        max_len: cfg.corpus.max_len,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_LSTM_INIT));
    let mut params = LstmLmParams::init(model_cfg, section.init_scale, &mut rng)?;
    let train_cfg = LstmTrainConfig {
        epochs: section.epochs,
        batch_size: section.batch_size,
        learning_rate: section.learning_rate,
        optimizer: section.optimizer,
        schedule: section.schedule,
        seed: derive_seed(cfg.seed, STREAM_LSTM_TRAIN),
    };
    let epochs = train_lstm_lm(
        &mut params,
        &corpus.train,
        corpus.valid.as_deref(),
        &train_cfg,
    )?;
    params.save(&cfg.output_dir.join(LSTM_FILE))?;
    write_text(
        &cfg.output_dir.join(LSTM_METRICS_FILE),
        &lstm_epochs_csv(&epochs),
    )?;
    Ok(LstmRun { params, epochs })
}

fn build_reference(cfg: &ExperimentConfig, vocab_size: usize) -> Result<Reference> {
    let path = cfg.trf.reference_model.as_deref();
    let reference = match (cfg.trf.reference, path) {
        (ReferenceKind::Uniform, _) => Reference::Uniform { vocab_size },
        (ReferenceKind::Ngram, Some(p)) => Reference::NGram(Arc::new(NGramModel::load(p)?)),
        (ReferenceKind::Lstm, Some(p)) => Reference::Lstm(Arc::new(LstmLmParams::load(p)?)),
        (_, None) => return Err(CliError::key("trf.reference_model", "missing")),
    };
    if reference.vocab_size() != vocab_size {
        return Err(CliError::key(
            "trf.reference_model",
            format!(
                "model covers {} symbols but the corpus vocabulary has {vocab_size}",
                reference.vocab_size()
            ),
        ));
    }
    Ok(reference)
}

#[derive(Debug, Clone)]
pub struct TrfRun {
    pub model: TrfModel,
    pub log: TrainLog,
}

pub fn checkpoint_path(output_dir: &Path, epoch: usize) -> PathBuf {
    output_dir
        .join(CHECKPOINT_DIR)
        .join(format!("epoch-{epoch:03}.json"))
}

/// NCE training of a TRF with the empirical length prior and an n-gram
/// noise model of `ngram.order`. Writes `steps.csv`, `epochs.csv` and the
/// model bundle.
pub fn train_trf_cmd(cfg: &ExperimentConfig) -> Result<TrfRun> {
    let corpus = load_corpus(cfg)?;
    prepare_output(cfg, &corpus)?;
    let v = corpus.vocab.len();
    let max_len = cfg.corpus.max_len;
    let prior = empirical_length_prior(&corpus.train, max_len)?;
    let base = Arc::new(train_ngram(&corpus.train, cfg.ngram.order, v)?);
    let noise = Arc::new(NoiseDistribution::new(prior.clone(), base)?);
    let reference = build_reference(cfg, v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_POTENTIAL_INIT));
    let potential = PotentialParams::init_with_scale(
        cfg.potential.to_config(v),
        cfg.potential.init_scale,
        &mut rng,
    )?;
    let mut model = TrfModel::new(potential, vec![0.0; max_len], prior, reference)?;
    let every = cfg.trf.checkpoint_every;
    let out = cfg.output_dir.clone();
    let log = train_with_hook(
        &mut model,
        &noise,
        &corpus.train,
        corpus.valid.as_deref(),
        &cfg.nce,
        |m, record| match every {
            Some(k) if record.epoch % k == 0 => {
                std::fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
                m.save(&checkpoint_path(&out, record.epoch))
            }
            _ => Ok(()),
        },
    )?;
    log.write_csv(&cfg.output_dir)?;
    model.save(&cfg.output_dir.join(TRF_FILE))?;
    Ok(TrfRun { model, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sequences: usize,
    pub mean_nll: f64,
    pub zero_prior_lengths: Vec<usize>,
    pub exact: bool,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let lens: Vec<String> = self
            .zero_prior_lengths
            .iter()
            .map(usize::to_string)
            .collect();
        format!(
            "sequences,mean_nll,normalizers,zero_prior_lengths\n{},{},{},{}\n",
            self.sequences,
            self.mean_nll,
            if self.exact { "exact" } else { "stored" },
            lens.join(" ")
        )
    }
}

/// Mean NLL of the lines of `data` under a saved TRF, with the stored `zeta`
/// or, with `exact_budget`, enumerated normalizers.
pub fn eval_cmd(
    model_path: &Path,
    data_path: &Path,
    vocab_path: &Path,
    level: TokenLevel,
    exact_budget: Option<u128>,
) -> Result<EvalReport> {
    let model = TrfModel::load(model_path)?;
    let vocab = Vocabulary::load(vocab_path)?;
    if vocab.len() != model.vocab_size() {
        return Err(CliError::key(
            "vocab",
            format!(
                "{} symbols, model expects {}",
                vocab.len(),
                model.vocab_size()
            ),
        ));
    }
    let lines = read_corpus_lines("data", data_path)?;
    let data = vocab.encode_all(lines.iter().map(String::as_str), level, model.max_len())?;
    let source = match exact_budget {
        Some(budget) => ZetaSource::Exact { budget },
        None => ZetaSource::Stored,
    };
    let report = model.nll(&data, source).map_err(|e| match e {
        e @ trf_core::Error::EnumerationBudget { .. } => CliError::OracleBudget(e),
        e => CliError::Core(e),
    })?;
    Ok(EvalReport {
        sequences: data.len(),
        mean_nll: report.mean,
        zero_prior_lengths: report.zero_prior_lengths,
        exact: exact_budget.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZRow {
    pub len: usize,
    pub prior: f64,
    pub zeta: f64,
    pub log_z: f64,
}

/// Enumerated `log Z_l` of every length with nonzero prior.
pub fn enumerate_z_cmd(model_path: &Path, budget: u128) -> Result<Vec<ZRow>> {
    let model = TrfModel::load(model_path)?;
    let log_z = model.exact_log_z_support(budget)?;
    Ok(log_z
        .into_iter()
        .map(|(len, log_z)| ZRow {
            len,
            prior: model.length_prior.prob(len),
            zeta: model.zeta(len),
            log_z,
        })
        .collect())
}

pub fn z_rows_csv(rows: &[ZRow]) -> String {
    let mut s = String::from("len,prior,zeta,log_z,gap\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.len,
            r.prior,
            r.zeta,
            r.log_z,
            r.zeta - r.log_z
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct RescoreReport {
    /// Per-member rows (that member alone), then `acoustic` and `combined`.
    pub rows: Vec<(String, Vec<f64>, CorpusWer)>,
    pub weights: Vec<f64>,
    pub ranked: Vec<RankedUtterance>,
}

impl RescoreReport {
    pub fn combined(&self) -> &CorpusWer {
        &self.rows.last().expect("combined row").2
    }

    pub fn single(&self, name: &str) -> Option<&CorpusWer> {
        self.rows
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, w)| w)
    }

    pub fn best_text(&self) -> String {
        let mut s = String::new();
        for r in &self.ranked {
            let _ = writeln!(s, "{} {}", r.id, r.best().text);
        }
        s
    }
}

fn load_member(kind: MemberKind, path: &Path) -> Result<LanguageModel> {
    Ok(match kind {
        MemberKind::Ngram => LanguageModel::NGram(Arc::new(NGramModel::load(path)?)),
        MemberKind::Lstm => LanguageModel::Lstm(Arc::new(LstmLmParams::load(path)?)),
        MemberKind::Trf => LanguageModel::Trf(Arc::new(TrfModel::load(path)?)),
    })
}

fn load_split(nbest: &Path, references: &Path) -> Result<(NBestList, References)> {
    let n = NBestList::load(nbest)?;
    let r = References::load(references)?;
    r.check_ids(&n)?;
    Ok((n, r))
}

/// Rescores the test N-best list with each member alone and with the
/// log-linear combination, whose LM weights are tuned on `[dev]` when given.
pub fn rescore_cmd(cfg: &RescoreConfig) -> Result<RescoreReport> {
    let vocab = Arc::new(Vocabulary::load(&cfg.vocab)?);
    if cfg.dev.is_some() {
        if let Some(i) = cfg.members.iter().position(|m| m.weight.is_some()) {
            return Err(CliError::key(
                format!("member[{i}].weight"),
                "weights are tuned on [dev]; remove the weight or the [dev] section",
            ));
        }
    }
    let members = cfg
        .members
        .iter()
        .map(|m| {
            Ok((
                m.name.clone(),
                load_member(m.kind, &m.path)?,
                m.weight.unwrap_or(1.0),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let scorer = CombinedScorer::new(members, cfg.acoustic_weight, vocab, cfg.level)?;
    let (test_nbest, test_refs) = load_split(&cfg.test.nbest, &cfg.test.references)?;
    let weights = match &cfg.dev {
        Some(d) => {
            let (dev_nbest, dev_refs) = load_split(&d.nbest, &d.references)?;
            let dev_table = ScoreTable::build(&scorer, &dev_nbest)?;
            tune_weights(&dev_table, &dev_refs, cfg.acoustic_weight, cfg.grid_steps)?.0
        }
        None => scorer.weights(),
    };
    let table = ScoreTable::build(&scorer, &test_nbest)?;
    let k = scorer.members.len();
    let mut rows = Vec::with_capacity(k + 2);
    for (i, name) in table.member_names.iter().enumerate() {
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        let r = table.wer(&w, cfg.acoustic_weight, &test_refs)?;
        rows.push((name.clone(), w, r));
    }
    let zero = vec![0.0; k];
    rows.push((
        "acoustic".to_string(),
        zero.clone(),
        table.wer(&zero, cfg.acoustic_weight, &test_refs)?,
    ));
    let combined = table.wer(&weights, cfg.acoustic_weight, &test_refs)?;
    rows.push(("combined".to_string(), weights.clone(), combined));
    let ranked = table.rank_all(&weights, cfg.acoustic_weight);
    let report = RescoreReport {
        rows,
        weights,
        ranked,
    };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|source| CliError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    write_text(&cfg.output_dir.join(BEST_FILE), &report.best_text())?;
    write_text(
        &cfg.output_dir.join(WER_FILE),
        &wer_report_csv(&report.rows),
    )?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub theta_threshold: f64,
    pub zeta_threshold: f64,
    /// Relative corruption applied to the analytic gradients.
    pub fault: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            theta_threshold: 1e-5,
            zeta_threshold: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub report: SuiteReport,
    pub passed: bool,
}

impl GradcheckOutcome {
    /// `Err` naming the worst block when the check failed.
    pub fn into_result(self) -> Result<SuiteReport> {
        if self.passed {
            return Ok(self.report);
        }
        let (check, block) = self.report.worst().expect("a failed check has blocks");
        Err(CliError::GradCheckFailed {
            check: check.to_string(),
            block: block.block.clone(),
            rel_error: block.rel_error,
        })
    }
}

/// Finite-difference checks on seeded random instances. With a config, the
/// potential architecture and vocabulary size come from it.
pub fn gradcheck_cmd(
    cfg: Option<&ExperimentConfig>,
    opts: &GradcheckOptions,
) -> Result<GradcheckOutcome> {
    let arch = match cfg {
        Some(c) => {
            let corpus = load_corpus(c)?;
            Some(c.potential.to_config(corpus.vocab.len()))
        }
        None => None,
    };
    let mut report = SuiteReport::default();
    for i in 0..opts.instances {
        let inst = random_instance(derive_seed(opts.seed, i as u64), arch.clone())?;
        report.merge(check_instance(&inst, opts.fault)?);
    }
    let passed = report.passes(opts.theta_threshold, opts.zeta_threshold);
    Ok(GradcheckOutcome { report, passed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordSplit {
    pub words: Vec<String>,
    pub train: Vec<String>,
    pub valid: Vec<String>,
}

/// Short-word extraction from any word list: lower-cased alphabetic words of
/// at most `max_chars` characters, deduplicated, sorted and split so that
/// every `every`-th word is held out.
pub fn extract_words_cmd(
    input: &Path,
    output_dir: &Path,
    max_chars: usize,
    every: usize,
) -> Result<WordSplit> {
    let text = std::fs::read_to_string(input).map_err(|source| CliError::Io {
        path: input.to_path_buf(),
        source,
    })?;
    let words = extract_short_words(&text, max_chars);
    if words.is_empty() {
        return Err(CliError::key(
            "input",
            format!("no words of at most {max_chars} letters"),
        ));
    }
    let (train, valid) = split_train_valid(&words, every);
    let lines = |ws: &[String]| ws.iter().map(|w| format!("{w}\n")).collect::<String>();
    write_text(&output_dir.join("words.txt"), &lines(&words))?;
    write_text(&output_dir.join("train.txt"), &lines(&train))?;
    write_text(&output_dir.join("valid.txt"), &lines(&valid))?;
    Ok(WordSplit {
        words,
        train,
        valid,
    })
}

/// Final-epoch numbers of a TRF run, keyed by column name.
pub fn summary(log: &TrainLog) -> BTreeMap<&'static str, f64> {
    let mut m = BTreeMap::new();
    if let Some(e) = log.epochs.last() {
        m.insert("train_nll", e.train_nll);
        if let Some(v) = e.valid_nll {
            m.insert("valid_nll", v);
        }
        if let Some(g) = e.zeta_gap {
            m.insert("zeta_gap", g);
        }
    }
    m
}
