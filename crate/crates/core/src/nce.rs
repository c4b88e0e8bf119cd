//! Noise-contrastive estimation of the potential parameters and the
//! per-length log-normalizers.
//!
//! With `z = log p(l, x) - log nu - log p_n(l, x)` and `P0 = sigmoid(z)`, the
//! objective over a data batch `D` and a noise batch `B` (`|B| = nu |D|`) is
//!
//! ```text
//! J = 1/|D| sum_D log P0 + nu/|B| sum_B log (1 - P0)
//! ```
//!
//! Training ascends `J`; internally the optimizers descend on `-J`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Sequence;
use crate::error::{Error, Result};
use crate::noise::{NoiseBatch, NoiseDistribution, NoiseMode, NoiseStream};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::seqnet::{ParamSet, PotentialCache, PotentialParams};
use crate::trf::TrfModel;
use crate::util::{derive_seed, log_sigmoid, sigmoid, write_atomic};

/// Sequences per work unit in the gradient fan-out. Partial sums are reduced
/// in unit order, so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Initial values of the log-normalizers. `n = l - 2` is the payload length.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum ZetaInit {
    /// `n log V` on the counting measure, shifted by `-n log(V - 2)` into the
    /// normalized-reference convention.
    #[default]
    LogVocab,
    /// `zeta_l = n`.
    Length,
    Zero,
    Constant(f64),
    /// Leave the model's values alone.
    Keep,
}

impl ZetaInit {
    pub fn apply(&self, model: &mut TrfModel) {
        let v = model.vocab_size() as f64;
        for (i, z) in model.zeta.iter_mut().enumerate() {
            let n = (i + 1).saturating_sub(2) as f64;
            *z = match self {
                ZetaInit::LogVocab => n * (v.ln() - (v - 2.0).ln()),
                ZetaInit::Length => n,
                ZetaInit::Zero => 0.0,
                ZetaInit::Constant(c) => *c,
                ZetaInit::Keep => *z,
            };
        }
    }
}

fn default_adam() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NceConfig {
    pub nu: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Set by the caller, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub theta_lr: f64,
    pub zeta_lr: f64,
    #[serde(default = "default_adam")]
    pub theta_optimizer: OptimizerKind,
    #[serde(default = "default_adam")]
    pub zeta_optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub zeta_init: ZetaInit,
    #[serde(default)]
    pub noise: NoiseMode,
    /// Enumeration budget for the per-epoch exact NLL and zeta gap; `None`
    /// skips them.
    #[serde(default)]
    pub oracle_budget: Option<u64>,
}

impl NceConfig {
    /// Fixed-rate Adam with the given ratio and seed.
    pub fn new(nu: usize, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            nu,
            batch_size,
            epochs,
            seed,
            theta_lr: 0.001,
            zeta_lr: 0.01,
            theta_optimizer: OptimizerKind::Adam,
            zeta_optimizer: OptimizerKind::Adam,
            schedule: Schedule::Constant,
            zeta_init: ZetaInit::LogVocab,
            noise: NoiseMode::Strict,
            oracle_budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu < 1 {
            return Err(Error::Config("nu must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (key, lr) in [("theta_lr", self.theta_lr), ("zeta_lr", self.zeta_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NceStepStats {
    pub objective: f64,
    /// Mean `P(C = 0 | l, x)` over the data batch.
    pub posterior_data: f64,
    /// Mean `P(C = 0 | l, x)` over the noise batch.
    pub posterior_noise: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_zeta: f64,
}

/// Model log-density, plus the forward cache when it is finite.
fn model_logprob(
    model: &TrfModel,
    x: &Sequence,
    keep_cache: bool,
) -> Result<(f64, Option<PotentialCache>)> {
    x.check(model.vocab_size(), model.max_len())?;
    let l = x.len();
    let pi = model.length_prior.prob(l);
    let lq = model.reference.log_prob(x);
    if pi == 0.0 || lq == f64::NEG_INFINITY {
        return Ok((f64::NEG_INFINITY, None));
    }
    let (phi, cache) = model.potential.forward(x)?;
    let lp = pi.ln() + lq + phi - model.zeta(l);
    Ok((lp, keep_cache.then_some(cache)))
}

fn logit(log_p: f64, log_pn: f64, nu: usize) -> Result<f64> {
    if log_p == f64::NEG_INFINITY && log_pn == f64::NEG_INFINITY {
        return Err(Error::ImpossibleSequence);
    }
    Ok(log_p - (nu as f64).ln() - log_pn)
}

/// `P(C = 0 | l, x) = p / (p + nu p_n)`, evaluated in the log domain.
pub fn posterior_data(
    model: &TrfModel,
    nd: &NoiseDistribution,
    x: &Sequence,
    nu: usize,
) -> Result<f64> {
    let (lp, _) = model_logprob(model, x, false)?;
    Ok(sigmoid(logit(lp, nd.noise_logprob(x), nu)?))
}

struct Item<'a> {
    x: &'a Sequence,
    log_pn: f64,
    is_data: bool,
}

fn items<'a>(
    nd: &NoiseDistribution,
    data: &'a [Sequence],
    noise: &'a NoiseBatch,
) -> Result<Vec<Item<'a>>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if noise.len() != noise.nu * data.len() || noise.log_pn.len() != noise.len() {
        return Err(Error::Shape(format!(
            "{} noise sequences for {} data sequences at nu = {}",
            noise.len(),
            data.len(),
            noise.nu
        )));
    }
    let mut out: Vec<Item> = data
        .iter()
        .map(|x| Item {
            x,
            log_pn: nd.noise_logprob(x),
            is_data: true,
        })
        .collect();
    out.extend(
        noise
            .sequences
            .iter()
            .zip(&noise.log_pn)
            .map(|(x, &log_pn)| Item {
                x,
                log_pn,
                is_data: false,
            }),
    );
    Ok(out)
}

/// Eq. 7 for one mini-batch.
pub fn nce_objective(
    model: &TrfModel,
    nd: &NoiseDistribution,
    data: &[Sequence],
    noise: &NoiseBatch,
) -> Result<f64> {
    let items = items(nd, data, noise)?;
    let terms = items
        .par_iter()
        .map(|it| {
            let (lp, _) = model_logprob(model, it.x, false)?;
            let z = logit(lp, it.log_pn, noise.nu)?;
            Ok(if it.is_data {
                log_sigmoid(z)
            } else {
                log_sigmoid(-z)
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>() / data.len() as f64)
}

struct Partial {
    grad: PotentialParams,
    grad_zeta: Vec<f64>,
    objective: f64,
    posterior_data: f64,
    posterior_noise: f64,
}

/// Gradients of `J` (ascent direction) with respect to the potential
/// parameters and to `zeta`, plus batch statistics.
pub fn nce_gradients(
    model: &TrfModel,
    nd: &NoiseDistribution,
    data: &[Sequence],
    noise: &NoiseBatch,
) -> Result<(PotentialParams, Vec<f64>, NceStepStats)> {
    let items = items(nd, data, noise)?;
    let n_data = data.len() as f64;
    let nu = noise.nu;
    let partials = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut p = Partial {
                grad: model.potential.zeros_like(),
                grad_zeta: vec![0.0; model.zeta.len()],
                objective: 0.0,
                posterior_data: 0.0,
                posterior_noise: 0.0,
            };
            for it in chunk {
                let (lp, cache) = model_logprob(model, it.x, true)?;
                let z = logit(lp, it.log_pn, nu)?;
                let p0 = sigmoid(z);
                let w = if it.is_data {
                    p.objective += log_sigmoid(z);
                    p.posterior_data += p0;
                    sigmoid(-z) / n_data
                } else {
                    p.objective += log_sigmoid(-z);
                    p.posterior_noise += p0;
                    -p0 / n_data
                };
                if let Some(cache) = cache {
                    model.potential.backward_into(cache, w, &mut p.grad)?;
                    p.grad_zeta[it.x.len() - 1] -= w;
                }
            }
            Ok(p)
        })
        .collect::<Result<Vec<Partial>>>()?;

    let mut grad = model.potential.zeros_like();
    let mut grad_zeta = vec![0.0; model.zeta.len()];
    let (mut objective, mut pd, mut pn) = (0.0, 0.0, 0.0);
    for p in partials {
        grad.add_scaled(1.0, &p.grad);
        for (a, b) in grad_zeta.iter_mut().zip(&p.grad_zeta) {
            *a += b;
        }
        objective += p.objective;
        pd += p.posterior_data;
        pn += p.posterior_noise;
    }
    let stats = NceStepStats {
        objective: objective / n_data,
        posterior_data: pd / n_data,
        posterior_noise: pn / noise.len() as f64,
        grad_norm_theta: grad.norm(),
        grad_norm_zeta: grad_zeta.iter().map(|g| g * g).sum::<f64>().sqrt(),
    };
    Ok((grad, grad_zeta, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub stats: NceStepStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Epochs completed; 0 is the state before training.
    pub epoch: usize,
    pub lr_theta: f64,
    pub lr_zeta: f64,
    /// Mean NLL of the training data under the stored zeta.
    pub train_nll: f64,
    /// Validation NLL under the exact normalizers.
    pub valid_nll: Option<f64>,
    /// `sum_l (zeta_l - log Z_l)^2`.
    pub zeta_gap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from(
            "epoch,step,objective,posterior_data,posterior_noise,grad_norm_theta,grad_norm_zeta\n",
        );
        for r in &self.steps {
            let t = &r.stats;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.step,
                t.objective,
                t.posterior_data,
                t.posterior_noise,
                t.grad_norm_theta,
                t.grad_norm_zeta
            );
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr_theta,lr_zeta,train_nll,valid_nll,zeta_gap\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                r.lr_theta,
                r.lr_zeta,
                r.train_nll,
                opt_cell(r.valid_nll),
                opt_cell(r.zeta_gap)
            );
        }
        s
    }

    /// Writes `steps.csv` and `epochs.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("steps.csv"), self.steps_csv().as_bytes())?;
        write_atomic(&dir.join("epochs.csv"), self.epochs_csv().as_bytes())
    }

    pub fn final_valid_nll(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.valid_nll)
    }

    pub fn final_zeta_gap(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.zeta_gap)
    }
}

fn epoch_record(
    model: &TrfModel,
    train: &[Sequence],
    valid: Option<&[Sequence]>,
    config: &NceConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let lr_epoch = epoch.saturating_sub(1);
    let train_nll = model.nll(train, crate::trf::ZetaSource::Stored)?.mean;
    let (valid_nll, zeta_gap) = match config.oracle_budget {
        Some(budget) => {
            let log_z = model.exact_log_z_support(budget as u128)?;
            let gap = model.zeta_gap_from(&log_z).squared_norm;
            let nll = match valid {
                Some(v) => Some(model.nll_with_log_z(v, &log_z)?.mean),
                None => None,
            };
            (nll, Some(gap))
        }
        None => (None, None),
    };
    Ok(EpochRecord {
        epoch,
        lr_theta: config.schedule.rate(config.theta_lr, lr_epoch),
        lr_zeta: config.schedule.rate(config.zeta_lr, lr_epoch),
        train_nll,
        valid_nll,
        zeta_gap,
    })
}

/// Runs `config.epochs` passes of shuffled mini-batches over `train`.
///
/// `zeta` is first set by `config.zeta_init`. Lengths with zero prior keep
/// their `zeta` unchanged. After every epoch (and once before the first) an
/// [`EpochRecord`] is appended; `valid` is scored only when an oracle budget
/// is configured.
pub fn train(
    model: &mut TrfModel,
    nd: &Arc<NoiseDistribution>,
    train: &[Sequence],
    valid: Option<&[Sequence]>,
    config: &NceConfig,
) -> Result<TrainLog> {
    train_with_hook(model, nd, train, valid, config, |_, _| Ok(()))
}

/// [`train`], calling `on_epoch` with the model after every completed epoch.
pub fn train_with_hook<F>(
    model: &mut TrfModel,
    nd: &Arc<NoiseDistribution>,
    train: &[Sequence],
    valid: Option<&[Sequence]>,
    config: &NceConfig,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(&TrfModel, &EpochRecord) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for x in train.iter().chain(valid.unwrap_or(&[])) {
        x.check(model.vocab_size(), model.max_len())?;
        if model.length_prior.prob(x.len()) == 0.0 {
            return Err(Error::ZeroLengthPrior(x.len()));
        }
    }
    config.zeta_init.apply(model);
    let frozen: Vec<bool> = (1..=model.max_len())
        .map(|l| model.length_prior.prob(l) == 0.0)
        .collect();
    let mut theta_opt = Optimizer::new(config.theta_optimizer, model.potential.num_params());
    let mut zeta_opt = Optimizer::new(config.zeta_optimizer, model.zeta.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));

    let mut log = TrainLog::default();
    log.epochs
        .push(epoch_record(model, train, valid, config, 0)?);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr_theta = config.schedule.rate(config.theta_lr, epoch);
        let lr_zeta = config.schedule.rate(config.zeta_lr, epoch);
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let noise = NoiseStream::new(
            Arc::clone(nd),
            batches.iter().map(|b| b.len()).collect(),
            config.nu,
            derive_seed(config.seed, 2 + epoch as u64),
            config.noise,
        )?;
        for (idx, noise_batch) in batches.iter().zip(noise) {
            let data: Vec<Sequence> = idx.iter().map(|&i| train[i].clone()).collect();
            let (grad, grad_zeta, stats) = nce_gradients(model, nd, &data, &noise_batch)?;
            if let Some(block) = grad.first_non_finite() {
                return Err(Error::NonFiniteGradient { step, block });
            }
            if grad_zeta.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    step,
                    block: "zeta".into(),
                });
            }
            let mut theta = model.potential.flat();
            let neg: Vec<f64> = grad.flat().iter().map(|g| -g).collect();
            theta_opt.descend(&mut theta, &neg, lr_theta, None);
            model.potential.set_flat(&theta);
            let neg_zeta: Vec<f64> = grad_zeta.iter().map(|g| -g).collect();
            zeta_opt.descend(&mut model.zeta, &neg_zeta, lr_zeta, Some(&frozen));
            log.steps.push(StepRecord {
                epoch: epoch + 1,
                step,
                stats,
            });
            step += 1;
        }
        let record = epoch_record(model, train, valid, config, epoch + 1)?;
        log::info!(
            "epoch {}: train nll {:.4}, valid nll {}, zeta gap {}",
            record.epoch,
            record.train_nll,
            opt_cell(record.valid_nll),
            opt_cell(record.zeta_gap)
        );
        on_epoch(model, &record)?;
        log.epochs.push(record);
    }
    Ok(log)
}
