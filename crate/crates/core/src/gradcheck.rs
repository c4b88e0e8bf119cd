//! Central finite-difference checks for analytic gradients.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{empirical_length_prior, Sequence, RESERVED};
use crate::error::Result;
use crate::nce::{nce_gradients, nce_objective};
use crate::ngram::train_ngram;
use crate::noise::{draw_noise_batch, NoiseDistribution};
use crate::seqnet::{ParamSet, PotentialConfig, PotentialParams};
use crate::trf::{Reference, TrfModel};

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of [`relative_error`]. Below this magnitude the measure
/// degrades to an absolute error, since the central difference itself carries
/// an `O(h^2)` truncation error of about `1e-9` at the default step.
pub const REL_FLOOR: f64 = 1e-4;

/// One-sided differences disagreeing by more than this (in [`relative_error`])
/// mean the step straddles a kink, such as a ReLU switching sign.
pub const KINK_TOLERANCE: f64 = 1e-2;

/// Step used instead of [`FD_STEP`] around a kink.
pub const REFINED_STEP: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    /// Worst coordinate of each parameter block.
    pub blocks: Vec<BlockError>,
    pub checked: usize,
    /// Coordinates re-differenced with [`REFINED_STEP`].
    pub refined: usize,
}

/// Central difference of `f` along one coordinate, where `f(t)` evaluates the
/// objective with the coordinate shifted by `t` and `f0 = f(0)`. Returns the
/// estimate and whether the step had to be refined.
fn central_difference<F: FnMut(f64) -> f64>(mut f: F, f0: f64) -> (f64, bool) {
    let up = f(FD_STEP);
    let down = f(-FD_STEP);
    let forward = (up - f0) / FD_STEP;
    let backward = (f0 - down) / FD_STEP;
    if relative_error(forward, backward) <= KINK_TOLERANCE {
        return ((up - down) / (2.0 * FD_STEP), false);
    }
    let up = f(REFINED_STEP);
    let down = f(-REFINED_STEP);
    ((up - down) / (2.0 * REFINED_STEP), true)
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&BlockError> {
        self.blocks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |b| b.rel_error)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.refined += other.refined;
        for b in other.blocks {
            match self.blocks.iter_mut().find(|x| x.block == b.block) {
                Some(x) if b.rel_error > x.rel_error => *x = b,
                Some(_) => {}
                None => self.blocks.push(b),
            }
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "checked {} coordinates ({} with the refined step)",
            self.checked, self.refined
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<24} max rel err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
                b.block, b.rel_error, b.index, b.analytic, b.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `objective` around
/// `params`, coordinate by coordinate.
pub fn check_params<P, F>(params: &P, analytic: &P, objective: F) -> GradCheckReport
where
    P: ParamSet + Clone,
    F: Fn(&P) -> f64,
{
    let names: Vec<String> = params.tensors().iter().map(|t| t.name.clone()).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let grad = analytic.flat();
    let base = params.flat();
    let mut work = params.clone();
    let f0 = objective(params);
    let mut report = GradCheckReport::default();
    let mut offset = 0;
    for (name, size) in names.into_iter().zip(sizes) {
        let mut worst: Option<BlockError> = None;
        for i in 0..size {
            let k = offset + i;
            let mut v = base.clone();
            let (numeric, refined) = central_difference(
                |t| {
                    v[k] = base[k] + t;
                    work.set_flat(&v);
                    objective(&work)
                },
                f0,
            );
            let rel = relative_error(grad[k], numeric);
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(BlockError {
                    block: name.clone(),
                    index: i,
                    analytic: grad[k],
                    numeric,
                    rel_error: rel,
                });
            }
            report.checked += 1;
            report.refined += usize::from(refined);
        }
        if let Some(w) = worst {
            report.blocks.push(w);
        }
        offset += size;
    }
    report
}

/// Finite-difference check for a plain vector of parameters.
pub fn check_vector<F>(
    name: &str,
    values: &[f64],
    analytic: &[f64],
    objective: F,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst: Option<BlockError> = None;
    let mut v = values.to_vec();
    let f0 = objective(values);
    let mut refined_count = 0;
    for k in 0..values.len() {
        let (numeric, refined) = central_difference(
            |t| {
                v[k] = values[k] + t;
                let y = objective(&v);
                v[k] = values[k];
                y
            },
            f0,
        );
        refined_count += usize::from(refined);
        let rel = relative_error(analytic[k], numeric);
        if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
            worst = Some(BlockError {
                block: name.into(),
                index: k,
                analytic: analytic[k],
                numeric,
                rel_error: rel,
            });
        }
    }
    GradCheckReport {
        blocks: worst.into_iter().collect(),
        checked: values.len(),
        refined: refined_count,
    }
}

/// Largest instance drawn by [`random_instance`].
pub const SUITE_MAX_VOCAB: usize = 6;
pub const SUITE_MAX_LEN: usize = 5;
pub const SUITE_MAX_WIDTH: usize = 8;

/// A small NCE problem: model, noise, one data batch and its noise batch.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: TrfModel,
    pub noise: Arc<NoiseDistribution>,
    pub data: Vec<Sequence>,
    pub noise_batch: crate::noise::NoiseBatch,
}

fn random_payload<R: Rng>(rng: &mut R, vocab_size: usize, max_len: usize) -> Vec<u32> {
    let n = rng.gen_range(1..=max_len - 2);
    (0..n)
        .map(|_| rng.gen_range(2..vocab_size as u32))
        .collect()
}

/// Random architecture within the suite limits.
pub fn random_config<R: Rng>(rng: &mut R, vocab_size: usize) -> PotentialConfig {
    let embed_dim = rng.gen_range(2..=SUITE_MAX_WIDTH);
    let lstm_hidden = rng.gen_range(2..=SUITE_MAX_WIDTH);
    if rng.gen_bool(0.3) {
        return PotentialConfig::blstm_only(vocab_size, embed_dim, lstm_hidden);
    }
    PotentialConfig {
        vocab_size,
        embed_dim,
        bank_width: rng.gen_range(1..=3),
        bank_channels: rng.gen_range(1..=3),
        stack_layers: rng.gen_range(1..=2),
        stack_channels: rng.gen_range(2..=SUITE_MAX_WIDTH),
        lstm_hidden,
    }
}

/// Seeded instance. `config` fixes the architecture (its vocabulary size
/// included); otherwise one is drawn within the suite limits.
pub fn random_instance(seed: u64, config: Option<PotentialConfig>) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = match config {
        Some(c) => c,
        None => {
            let v = rng.gen_range(RESERVED + 1..=SUITE_MAX_VOCAB);
            random_config(&mut rng, v)
        }
    };
    let v = config.vocab_size;
    let m = SUITE_MAX_LEN;
    let n_data = rng.gen_range(3..=6);
    let data: Vec<Sequence> = (0..n_data)
        .map(|_| Sequence::with_boundaries(&random_payload(&mut rng, v, m)))
        .collect();
    let prior = empirical_length_prior(&data, m)?;
    let order = rng.gen_range(1..=2);
    let base = Arc::new(train_ngram(&data, order, v)?);
    let noise = Arc::new(NoiseDistribution::new(prior.clone(), base.clone())?);
    let reference = if rng.gen_bool(0.5) {
        Reference::Uniform { vocab_size: v }
    } else {
        Reference::NGram(base)
    };
    let scale = rng.gen_range(0.2..0.6);
    let potential = PotentialParams::init_with_scale(config, scale, &mut rng)?;
    let zeta = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let model = TrfModel::new(potential, zeta, prior, reference)?;
    let nu = rng.gen_range(1..=3);
    let noise_batch = draw_noise_batch(&noise, data.len(), nu, &mut rng)?;
    Ok(Instance {
        model,
        noise,
        data,
        noise_batch,
    })
}

/// Per-quantity results of one instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    /// `d phi / d theta` on every data sequence.
    pub phi: GradCheckReport,
    /// `d J / d theta`.
    pub theta: GradCheckReport,
    /// `d J / d zeta`.
    pub zeta: GradCheckReport,
}

impl SuiteReport {
    pub fn merge(&mut self, other: SuiteReport) {
        self.phi.merge(other.phi);
        self.theta.merge(other.theta);
        self.zeta.merge(other.zeta);
    }

    pub fn passes(&self, theta_threshold: f64, zeta_threshold: f64) -> bool {
        self.phi.max_rel_error() < theta_threshold
            && self.theta.max_rel_error() < theta_threshold
            && self.zeta.max_rel_error() < zeta_threshold
    }

    /// Worst block over all three checks, with the check's name.
    pub fn worst(&self) -> Option<(&'static str, &BlockError)> {
        [
            ("phi", &self.phi),
            ("theta", &self.theta),
            ("zeta", &self.zeta),
        ]
        .into_iter()
        .filter_map(|(n, r)| r.worst().map(|b| (n, b)))
        .max_by(|a, b| a.1.rel_error.total_cmp(&b.1.rel_error))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "phi:")?;
        write!(f, "{}", self.phi)?;
        writeln!(f, "nce theta:")?;
        write!(f, "{}", self.theta)?;
        writeln!(f, "nce zeta:")?;
        write!(f, "{}", self.zeta)
    }
}

/// Finite-difference checks of the potential and NCE gradients on one
/// instance. With `fault` the analytic gradients are deliberately scaled by
/// `1 + fault` before comparison.
pub fn check_instance(inst: &Instance, fault: Option<f64>) -> Result<SuiteReport> {
    let scale = 1.0 + fault.unwrap_or(0.0);
    let pot = &inst.model.potential;
    let mut phi = GradCheckReport::default();
    for x in &inst.data {
        let (_, cache) = pot.forward(x)?;
        let g = pot.backward(cache, scale)?;
        phi.merge(check_params(pot, &g, |p| p.phi(x).unwrap_or(f64::NAN)));
    }
    let (mut g, mut gz, _) =
        nce_gradients(&inst.model, &inst.noise, &inst.data, &inst.noise_batch)?;
    if fault.is_some() {
        let scaled: Vec<f64> = g.flat().iter().map(|v| v * scale).collect();
        g.set_flat(&scaled);
        gz.iter_mut().for_each(|v| *v *= scale);
    }
    let objective = |m: &TrfModel| {
        nce_objective(m, &inst.noise, &inst.data, &inst.noise_batch).unwrap_or(f64::NAN)
    };
    let theta = check_params(pot, &g, |p| {
        let mut m = inst.model.clone();
        m.potential = p.clone();
        objective(&m)
    });
    let zeta = check_vector("zeta", &inst.model.zeta, &gz, |z| {
        let mut m = inst.model.clone();
        m.zeta = z.to_vec();
        objective(&m)
    });
    Ok(SuiteReport { phi, theta, zeta })
}
