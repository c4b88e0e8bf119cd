//! Unidirectional LSTM language model, usable as a reference distribution.
//!
//! The model scores `<s> x_1 .. x_k </s>` as the product of next-symbol
//! softmaxes. `<s>` is never predicted, and at position `max_len - 1` only
//! `</s>` is allowed, so the probabilities of all sequences of lengths
//! `2..=max_len` sum to one.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{masked_log_softmax, LstmLayer, LstmTrace};
use super::potential::{load_tensors, ParamFile};
use super::tensor::{axpy, ParamSet, Tensor};
use crate::corpus::{Sequence, BEGIN_ID, END_ID};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::util::{derive_seed, write_atomic};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLmParams {
    config: LstmLmConfig,
    pub(crate) embedding: Tensor,
    pub(crate) layers: Vec<LstmLayer>,
    /// `[V, hidden]`
    pub(crate) out_weight: Tensor,
    pub(crate) out_bias: Tensor,
}

impl ParamSet for LstmLmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embedding];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.out_weight);
        v.push(&self.out_bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embedding];
        for l in self.layers.iter_mut() {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.out_weight);
        v.push(&mut self.out_bias);
        v
    }
}

struct LmTrace {
    ids: Vec<u32>,
    layers: Vec<LstmTrace>,
    top: Vec<Vec<f64>>,
    /// log-probabilities per predicted position
    log_probs: Vec<Vec<f64>>,
}

impl LstmLmParams {
    pub fn init<R: Rng + ?Sized>(config: LstmLmConfig, scale: f64, rng: &mut R) -> Result<Self> {
        if config.vocab_size < 3
            || config.embed_dim == 0
            || config.hidden == 0
            || config.layers == 0
        {
            return Err(Error::Shape(format!("invalid LSTM LM config {config:?}")));
        }
        if config.max_len < 2 {
            return Err(Error::Shape("max_len must be at least 2".into()));
        }
        let embedding = Tensor::uniform(
            "embedding",
            &[config.vocab_size, config.embed_dim],
            scale,
            rng,
        );
        let layers = (0..config.layers)
            .map(|i| {
                let input = if i == 0 {
                    config.embed_dim
                } else {
                    config.hidden
                };
                LstmLayer::new(&format!("lstm{i}"), input, config.hidden, scale, rng)
            })
            .collect();
        let out_weight = Tensor::uniform(
            "output.weight",
            &[config.vocab_size, config.hidden],
            scale,
            rng,
        );
        let out_bias = Tensor::uniform("output.bias", &[config.vocab_size], scale, rng);
        Ok(Self {
            config,
            embedding,
            layers,
            out_weight,
            out_bias,
        })
    }

    pub fn config(&self) -> &LstmLmConfig {
        &self.config
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn allowed(&self, position: usize, w: usize) -> bool {
        if position + 1 == self.config.max_len {
            w == END_ID as usize
        } else {
            w != BEGIN_ID as usize
        }
    }

    fn run(&self, ids: &[u32]) -> LmTrace {
        let inputs: Vec<Vec<f64>> = ids[..ids.len() - 1]
            .iter()
            .map(|&id| self.embedding.row(id as usize).to_vec())
            .collect();
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = inputs;
        for layer in &self.layers {
            let (out, trace) = layer.forward(&h);
            h = out;
            traces.push(trace);
        }
        let log_probs = h
            .iter()
            .enumerate()
            .map(|(t, ht)| {
                let mut logits = self.out_bias.data.clone();
                self.out_weight.matvec_acc(ht, &mut logits);
                // predicting position t + 1
                masked_log_softmax(&logits, |w| self.allowed(t + 1, w))
            })
            .collect();
        LmTrace {
            ids: ids.to_vec(),
            layers: traces,
            top: h,
            log_probs,
        }
    }

    fn valid_input(&self, x: &Sequence) -> bool {
        x.has_boundaries()
            && x.len() <= self.config.max_len
            && x.ids()
                .iter()
                .all(|&id| (id as usize) < self.config.vocab_size)
    }

    /// Log-probability of a boundary-delimited sequence; `-inf` for sequences
    /// outside the model's support.
    pub fn logprob(&self, x: &Sequence) -> f64 {
        if !self.valid_input(x) {
            return f64::NEG_INFINITY;
        }
        let trace = self.run(x.ids());
        trace
            .log_probs
            .iter()
            .zip(&x.ids()[1..])
            .map(|(lp, &w)| lp[w as usize])
            .sum()
    }

    /// Mean negative log-likelihood over `batch` and its gradient.
    pub fn nll_and_gradient(&self, batch: &[Sequence]) -> Result<(f64, LstmLmParams)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for x in batch {
            if !self.valid_input(x) {
                return Err(Error::LengthOutOfRange {
                    len: x.len(),
                    max: self.config.max_len,
                });
            }
            let trace = self.run(x.ids());
            total -= trace
                .log_probs
                .iter()
                .zip(&x.ids()[1..])
                .map(|(lp, &w)| lp[w as usize])
                .sum::<f64>();
            self.accumulate_gradient(&trace, scale, &mut grad);
        }
        Ok((total * scale, grad))
    }

    fn accumulate_gradient(&self, trace: &LmTrace, scale: f64, grad: &mut LstmLmParams) {
        let n = trace.top.len();
        let mut d_top = vec![vec![0.0; self.config.hidden]; n];
        for t in 0..n {
            let target = trace.ids[t + 1] as usize;
            // d(-log p)/d logits = softmax - onehot over the allowed set
            let mut d_logits: Vec<f64> = trace.log_probs[t]
                .iter()
                .map(|&lp| {
                    if lp == f64::NEG_INFINITY {
                        0.0
                    } else {
                        lp.exp()
                    }
                })
                .collect();
            d_logits[target] -= 1.0;
            d_logits.iter_mut().for_each(|v| *v *= scale);
            axpy(1.0, &d_logits, &mut grad.out_bias.data);
            grad.out_weight.outer_acc(&d_logits, &trace.top[t]);
            self.out_weight.matvec_t_acc(&d_logits, &mut d_top[t]);
        }
        let mut d = d_top;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&trace.layers[i], &d, &mut grad.layers[i]);
        }
        for (t, dx) in d.iter().enumerate() {
            let id = trace.ids[t] as usize;
            axpy(1.0, dx, grad.embedding.row_mut(id));
        }
    }

    /// One plain SGD step on the mean NLL of `batch`. Returns the NLL before
    /// the update.
    pub fn train_step(&mut self, batch: &[Sequence], learning_rate: f64) -> Result<f64> {
        let (nll, grad) = self.nll_and_gradient(batch)?;
        if let Some(block) = grad.first_non_finite() {
            return Err(Error::NonFiniteGradient { step: 0, block });
        }
        if learning_rate != 0.0 {
            self.add_scaled(-learning_rate, &grad);
        }
        Ok(nll)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamFile {
            version: FORMAT_VERSION,
            kind: "lstm-lm".into(),
            config: self.config.clone(),
            tensors: self.tensors().into_iter().cloned().collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ParamFile<LstmLmConfig> = serde_json::from_str(s)?;
        if file.version != FORMAT_VERSION || file.kind != "lstm-lm" {
            return Err(Error::Format(format!(
                "expected lstm-lm parameters version {FORMAT_VERSION}, got {} version {}",
                file.kind, file.version
            )));
        }
        let mut params = Self::init(file.config, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        load_tensors(&mut params, file.tensors)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Mean NLL over a dataset.
pub fn mean_nll(params: &LstmLmParams, data: &[Sequence]) -> f64 {
    data.iter().map(|x| -params.logprob(x)).sum::<f64>() / data.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: Option<f64>,
}

/// Shuffled mini-batch training on the mean NLL.
pub fn train_lstm_lm(
    params: &mut LstmLmParams,
    train: &[Sequence],
    valid: Option<&[Sequence]>,
    config: &LstmTrainConfig,
) -> Result<Vec<LstmEpoch>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let mut opt = Optimizer::new(config.optimizer, params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.schedule.rate(config.learning_rate, epoch);
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Sequence> = idx.iter().map(|&i| train[i].clone()).collect();
            let (_, grad) = params.nll_and_gradient(&batch)?;
            if let Some(block) = grad.first_non_finite() {
                return Err(Error::NonFiniteGradient { step, block });
            }
            let mut flat = params.flat();
            opt.descend(&mut flat, &grad.flat(), lr, None);
            params.set_flat(&flat);
            step += 1;
        }
        let record = LstmEpoch {
            epoch: epoch + 1,
            train_nll: mean_nll(params, train),
            valid_nll: valid.map(|v| mean_nll(params, v)),
        };
        log::info!(
            "lstm epoch {}: train nll {:.4}",
            record.epoch,
            record.train_nll
        );
        log.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::log_sum_exp_pairwise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(v: usize, m: usize) -> LstmLmConfig {
        LstmLmConfig {
            vocab_size: v,
            embed_dim: 3,
            hidden: 4,
            layers: 2,
            max_len: m,
        }
    }

    fn enumerate(payload_symbols: &[u32], max_payload: usize) -> Vec<Sequence> {
        let mut out = vec![Sequence::with_boundaries(&[])];
        let mut frontier: Vec<Vec<u32>> = vec![vec![]];
        for _ in 0..max_payload {
            let mut next = Vec::new();
            for p in &frontier {
                for &s in payload_symbols {
                    let mut q = p.clone();
                    q.push(s);
                    out.push(Sequence::with_boundaries(&q));
                    next.push(q);
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn total_mass_is_one() {
        // V = 3: payload alphabet is just <unk>
        for (v, m) in [(3, 4), (5, 4), (4, 5)] {
            let p = LstmLmParams::init(config(v, m), 0.8, &mut ChaCha8Rng::seed_from_u64(v as u64))
                .unwrap();
            let payload: Vec<u32> = (2..v as u32).collect();
            let lps: Vec<f64> = enumerate(&payload, m - 2)
                .iter()
                .map(|x| p.logprob(x))
                .collect();
            let total = log_sum_exp_pairwise(&lps).exp();
            assert!((total - 1.0).abs() < 1e-6, "v={v} m={m} total={total}");
        }
    }

    #[test]
    fn logprob_is_nonpositive_and_deterministic() {
        let p = LstmLmParams::init(config(6, 6), 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Sequence::with_boundaries(&[3, 4, 5]);
        let a = p.logprob(&x);
        assert!(a <= 0.0);
        assert_eq!(a.to_bits(), p.logprob(&x).to_bits());
        assert_eq!(
            p.logprob(&Sequence::with_boundaries(&[3, 3, 3, 3, 3])),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut p =
            LstmLmParams::init(config(6, 6), 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = p.clone();
        p.train_step(&[Sequence::with_boundaries(&[3, 4])], 0.0)
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn training_lowers_nll() {
        let mut p =
            LstmLmParams::init(config(7, 8), 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let batch: Vec<Sequence> = (0..10)
            .map(|i: u32| {
                Sequence::with_boundaries(&[3 + (i % 2), 4, 5 + (i % 2), 6][..2 + i as usize % 3])
            })
            .collect();
        let first = p.train_step(&batch, 0.5).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = p.train_step(&batch, 0.5).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn serialization_roundtrip() {
        let p = LstmLmParams::init(config(6, 6), 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let back = LstmLmParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(crate::seqnet::PotentialParams::from_json(&p.to_json().unwrap()).is_err());
    }

    #[test]
    fn trainer_lowers_nll_deterministically() {
        let cfg = LstmLmConfig {
            vocab_size: 5,
            embed_dim: 4,
            hidden: 4,
            layers: 1,
            max_len: 5,
        };
        let data = vec![
            Sequence::with_boundaries(&[3, 4]),
            Sequence::with_boundaries(&[3, 4, 4]),
            Sequence::with_boundaries(&[3]),
        ];
        let tc = LstmTrainConfig {
            epochs: 30,
            batch_size: 2,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            schedule: Schedule::Constant,
            seed: 3,
        };
        let init = LstmLmParams::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = mean_nll(&init, &data);
        let mut a = init.clone();
        let log = train_lstm_lm(&mut a, &data, Some(&data), &tc).unwrap();
        let mut b = init.clone();
        train_lstm_lm(&mut b, &data, None, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.len(), 30);
        assert!(log.last().unwrap().train_nll < before - 1.0);
    }
}
