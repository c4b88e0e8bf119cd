//! The trans-dimensional noise distribution `p_n(l, x) = pi_l * p_n(x | l)`
//! and batched noise generation.
//!
//! The noise distribution does not depend on the model, so batches can be
//! produced ahead of time by background threads feeding bounded queues.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LengthPrior, Sequence};
use crate::error::{Error, Result};
use crate::ngram::NGramModel;
use crate::util::derive_seed;

#[derive(Debug, Clone)]
pub struct NoiseDistribution {
    length_prior: LengthPrior,
    lengths: WeightedIndex<f64>,
    base: Arc<NGramModel>,
}

impl NoiseDistribution {
    pub fn new(length_prior: LengthPrior, base: Arc<NGramModel>) -> Result<Self> {
        let lengths = WeightedIndex::new(length_prior.probs().iter().copied())
            .map_err(|e| Error::Format(format!("length prior cannot be sampled: {e}")))?;
        if length_prior.prob(1) > 0.0 {
            return Err(Error::Format(
                "length 1 cannot hold both boundary symbols; prior must put zero mass on it".into(),
            ));
        }
        Ok(Self {
            length_prior,
            lengths,
            base,
        })
    }

    pub fn length_prior(&self) -> &LengthPrior {
        &self.length_prior
    }

    pub fn base(&self) -> &NGramModel {
        &self.base
    }

    /// `log pi_l + log p_n(x | l)`; `-inf` when `pi_l = 0`.
    pub fn noise_logprob(&self, x: &Sequence) -> f64 {
        let pi = self.length_prior.prob(x.len());
        if pi == 0.0 {
            return f64::NEG_INFINITY;
        }
        match self.base.logprob_fixed_length(x) {
            Ok(lp) => pi.ln() + lp,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// One draw and its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Sequence, f64) {
        let len = self.lengths.sample(rng) + 1;
        let x = self.base.sample_fixed_length(len, rng);
        let lp = self.noise_logprob(&x);
        (x, lp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub sequences: Vec<Sequence>,
    /// `log p_n(l, x)` of each sequence, recorded when it was drawn.
    pub log_pn: Vec<f64>,
    pub nu: usize,
}

impl NoiseBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Draws `nu * data_batch_size` noise sequences.
pub fn draw_noise_batch<R: Rng + ?Sized>(
    nd: &NoiseDistribution,
    data_batch_size: usize,
    nu: usize,
    rng: &mut R,
) -> Result<NoiseBatch> {
    if nu < 1 {
        return Err(Error::Config("noise ratio nu must be at least 1".into()));
    }
    let n = nu * data_batch_size;
    let mut sequences = Vec::with_capacity(n);
    let mut log_pn = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, lp) = nd.sample(rng);
        sequences.push(x);
        log_pn.push(lp);
    }
    Ok(NoiseBatch {
        sequences,
        log_pn,
        nu,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum NoiseMode {
    /// Generate every batch up front on the calling thread.
    #[default]
    Strict,
    /// Background producers, each owning a seeded stream and a bounded queue
    /// of `capacity` batches. Producer `i` makes batches `i, i + n, ...`.
    Async { producers: usize, capacity: usize },
}

/// Ordered stream of noise batches for one pass over the data.
///
/// For a given master seed and producer count the batches are identical in
/// both modes; `Strict` matches `Async` with one producer.
pub struct NoiseStream {
    inner: StreamInner,
}

enum StreamInner {
    Ready(std::vec::IntoIter<NoiseBatch>),
    Async {
        receivers: Vec<Receiver<NoiseBatch>>,
        next: usize,
        remaining: usize,
        handles: Vec<JoinHandle<()>>,
    },
}

impl NoiseStream {
    pub fn new(
        nd: Arc<NoiseDistribution>,
        batch_sizes: Vec<usize>,
        nu: usize,
        master_seed: u64,
        mode: NoiseMode,
    ) -> Result<Self> {
        if nu < 1 {
            return Err(Error::Config("noise ratio nu must be at least 1".into()));
        }
        let inner = match mode {
            NoiseMode::Strict => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, 0));
                let batches = batch_sizes
                    .into_iter()
                    .map(|b| draw_noise_batch(&nd, b, nu, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                StreamInner::Ready(batches.into_iter())
            }
            NoiseMode::Async {
                producers,
                capacity,
            } => {
                let producers = producers.max(1);
                let remaining = batch_sizes.len();
                let mut receivers = Vec::with_capacity(producers);
                let mut handles = Vec::with_capacity(producers);
                for i in 0..producers {
                    let (tx, rx) = sync_channel(capacity.max(1));
                    let nd = Arc::clone(&nd);
                    let sizes: Vec<usize> = batch_sizes
                        .iter()
                        .copied()
                        .skip(i)
                        .step_by(producers)
                        .collect();
                    let seed = derive_seed(master_seed, i as u64);
                    handles.push(std::thread::spawn(move || {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        for b in sizes {
                            let Ok(batch) = draw_noise_batch(&nd, b, nu, &mut rng) else {
                                return;
                            };
                            if tx.send(batch).is_err() {
                                return;
                            }
                        }
                    }));
                    receivers.push(rx);
                }
                StreamInner::Async {
                    receivers,
                    next: 0,
                    remaining,
                    handles,
                }
            }
        };
        Ok(Self { inner })
    }
}

impl Iterator for NoiseStream {
    type Item = NoiseBatch;

    fn next(&mut self) -> Option<NoiseBatch> {
        match &mut self.inner {
            StreamInner::Ready(it) => it.next(),
            StreamInner::Async {
                receivers,
                next,
                remaining,
                ..
            } => {
                if *remaining == 0 {
                    return None;
                }
                let batch = receivers[*next % receivers.len()].recv().ok()?;
                *next += 1;
                *remaining -= 1;
                Some(batch)
            }
        }
    }
}

impl Drop for NoiseStream {
    fn drop(&mut self) {
        if let StreamInner::Async {
            receivers, handles, ..
        } = &mut self.inner
        {
            receivers.clear();
            for h in handles.drain(..) {
                let _ = h.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::train_ngram;

    fn noise() -> Arc<NoiseDistribution> {
        let data = vec![
            Sequence::with_boundaries(&[3, 4]),
            Sequence::with_boundaries(&[3]),
            Sequence::with_boundaries(&[4, 4, 3]),
        ];
        let base = Arc::new(train_ngram(&data, 2, 5).unwrap());
        let prior = LengthPrior::new(vec![0.0, 0.0, 0.5, 0.25, 0.25]).unwrap();
        Arc::new(NoiseDistribution::new(prior, base).unwrap())
    }

    #[test]
    fn batch_size_is_nu_times_data() {
        let nd = noise();
        let b = draw_noise_batch(&nd, 10, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.len(), 200);
        assert!(b.log_pn.iter().all(|lp| lp.is_finite()));
        assert!(draw_noise_batch(&nd, 10, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn recorded_log_density_matches_rescoring() {
        let nd = noise();
        let b = draw_noise_batch(&nd, 5, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (x, lp) in b.sequences.iter().zip(&b.log_pn) {
            assert_eq!(nd.noise_logprob(x).to_bits(), lp.to_bits());
        }
    }

    #[test]
    fn zero_prior_length_is_neg_inf() {
        let nd = noise();
        assert_eq!(
            nd.noise_logprob(&Sequence::with_boundaries(&[])),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn single_length_uniform_unigram() {
        // unigram over {<unk>, a} with equal continuation counts; l = 3
        let data = vec![
            Sequence::with_boundaries(&[2]),
            Sequence::with_boundaries(&[3]),
        ];
        let base = Arc::new(train_ngram(&data, 1, 4).unwrap());
        let nd =
            NoiseDistribution::new(LengthPrior::new(vec![0.0, 0.0, 1.0]).unwrap(), base).unwrap();
        let lp = nd.noise_logprob(&Sequence::with_boundaries(&[3]));
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_batches() {
        let nd = noise();
        let a = draw_noise_batch(&nd, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = draw_noise_batch(&nd, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_equals_single_async_producer() {
        let nd = noise();
        let sizes = vec![10, 10, 10, 3];
        let strict: Vec<_> = NoiseStream::new(nd.clone(), sizes.clone(), 5, 42, NoiseMode::Strict)
            .unwrap()
            .collect();
        let asynced: Vec<_> = NoiseStream::new(
            nd.clone(),
            sizes.clone(),
            5,
            42,
            NoiseMode::Async {
                producers: 1,
                capacity: 2,
            },
        )
        .unwrap()
        .collect();
        assert_eq!(strict, asynced);
        assert_eq!(
            strict.iter().map(NoiseBatch::len).collect::<Vec<_>>(),
            vec![50, 50, 50, 15]
        );
    }

    #[test]
    fn multi_producer_stream_is_reproducible() {
        let nd = noise();
        let mode = NoiseMode::Async {
            producers: 3,
            capacity: 1,
        };
        let sizes = vec![4; 11];
        let a: Vec<_> = NoiseStream::new(nd.clone(), sizes.clone(), 2, 7, mode)
            .unwrap()
            .collect();
        let b: Vec<_> = NoiseStream::new(nd.clone(), sizes, 2, 7, mode)
            .unwrap()
            .collect();
        assert_eq!(a.len(), 11);
        assert_eq!(a, b);
    }

    #[test]
    fn dropping_a_partial_stream_stops_producers() {
        let nd = noise();
        let mut s = NoiseStream::new(
            nd,
            vec![5; 1000],
            3,
            1,
            NoiseMode::Async {
                producers: 2,
                capacity: 1,
            },
        )
        .unwrap();
        assert!(s.next().is_some());
        drop(s);
    }
}
