//! The TRF potential `phi(x; theta)`.
//!
//! Pipeline: embedding, a bank of half convolutions with widths `1..=K`
//! spliced on the channel axis, `s` stacked width-3 convolutions, a residual
//! add with the embeddings, a bidirectional LSTM, and the linear attention
//! readout
//!
//! ```text
//! phi = lambda . sum_i alpha_i h_i + c,    alpha_i = beta . h_i
//! ```
//!
//! `alpha_i` is the raw score with no softmax. The first stacked convolution
//! projects the `K * f` bank channels down, and the last one produces
//! `embed_dim` channels so the residual add is defined. With `K = 0` and
//! `s = 0` the embeddings feed the BLSTM directly.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv1d, ConvTrace, LstmLayer, LstmTrace};
use super::tensor::{axpy, dot, ParamSet, Tensor};
use crate::corpus::Sequence;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
pub const INIT_SCALE: f64 = 0.1;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Largest width in the convolution bank; 0 disables the bank.
    pub bank_width: usize,
    pub bank_channels: usize,
    pub stack_layers: usize,
    pub stack_channels: usize,
    pub lstm_hidden: usize,
}

impl PotentialConfig {
    /// Embedding straight into the BLSTM, no convolutions.
    pub fn blstm_only(vocab_size: usize, embed_dim: usize, lstm_hidden: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            bank_width: 0,
            bank_channels: 0,
            stack_layers: 0,
            stack_channels: 0,
            lstm_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.embed_dim == 0 || self.lstm_hidden == 0 {
            return Err(Error::Shape(format!(
                "vocab_size >= 3, embed_dim > 0 and lstm_hidden > 0 required, got {self:?}"
            )));
        }
        if self.bank_width > 0 && self.bank_channels == 0 {
            return Err(Error::Shape(
                "bank_channels must be positive when the bank is enabled".into(),
            ));
        }
        if self.bank_width > 0 && self.stack_layers == 0 {
            return Err(Error::Shape(
                "the convolution bank needs at least one stacked layer to match the embedding width".into(),
            ));
        }
        if self.stack_layers > 1 && self.stack_channels == 0 {
            return Err(Error::Shape("stack_channels must be positive".into()));
        }
        Ok(())
    }

    fn stack_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.stack_layers);
        let mut input = if self.bank_width > 0 {
            self.bank_width * self.bank_channels
        } else {
            self.embed_dim
        };
        for j in 0..self.stack_layers {
            let out = if j + 1 == self.stack_layers {
                self.embed_dim
            } else {
                self.stack_channels
            };
            dims.push((input, out));
            input = out;
        }
        dims
    }
}

#[derive(Debug, Clone)]
pub struct PotentialParams {
    config: PotentialConfig,
    pub(crate) embedding: Tensor,
    pub(crate) bank: Vec<Conv1d>,
    pub(crate) stack: Vec<Conv1d>,
    pub(crate) lstm_fwd: LstmLayer,
    pub(crate) lstm_bwd: LstmLayer,
    /// beta
    pub(crate) attention: Tensor,
    /// lambda
    pub(crate) readout: Tensor,
    /// c
    pub(crate) bias: Tensor,
    generation: u64,
}

impl PartialEq for PotentialParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors() == other.tensors()
    }
}

impl ParamSet for PotentialParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embedding];
        for c in self.bank.iter().chain(&self.stack) {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.extend(self.lstm_fwd.tensors());
        v.extend(self.lstm_bwd.tensors());
        v.push(&self.attention);
        v.push(&self.readout);
        v.push(&self.bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation = next_generation();
        let mut v = vec![&mut self.embedding];
        for c in self.bank.iter_mut().chain(self.stack.iter_mut()) {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.extend(self.lstm_fwd.tensors_mut());
        v.extend(self.lstm_bwd.tensors_mut());
        v.push(&mut self.attention);
        v.push(&mut self.readout);
        v.push(&mut self.bias);
        v
    }
}

/// Forward record consumed by [`PotentialParams::backward`].
pub struct PotentialCache {
    generation: u64,
    ids: Vec<u32>,
    bank: Vec<ConvTrace>,
    stack: Vec<ConvTrace>,
    lstm_fwd: LstmTrace,
    lstm_bwd: LstmTrace,
    /// BLSTM outputs `[h_fwd; h_bwd]` per position.
    hidden: Vec<Vec<f64>>,
}

impl PotentialCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn hidden(&self) -> &[Vec<f64>] {
        &self.hidden
    }
}

impl PotentialParams {
    /// Parameters drawn uniformly from `[-0.1, 0.1]`.
    pub fn init<R: Rng + ?Sized>(config: PotentialConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_scale(config, INIT_SCALE, rng)
    }

    pub fn init_with_scale<R: Rng + ?Sized>(
        config: PotentialConfig,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let d = config.lstm_hidden;
        let embedding = Tensor::uniform("embedding", &[config.vocab_size, e], scale, rng);
        let bank = (1..=config.bank_width)
            .map(|k| Conv1d::new(&format!("bank{k}"), k, e, config.bank_channels, scale, rng))
            .collect();
        let stack = config
            .stack_dims()
            .into_iter()
            .enumerate()
            .map(|(j, (i, o))| Conv1d::new(&format!("stack{j}"), 3, i, o, scale, rng))
            .collect();
        let lstm_fwd = LstmLayer::new("blstm.fwd", e, d, scale, rng);
        let lstm_bwd = LstmLayer::new("blstm.bwd", e, d, scale, rng);
        let attention = Tensor::uniform("attention", &[2 * d], scale, rng);
        let readout = Tensor::uniform("readout", &[2 * d], scale, rng);
        let bias = Tensor::uniform("bias", &[1], scale, rng);
        Ok(Self {
            config,
            embedding,
            bank,
            stack,
            lstm_fwd,
            lstm_bwd,
            attention,
            readout,
            bias,
            generation: next_generation(),
        })
    }

    pub fn config(&self) -> &PotentialConfig {
        &self.config
    }

    /// Same layout, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embedding: self.embedding.zeros_like(),
            bank: self.bank.iter().map(Conv1d::zeros_like).collect(),
            stack: self.stack.iter().map(Conv1d::zeros_like).collect(),
            lstm_fwd: self.lstm_fwd.zeros_like(),
            lstm_bwd: self.lstm_bwd.zeros_like(),
            attention: self.attention.zeros_like(),
            readout: self.readout.zeros_like(),
            bias: self.bias.zeros_like(),
            generation: next_generation(),
        }
    }

    pub fn c(&self) -> f64 {
        self.bias.data[0]
    }

    pub fn set_c(&mut self, c: f64) {
        self.generation = next_generation();
        self.bias.data[0] = c;
    }

    pub fn attention_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.attention.data
    }

    pub fn readout_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.readout.data
    }

    pub fn forward(&self, x: &Sequence) -> Result<(f64, PotentialCache)> {
        let ids = x.ids();
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::SymbolOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        let emb: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| self.embedding.row(id as usize).to_vec())
            .collect();

        let mut bank_traces = Vec::with_capacity(self.bank.len());
        let mut features = if self.bank.is_empty() {
            emb.clone()
        } else {
            let mut spliced =
                vec![Vec::with_capacity(self.bank.len() * self.config.bank_channels); ids.len()];
            for conv in &self.bank {
                let (out, trace) = conv.forward(&emb);
                for (s, o) in spliced.iter_mut().zip(out) {
                    s.extend(o);
                }
                bank_traces.push(trace);
            }
            spliced
        };
        let mut stack_traces = Vec::with_capacity(self.stack.len());
        for conv in &self.stack {
            let (out, trace) = conv.forward(&features);
            features = out;
            stack_traces.push(trace);
        }
        if !self.stack.is_empty() {
            for (f, e) in features.iter_mut().zip(&emb) {
                axpy(1.0, e, f);
            }
        }

        let (h_fwd, lstm_fwd) = self.lstm_fwd.forward(&features);
        let reversed: Vec<Vec<f64>> = features.iter().rev().cloned().collect();
        let (mut h_bwd, lstm_bwd) = self.lstm_bwd.forward(&reversed);
        h_bwd.reverse();
        let hidden: Vec<Vec<f64>> = h_fwd
            .into_iter()
            .zip(h_bwd)
            .map(|(mut f, b)| {
                f.extend(b);
                f
            })
            .collect();

        let beta = &self.attention.data;
        let lambda = &self.readout.data;
        let phi = hidden
            .iter()
            .map(|h| dot(beta, h) * dot(lambda, h))
            .sum::<f64>()
            + self.bias.data[0];

        Ok((
            phi,
            PotentialCache {
                generation: self.generation,
                ids: ids.to_vec(),
                bank: bank_traces,
                stack: stack_traces,
                lstm_fwd,
                lstm_bwd,
                hidden,
            },
        ))
    }

    pub fn phi(&self, x: &Sequence) -> Result<f64> {
        self.forward(x).map(|(phi, _)| phi)
    }

    /// Returns `upstream_scale * d phi / d theta`.
    pub fn backward(&self, cache: PotentialCache, upstream_scale: f64) -> Result<PotentialParams> {
        let mut grad = self.zeros_like();
        self.backward_into(cache, upstream_scale, &mut grad)?;
        Ok(grad)
    }

    /// Like [`PotentialParams::backward`] but accumulates into `grad`.
    pub fn backward_into(
        &self,
        cache: PotentialCache,
        upstream_scale: f64,
        grad: &mut PotentialParams,
    ) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(
                "parameters changed since the forward pass".into(),
            ));
        }
        if grad.config != self.config {
            return Err(Error::Shape(
                "gradient buffer has a different layout".into(),
            ));
        }
        let s = upstream_scale;
        let d = self.config.lstm_hidden;
        let beta = &self.attention.data;
        let lambda = &self.readout.data;

        grad.bias.data[0] += s;
        let mut d_fwd = Vec::with_capacity(cache.hidden.len());
        let mut d_bwd = Vec::with_capacity(cache.hidden.len());
        for h in &cache.hidden {
            let a = dot(beta, h);
            let r = dot(lambda, h);
            axpy(s * r, h, &mut grad.attention.data);
            axpy(s * a, h, &mut grad.readout.data);
            let mut dh = vec![0.0; 2 * d];
            axpy(s * r, beta, &mut dh);
            axpy(s * a, lambda, &mut dh);
            d_bwd.push(dh.split_off(d));
            d_fwd.push(dh);
        }

        let mut d_features = self
            .lstm_fwd
            .backward(&cache.lstm_fwd, &d_fwd, &mut grad.lstm_fwd);
        d_bwd.reverse();
        let d_rev = self
            .lstm_bwd
            .backward(&cache.lstm_bwd, &d_bwd, &mut grad.lstm_bwd);
        for (df, dr) in d_features.iter_mut().zip(d_rev.iter().rev()) {
            axpy(1.0, dr, df);
        }

        let mut d_emb = if self.stack.is_empty() {
            d_features
        } else {
            let d_emb = d_features.clone();
            let mut d = d_features;
            for (j, conv) in self.stack.iter().enumerate().rev() {
                d = conv.backward(&cache.stack[j], &d, &mut grad.stack[j]);
            }
            if self.bank.is_empty() {
                let mut d_emb = d_emb;
                for (a, b) in d_emb.iter_mut().zip(&d) {
                    axpy(1.0, b, a);
                }
                d_emb
            } else {
                let mut d_emb = d_emb;
                let f = self.config.bank_channels;
                for (k, conv) in self.bank.iter().enumerate() {
                    let d_out: Vec<Vec<f64>> = d
                        .iter()
                        .map(|row| row[k * f..(k + 1) * f].to_vec())
                        .collect();
                    let d_in = conv.backward(&cache.bank[k], &d_out, &mut grad.bank[k]);
                    for (a, b) in d_emb.iter_mut().zip(&d_in) {
                        axpy(1.0, b, a);
                    }
                }
                d_emb
            }
        };

        for (t, &id) in cache.ids.iter().enumerate() {
            let row = grad.embedding.row_mut(id as usize);
            axpy(1.0, &std::mem::take(&mut d_emb[t]), row);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamFile {
            version: FORMAT_VERSION,
            kind: "potential".into(),
            config: self.config.clone(),
            tensors: self.tensors().into_iter().cloned().collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ParamFile<PotentialConfig> = serde_json::from_str(s)?;
        if file.version != FORMAT_VERSION || file.kind != "potential" {
            return Err(Error::Format(format!(
                "expected potential parameters version {FORMAT_VERSION}, got {} version {}",
                file.kind, file.version
            )));
        }
        let mut params =
            Self::init_with_scale(file.config, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0))?;
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

/// On-disk layout shared by the network parameter files.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ParamFile<C> {
    pub version: u32,
    pub kind: String,
    pub config: C,
    pub tensors: Vec<Tensor>,
}

/// Copies named tensors into `params`, checking names and shapes.
pub(crate) fn load_tensors<P: ParamSet>(params: &mut P, tensors: Vec<Tensor>) -> Result<()> {
    let mut slots = params.tensors_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, file has {}",
            slots.len(),
            tensors.len()
        )));
    }
    for (slot, t) in slots.iter_mut().zip(tensors) {
        if slot.name != t.name {
            return Err(Error::Format(format!(
                "expected tensor {}, found {}",
                slot.name, t.name
            )));
        }
        t.check_shape(&slot.shape)?;
        if !t.all_finite() {
            return Err(Error::Format(format!(
                "tensor {} has non-finite values",
                t.name
            )));
        }
        slot.data = t.data;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_config() -> PotentialConfig {
        PotentialConfig {
            vocab_size: 6,
            embed_dim: 4,
            bank_width: 3,
            bank_channels: 2,
            stack_layers: 2,
            stack_channels: 3,
            lstm_hidden: 3,
        }
    }

    fn params(seed: u64) -> PotentialParams {
        PotentialParams::init(full_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_attention_gives_bias() {
        let mut p = params(1);
        p.attention_mut().iter_mut().for_each(|b| *b = 0.0);
        p.set_c(0.37);
        let x = Sequence::with_boundaries(&[3, 4, 5]);
        assert_eq!(p.phi(&x).unwrap(), 0.37);
    }

    #[test]
    fn feature_maps_keep_time_resolution() {
        let p = params(2);
        for l in 1..=7 {
            let x = Sequence::new(vec![3; l]).unwrap();
            let (_, cache) = p.forward(&x).unwrap();
            assert_eq!(cache.hidden().len(), l);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Sequence::with_boundaries(&[3, 2, 5]);
        let a = params(9).phi(&x).unwrap();
        let b = params(9).phi(&x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn phi_is_additive_in_bias() {
        let mut p = params(4);
        let x = Sequence::with_boundaries(&[4, 4, 3]);
        let before = p.phi(&x).unwrap();
        let c = p.c();
        p.set_c(c + 1.25);
        assert!((p.phi(&x).unwrap() - before - 1.25).abs() < 1e-12);
    }

    #[test]
    fn bias_gradient_equals_upstream_scale() {
        let p = params(5);
        let (_, cache) = p.forward(&Sequence::with_boundaries(&[3])).unwrap();
        let g = p.backward(cache, 0.7).unwrap();
        assert_eq!(g.bias.data[0], 0.7);

        let (_, cache) = p.forward(&Sequence::with_boundaries(&[3])).unwrap();
        let g = p.backward(cache, 0.0).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut p = params(6);
        let (_, cache) = p.forward(&Sequence::with_boundaries(&[3])).unwrap();
        p.set_c(1.0);
        assert!(matches!(p.backward(cache, 1.0), Err(Error::StaleCache(_))));
    }

    #[test]
    fn out_of_range_symbol_rejected() {
        let p = params(7);
        assert!(p.forward(&Sequence::new(vec![0, 9]).unwrap()).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = full_config();
        c.stack_layers = 0;
        assert!(c.validate().is_err());
        assert!(PotentialConfig::blstm_only(6, 4, 3).validate().is_ok());
    }

    #[test]
    fn serialization_roundtrip() {
        let p = params(8);
        let back = PotentialParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let x = Sequence::with_boundaries(&[5, 3]);
        assert_eq!(
            back.phi(&x).unwrap().to_bits(),
            p.phi(&x).unwrap().to_bits()
        );
    }
}
