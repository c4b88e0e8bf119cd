//! Interpolated Kneser-Ney n-gram model.
//!
//! Serves three roles: the noise distribution for NCE, the `KN` rescoring
//! baseline, and optionally a reference distribution for the TRF.
//!
//! Histories that start with `<s>` keep their raw counts at every order; all
//! other lower-order n-grams use continuation counts (number of distinct
//! left extensions). Each order has one discount `D = n1 / (n1 + 2 n2)`
//! computed from its count-of-counts, falling back to 0.5 when either count
//! is zero. The lowest order interpolates with the uniform distribution over
//! every symbol except `<s>`, which is never predicted.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sequence, BEGIN_ID, END_ID};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
pub const FALLBACK_DISCOUNT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
struct History {
    /// Sorted by symbol id.
    counts: Vec<(u32, u64)>,
    total: u64,
}

impl History {
    fn count(&self, w: u32) -> u64 {
        match self.counts.binary_search_by_key(&w, |&(id, _)| id) {
            Ok(i) => self.counts[i].1,
            Err(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab_size: usize,
    discounts: Vec<f64>,
    /// `tables[k - 1]` maps histories of length `k - 1` to next-symbol counts.
    tables: Vec<HashMap<Vec<u32>, History>>,
}

/// Trains an interpolated Kneser-Ney model on boundary-delimited sequences.
pub fn train_ngram(dataset: &[Sequence], order: usize, vocab_size: usize) -> Result<NGramModel> {
    if order < 1 {
        return Err(Error::InvalidOrder(order));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // raw[k-1]: history -> next -> count
    let mut raw: Vec<HashMap<Vec<u32>, HashMap<u32, u64>>> = vec![HashMap::new(); order];
    for seq in dataset {
        seq.check(vocab_size, usize::MAX)?;
        if !seq.has_boundaries() {
            return Err(Error::Format(
                "n-gram training sequences must carry <s> and </s>".into(),
            ));
        }
        let ids = seq.ids();
        for i in 1..ids.len() {
            for k in 1..=order.min(i + 1) {
                let hist = ids[i + 1 - k..i].to_vec();
                *raw[k - 1]
                    .entry(hist)
                    .or_default()
                    .entry(ids[i])
                    .or_default() += 1;
            }
        }
    }

    let mut adjusted: Vec<HashMap<Vec<u32>, HashMap<u32, u64>>> = vec![HashMap::new(); order];
    adjusted[order - 1] = raw[order - 1].clone();
    for k in 1..order {
        // continuation counts from the order above: number of distinct v with c(v h w) > 0
        let mut cont: HashMap<Vec<u32>, HashMap<u32, u64>> = HashMap::new();
        for (hist, nexts) in &raw[k] {
            let suffix = hist[1..].to_vec();
            for &w in nexts.keys() {
                *cont
                    .entry(suffix.clone())
                    .or_default()
                    .entry(w)
                    .or_default() += 1;
            }
        }
        let mut table = HashMap::new();
        for (hist, nexts) in &raw[k - 1] {
            let starts_sentence = hist.first() == Some(&BEGIN_ID);
            let mut out = HashMap::new();
            for (&w, &c) in nexts {
                let adj = if starts_sentence {
                    c
                } else {
                    cont.get(hist).and_then(|m| m.get(&w)).copied().unwrap_or(0)
                };
                debug_assert!(adj > 0);
                out.insert(w, adj);
            }
            table.insert(hist.clone(), out);
        }
        adjusted[k - 1] = table;
    }

    let discounts = adjusted
        .iter()
        .map(|table| {
            let (mut n1, mut n2) = (0u64, 0u64);
            for nexts in table.values() {
                for &c in nexts.values() {
                    match c {
                        1 => n1 += 1,
                        2 => n2 += 1,
                        _ => {}
                    }
                }
            }
            if n1 == 0 || n2 == 0 {
                FALLBACK_DISCOUNT
            } else {
                n1 as f64 / (n1 as f64 + 2.0 * n2 as f64)
            }
        })
        .collect();

    let tables = adjusted
        .into_iter()
        .map(|table| {
            table
                .into_iter()
                .map(|(hist, nexts)| {
                    let mut counts: Vec<(u32, u64)> = nexts.into_iter().collect();
                    counts.sort_unstable();
                    let total = counts.iter().map(|c| c.1).sum();
                    (hist, History { counts, total })
                })
                .collect()
        })
        .collect();

    Ok(NGramModel {
        order,
        vocab_size,
        discounts,
        tables,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    fn base_prob(&self, w: u32) -> f64 {
        if w == BEGIN_ID {
            0.0
        } else {
            1.0 / (self.vocab_size - 1) as f64
        }
    }

    /// Histories of increasing order that actually occur, ending at `context`.
    fn histories<'a>(
        &'a self,
        context: &'a [u32],
    ) -> impl Iterator<Item = (f64, &'a History)> + 'a {
        (1..=self.order).map_while(move |k| {
            let hlen = k - 1;
            if context.len() < hlen {
                return None;
            }
            let h = &context[context.len() - hlen..];
            self.tables[k - 1]
                .get(h)
                .map(|hist| (self.discounts[k - 1], hist))
        })
    }

    /// `P(next | context)`; only the last `order - 1` context symbols matter.
    pub fn prob(&self, context: &[u32], next: u32) -> f64 {
        let mut p = self.base_prob(next);
        if next == BEGIN_ID {
            return 0.0;
        }
        for (d, hist) in self.histories(context) {
            let total = hist.total as f64;
            let gamma = d * hist.counts.len() as f64 / total;
            let c = hist.count(next) as f64;
            p = gamma * p + (c - d).max(0.0) / total;
        }
        p
    }

    pub fn logprob_conditional(&self, context: &[u32], next: u32) -> f64 {
        self.prob(context, next).ln()
    }

    /// Full next-symbol distribution over all `V` ids.
    pub fn distribution(&self, context: &[u32]) -> Vec<f64> {
        let mut p: Vec<f64> = (0..self.vocab_size as u32)
            .map(|w| self.base_prob(w))
            .collect();
        for (d, hist) in self.histories(context) {
            let total = hist.total as f64;
            let gamma = d * hist.counts.len() as f64 / total;
            for x in p.iter_mut() {
                *x *= gamma;
            }
            for &(w, c) in &hist.counts {
                p[w as usize] += (c as f64 - d).max(0.0) / total;
            }
        }
        p
    }

    /// Log-probability of the whole sentence, `</s>` included. This is the
    /// usual n-gram sentence score and normalizes jointly over lengths.
    pub fn logprob_sentence(&self, x: &Sequence) -> f64 {
        let ids = x.ids();
        (1..ids.len())
            .map(|i| self.logprob_conditional(&ids[..i], ids[i]))
            .sum()
    }

    /// Log-probability of `x` among sequences of the same length.
    ///
    /// Each conditional at a payload position is renormalized over the
    /// payload symbols (everything but `<s>` and `</s>`); the final `</s>` is
    /// forced and contributes nothing.
    pub fn logprob_fixed_length(&self, x: &Sequence) -> Result<f64> {
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        if !x.has_boundaries() {
            return Err(Error::Format(
                "fixed-length scoring needs a sequence delimited by <s> and </s>".into(),
            ));
        }
        let ids = x.ids();
        let mut total = 0.0;
        for i in 1..ids.len() - 1 {
            let w = ids[i];
            if w == BEGIN_ID || w == END_ID {
                return Ok(f64::NEG_INFINITY);
            }
            let ctx = &ids[..i];
            let payload_mass = 1.0 - self.prob(ctx, END_ID);
            total += (self.prob(ctx, w) / payload_mass).ln();
        }
        Ok(total)
    }

    /// Draws a sequence of exactly `len` symbols (boundaries included) from
    /// the same distribution [`NGramModel::logprob_fixed_length`] scores.
    pub fn sample_fixed_length<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Sequence {
        assert!(len >= 2, "a delimited sequence has at least two symbols");
        let mut ids = Vec::with_capacity(len);
        ids.push(BEGIN_ID);
        for _ in 0..len - 2 {
            let dist = self.distribution(&ids);
            let mass: f64 = dist[2..].iter().sum();
            let u = rng.gen::<f64>() * mass;
            let mut acc = 0.0;
            let mut pick = self.vocab_size as u32 - 1;
            for (w, &p) in dist.iter().enumerate().skip(2) {
                acc += p;
                if u < acc {
                    pick = w as u32;
                    break;
                }
            }
            ids.push(pick);
        }
        ids.push(END_ID);
        Sequence::new(ids).expect("nonempty")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NGramFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: NGramFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes the model in ARPA backoff format (log10 probabilities).
    ///
    /// Listed n-grams carry their full interpolated probability and each
    /// history carries its interpolation weight as backoff, which reproduces
    /// [`NGramModel::prob`] exactly under standard backoff evaluation.
    pub fn write_arpa<W: Write>(&self, mut w: W, symbols: &[String]) -> Result<()> {
        if symbols.len() != self.vocab_size {
            return Err(Error::Shape(format!(
                "{} symbols for a model over {} ids",
                symbols.len(),
                self.vocab_size
            )));
        }
        // entries[k-1]: sorted list of full n-grams of order k
        let mut entries: Vec<Vec<Vec<u32>>> = vec![Vec::new(); self.order];
        entries[0] = (0..self.vocab_size as u32).map(|w| vec![w]).collect();
        for k in 2..=self.order {
            let mut grams: Vec<Vec<u32>> = self.tables[k - 1]
                .iter()
                .flat_map(|(h, hist)| {
                    hist.counts.iter().map(move |&(w, _)| {
                        let mut g = h.clone();
                        g.push(w);
                        g
                    })
                })
                .collect();
            grams.sort();
            entries[k - 1] = grams;
        }
        let backoff = |gram: &[u32]| -> Option<f64> {
            let k = gram.len() + 1;
            if k > self.order {
                return None;
            }
            self.tables[k - 1]
                .get(gram)
                .map(|hist| self.discounts[k - 1] * hist.counts.len() as f64 / hist.total as f64)
        };
        writeln!(w, "\\data\\")?;
        for (k, e) in entries.iter().enumerate() {
            writeln!(w, "ngram {}={}", k + 1, e.len())?;
        }
        for (k, e) in entries.iter().enumerate() {
            writeln!(w)?;
            writeln!(w, "\\{}-grams:", k + 1)?;
            for gram in e {
                let (ctx, next) = gram.split_at(gram.len() - 1);
                let p = self.prob(ctx, next[0]);
                let lp = if p > 0.0 { p.log10() } else { -99.0 };
                let words: Vec<&str> = gram
                    .iter()
                    .map(|&id| symbols[id as usize].as_str())
                    .collect();
                write!(w, "{}\t{}", lp, words.join(" "))?;
                if let Some(b) = backoff(gram) {
                    write!(w, "\t{}", b.log10())?;
                }
                writeln!(w)?;
            }
        }
        writeln!(w)?;
        writeln!(w, "\\end\\")?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct NGramFile {
    version: u32,
    order: usize,
    vocab_size: usize,
    discounts: Vec<f64>,
    /// One list per order; each entry is a history and its next-symbol counts.
    tables: Vec<Vec<HistoryRecord>>,
}

#[derive(Serialize, Deserialize)]
struct HistoryRecord {
    history: Vec<u32>,
    counts: Vec<(u32, u64)>,
}

impl From<&NGramModel> for NGramFile {
    fn from(m: &NGramModel) -> Self {
        let tables = m
            .tables
            .iter()
            .map(|t| {
                let mut recs: Vec<HistoryRecord> = t
                    .iter()
                    .map(|(h, hist)| HistoryRecord {
                        history: h.clone(),
                        counts: hist.counts.clone(),
                    })
                    .collect();
                recs.sort_by(|a, b| a.history.cmp(&b.history));
                recs
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            order: m.order,
            vocab_size: m.vocab_size,
            discounts: m.discounts.clone(),
            tables,
        }
    }
}

impl TryFrom<NGramFile> for NGramModel {
    type Error = Error;

    fn try_from(f: NGramFile) -> Result<Self> {
        if f.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported n-gram format version {}",
                f.version
            )));
        }
        if f.order < 1 {
            return Err(Error::InvalidOrder(f.order));
        }
        if f.discounts.len() != f.order || f.tables.len() != f.order {
            return Err(Error::Format(
                "n-gram tables do not match the declared order".into(),
            ));
        }
        if f.discounts.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Format("discount outside [0, 1]".into()));
        }
        let mut tables = Vec::with_capacity(f.order);
        for (k, recs) in f.tables.into_iter().enumerate() {
            let mut table = HashMap::with_capacity(recs.len());
            for mut rec in recs {
                if rec.history.len() != k {
                    return Err(Error::Format(format!(
                        "order {} history has length {}",
                        k + 1,
                        rec.history.len()
                    )));
                }
                if rec.counts.is_empty()
                    || rec
                        .counts
                        .iter()
                        .any(|&(w, c)| c == 0 || w as usize >= f.vocab_size)
                {
                    return Err(Error::Format("invalid n-gram count record".into()));
                }
                rec.counts.sort_unstable();
                let total = rec.counts.iter().map(|c| c.1).sum();
                table.insert(
                    rec.history,
                    History {
                        counts: rec.counts,
                        total,
                    },
                );
            }
            tables.push(table);
        }
        Ok(NGramModel {
            order: f.order,
            vocab_size: f.vocab_size,
            discounts: f.discounts,
            tables,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: u32 = 3;
    const B: u32 = 4;

    fn seq(payload: &[u32]) -> Sequence {
        Sequence::with_boundaries(payload)
    }

    fn toy_corpus() -> Vec<Sequence> {
        let mut v = vec![seq(&[A, B]); 3];
        v.push(seq(&[A, A]));
        v
    }

    #[test]
    fn order_zero_rejected() {
        assert!(matches!(
            train_ngram(&toy_corpus(), 0, 5),
            Err(Error::InvalidOrder(0))
        ));
        assert!(matches!(train_ngram(&[], 2, 5), Err(Error::EmptyDataset)));
    }

    #[test]
    fn unigram_has_mass_on_seen_symbols() {
        let m = train_ngram(&[seq(&[A])], 1, 4).unwrap();
        assert!(m.prob(&[], A) > 0.0);
        assert!(m.prob(&[], END_ID) > 0.0);
        assert_eq!(m.prob(&[], BEGIN_ID), 0.0);
    }

    #[test]
    fn bigram_preserves_count_order() {
        let m = train_ngram(&toy_corpus(), 2, 5).unwrap();
        assert!(m.prob(&[BEGIN_ID, A], B) > m.prob(&[BEGIN_ID, A], A));
    }

    #[test]
    fn unseen_context_backs_off_to_unigram() {
        let m = train_ngram(&toy_corpus(), 3, 6).unwrap();
        let unseen = 5u32;
        for w in 0..6 {
            assert_eq!(m.prob(&[unseen], w), m.prob(&[], w));
        }
    }

    #[test]
    fn conditional_is_a_probability() {
        let m = train_ngram(&toy_corpus(), 2, 5).unwrap();
        for ctx in [&[BEGIN_ID][..], &[A], &[B], &[]] {
            for w in 1..5 {
                let lp = m.logprob_conditional(ctx, w);
                assert!(lp.is_finite() && lp <= 0.0);
            }
        }
    }

    /// Hand-expanded bigram computation on a five-sentence corpus.
    #[test]
    fn bigram_matches_hand_computation() {
        // V = 5: <s> </s> <unk> a b
        let data = vec![
            seq(&[A, B]),
            seq(&[A, B]),
            seq(&[A]),
            seq(&[B, A]),
            seq(&[B]),
        ];
        let m = train_ngram(&data, 2, 5).unwrap();
        // bigram raw counts
        //   <s>: a 3, b 2
        //   a:   b 2, </s> 2
        //   b:   </s> 3, a 1
        // count-of-counts: n1 = 1 (b a), n2 = 3 (<s> b, a b, a </s>)
        let d2 = 1.0 / (1.0 + 2.0 * 3.0);
        // unigram continuation counts: a <- {<s>, b} = 2, b <- {<s>, a} = 2, </s> <- {a, b} = 2
        // n1 = 0 -> fallback
        let d1 = 0.5;
        assert!((m.discounts()[1] - d2).abs() < 1e-15);
        assert_eq!(m.discounts()[0], d1);

        let uniform = 1.0 / 4.0;
        let uni_total = 6.0;
        let gamma1 = d1 * 3.0 / uni_total;
        let p1 = |c: f64| (c - d1).max(0.0) / uni_total + gamma1 * uniform;
        let p1_a = p1(2.0);
        let p1_end = p1(2.0);
        let p1_unk = p1(0.0);
        assert!((m.prob(&[], A) - p1_a).abs() < 1e-15);
        assert!((m.prob(&[], UNK) - p1_unk).abs() < 1e-15);

        // P(</s> | a) = (2 - d2)/4 + d2 * 2/4 * P1(</s>)
        let expect = (2.0 - d2) / 4.0 + d2 * 2.0 / 4.0 * p1_end;
        assert!((m.prob(&[A], END_ID) - expect).abs() < 1e-15);
        // P(a | b) = (1 - d2)/4 + d2 * 2/4 * P1(a)
        let expect = (1.0 - d2) / 4.0 + d2 * 2.0 / 4.0 * p1_a;
        assert!((m.prob(&[B], A) - expect).abs() < 1e-15);
        let sum: f64 = (0..5).map(|w| m.prob(&[B], w)).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    const UNK: u32 = crate::corpus::UNK_ID;

    #[test]
    fn fixed_length_hand_computation() {
        let m = train_ngram(&toy_corpus(), 2, 5).unwrap();
        let x = seq(&[A, B]);
        let p1 = m.prob(&[BEGIN_ID], A) / (1.0 - m.prob(&[BEGIN_ID], END_ID));
        let p2 = m.prob(&[BEGIN_ID, A], B) / (1.0 - m.prob(&[A], END_ID));
        let expect = p1.ln() + p2.ln();
        assert!((m.logprob_fixed_length(&x).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn minimal_sequence_has_probability_one() {
        let m = train_ngram(&toy_corpus(), 2, 5).unwrap();
        assert_eq!(m.logprob_fixed_length(&seq(&[])).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.sample_fixed_length(2, &mut rng), seq(&[]));
    }

    #[test]
    fn undelimited_sequences_rejected() {
        let m = train_ngram(&toy_corpus(), 2, 5).unwrap();
        assert!(m
            .logprob_fixed_length(&Sequence::new(vec![A, B]).unwrap())
            .is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = train_ngram(&toy_corpus(), 2, 5).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| m.sample_fixed_length(5, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert!(draw(7).iter().all(|s| s.len() == 5));
    }

    #[test]
    fn json_roundtrip() {
        let m = train_ngram(&toy_corpus(), 3, 5).unwrap();
        let back = NGramModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let bad = m
            .to_json()
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        assert!(NGramModel::from_json(&bad).is_err());
    }
}
