//! N-best rescoring with log-linear model combination, and word error rate.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;

use crate::corpus::{Sequence, TokenLevel, Vocabulary};
use crate::error::{Error, Result};
use crate::ngram::NGramModel;
use crate::seqnet::LstmLmParams;
use crate::trf::TrfModel;
use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// 1-based position in the recognizer output.
    pub rank: usize,
    pub acoustic: Option<f64>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Sorted by rank.
    pub hypotheses: Vec<Hypothesis>,
}

/// N-best lists, one line per hypothesis:
/// `<utt-id> <rank> <acoustic-score|NA> <token ...>`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NBestList {
    pub utterances: Vec<Utterance>,
}

impl NBestList {
    pub fn parse(text: &str) -> Result<Self> {
        let mut utterances: Vec<Utterance> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("n-best line {}: {what}", n + 1));
            let mut fields = line.splitn(4, char::is_whitespace);
            let id = fields.next().ok_or_else(|| bad("missing utterance id"))?;
            let rank: usize = fields
                .next()
                .ok_or_else(|| bad("missing rank"))?
                .parse()
                .map_err(|_| bad("rank is not a positive integer"))?;
            if rank == 0 {
                return Err(bad("ranks start at 1"));
            }
            let acoustic = match fields.next().ok_or_else(|| bad("missing acoustic score"))? {
                "NA" => None,
                s => Some(
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad("acoustic score is neither a finite number nor NA"))?,
                ),
            };
            let text = fields
                .next()
                .unwrap_or("")
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            let hyp = Hypothesis {
                rank,
                acoustic,
                text,
            };
            match utterances.last_mut() {
                Some(u) if u.id == id => {
                    if u.hypotheses.iter().any(|h| h.rank == rank) {
                        return Err(bad("duplicate rank"));
                    }
                    u.hypotheses.push(hyp);
                }
                _ => {
                    if !seen.insert(id.to_string()) {
                        return Err(bad(&format!(
                            "utterance {id} appears in two separate blocks"
                        )));
                    }
                    utterances.push(Utterance {
                        id: id.to_string(),
                        hypotheses: vec![hyp],
                    });
                }
            }
        }
        for u in &mut utterances {
            u.hypotheses.sort_by_key(|h| h.rank);
        }
        Ok(Self { utterances })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for u in &self.utterances {
            for h in &u.hypotheses {
                let ac = h
                    .acoustic
                    .map_or_else(|| "NA".to_string(), |a| a.to_string());
                let _ = writeln!(s, "{} {} {} {}", u.id, h.rank, ac, h.text);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.id.as_str()).collect()
    }
}

/// Reference transcripts, one `<utt-id> <token ...>` line each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct References(pub BTreeMap<String, String>);

impl References {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let words = rest.split_whitespace().collect::<Vec<_>>().join(" ");
            if map.insert(id.to_string(), words).is_some() {
                return Err(Error::Format(format!(
                    "reference line {}: duplicate id {id}",
                    n + 1
                )));
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(id, t)| format!("{id} {t}\n")).collect()
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    /// Fails unless both sides cover the same utterance ids.
    pub fn check_ids(&self, nbest: &NBestList) -> Result<()> {
        let ids: HashSet<&str> = nbest.ids().into_iter().collect();
        let missing_reference: Vec<String> = nbest
            .ids()
            .into_iter()
            .filter(|id| !self.0.contains_key(*id))
            .map(String::from)
            .collect();
        let missing_nbest: Vec<String> = self
            .0
            .keys()
            .filter(|id| !ids.contains(id.as_str()))
            .cloned()
            .collect();
        if missing_reference.is_empty() && missing_nbest.is_empty() {
            Ok(())
        } else {
            Err(Error::IdMismatch {
                missing_reference,
                missing_nbest,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
    pub ratio: f64,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum edit-distance alignment with unit costs. Among optimal
/// alignments the backtrace prefers substitution, then deletion, then
/// insertion.
pub fn wer_tokens<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerStats> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                s += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerStats {
        substitutions: s,
        insertions: ins,
        deletions: del,
        reference_len: n,
        ratio: d[n][m] as f64 / n as f64,
    })
}

/// Word error rate of whitespace-tokenized strings.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerStats> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer_tokens(&r, &h)
}

/// Errors and reference words summed over a test set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CorpusWer {
    pub errors: usize,
    pub reference_words: usize,
}

impl CorpusWer {
    pub fn add(&mut self, s: &WerStats) {
        self.errors += s.errors();
        self.reference_words += s.reference_len;
    }

    pub fn ratio(&self) -> f64 {
        self.errors as f64 / self.reference_words.max(1) as f64
    }
}

/// A sentence-level language model usable as a rescoring member.
#[derive(Debug, Clone)]
pub enum LanguageModel {
    /// Standard sentence score, `</s>` included.
    NGram(Arc<NGramModel>),
    Lstm(Arc<LstmLmParams>),
    /// Joint `log p(l, x)` under the stored `zeta`.
    Trf(Arc<TrfModel>),
}

impl LanguageModel {
    pub fn kind(&self) -> &'static str {
        match self {
            LanguageModel::NGram(_) => "ngram",
            LanguageModel::Lstm(_) => "lstm",
            LanguageModel::Trf(_) => "trf",
        }
    }

    /// `-inf` for sequences the model cannot generate.
    pub fn logprob(&self, x: &Sequence) -> f64 {
        match self {
            LanguageModel::NGram(m) => {
                if x.ids().iter().any(|&w| w as usize >= m.vocab_size()) {
                    f64::NEG_INFINITY
                } else {
                    m.logprob_sentence(x)
                }
            }
            LanguageModel::Lstm(m) => m.logprob(x),
            LanguageModel::Trf(m) => m.log_joint_or_neg_inf(x).unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// `sum_i w_i * lm_i + acoustic_weight * acoustic`. Zero-weight terms are
/// skipped, so a member's `-inf` only matters when it carries weight.
pub fn combine(
    weights: &[f64],
    lm_scores: &[f64],
    acoustic: Option<f64>,
    acoustic_weight: f64,
) -> f64 {
    let mut total = 0.0;
    for (&w, &s) in weights.iter().zip(lm_scores) {
        if w != 0.0 {
            total += w * s;
        }
    }
    if let Some(a) = acoustic {
        if acoustic_weight != 0.0 {
            total += acoustic_weight * a;
        }
    }
    total
}

/// Order of `scores` descending; ties keep the input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

#[derive(Debug, Clone)]
pub struct CombinedScorer {
    pub members: Vec<(String, LanguageModel, f64)>,
    pub acoustic_weight: f64,
    pub vocab: Arc<Vocabulary>,
    pub level: TokenLevel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedUtterance {
    pub id: String,
    /// Best first, with the combined score.
    pub ranked: Vec<(Hypothesis, f64)>,
}

impl RankedUtterance {
    pub fn best(&self) -> &Hypothesis {
        &self.ranked[0].0
    }
}

impl CombinedScorer {
    pub fn new(
        members: Vec<(String, LanguageModel, f64)>,
        acoustic_weight: f64,
        vocab: Arc<Vocabulary>,
        level: TokenLevel,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("a scorer needs at least one member".into()));
        }
        if let Some((name, _, w)) = members.iter().find(|(_, _, w)| !w.is_finite()) {
            return Err(Error::Config(format!("weight of member {name} is {w}")));
        }
        if !acoustic_weight.is_finite() {
            return Err(Error::Config("acoustic weight must be finite".into()));
        }
        Ok(Self {
            members,
            acoustic_weight,
            vocab,
            level,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|(_, _, w)| *w).collect()
    }

    pub fn encode(&self, text: &str) -> Result<Sequence> {
        self.vocab.encode(text, self.level, true, usize::MAX)
    }

    /// Per-member log-probabilities of one hypothesis.
    pub fn member_scores(&self, text: &str) -> Result<Vec<f64>> {
        let x = self.encode(text)?;
        Ok(self
            .members
            .iter()
            .map(|(_, lm, _)| lm.logprob(&x))
            .collect())
    }

    pub fn score_hypothesis(&self, text: &str, acoustic: Option<f64>) -> Result<f64> {
        let s = self.member_scores(text)?;
        Ok(combine(&self.weights(), &s, acoustic, self.acoustic_weight))
    }

    pub fn rescore(&self, nbest: &NBestList) -> Result<Vec<RankedUtterance>> {
        let table = ScoreTable::build(self, nbest)?;
        Ok(table.rank_all(&self.weights(), self.acoustic_weight))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUtterance {
    pub id: String,
    pub hypotheses: Vec<Hypothesis>,
    /// `lm_scores[h][i]`: member `i` on hypothesis `h`.
    pub lm_scores: Vec<Vec<f64>>,
}

/// Member scores of every hypothesis, computed once so that many weight
/// settings can be compared cheaply.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub member_names: Vec<String>,
    pub utterances: Vec<ScoredUtterance>,
}

impl ScoreTable {
    pub fn build(scorer: &CombinedScorer, nbest: &NBestList) -> Result<Self> {
        let utterances = nbest
            .utterances
            .par_iter()
            .map(|u| {
                let lm_scores = u
                    .hypotheses
                    .iter()
                    .map(|h| scorer.member_scores(&h.text))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ScoredUtterance {
                    id: u.id.clone(),
                    hypotheses: u.hypotheses.clone(),
                    lm_scores,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            member_names: scorer.members.iter().map(|(n, _, _)| n.clone()).collect(),
            utterances,
        })
    }

    pub fn rank_all(&self, weights: &[f64], acoustic_weight: f64) -> Vec<RankedUtterance> {
        self.utterances
            .iter()
            .map(|u| {
                let scores: Vec<f64> = u
                    .hypotheses
                    .iter()
                    .zip(&u.lm_scores)
                    .map(|(h, s)| combine(weights, s, h.acoustic, acoustic_weight))
                    .collect();
                RankedUtterance {
                    id: u.id.clone(),
                    ranked: ranking(&scores)
                        .into_iter()
                        .map(|i| (u.hypotheses[i].clone(), scores[i]))
                        .collect(),
                }
            })
            .collect()
    }

    pub fn wer(
        &self,
        weights: &[f64],
        acoustic_weight: f64,
        refs: &References,
    ) -> Result<CorpusWer> {
        let mut total = CorpusWer::default();
        for r in self.rank_all(weights, acoustic_weight) {
            let reference = refs.get(&r.id).ok_or_else(|| Error::IdMismatch {
                missing_reference: vec![r.id.clone()],
                missing_nbest: vec![],
            })?;
            total.add(&wer(reference, &r.best().text)?);
        }
        Ok(total)
    }
}

/// Points of the probability simplex in `k` dimensions whose coordinates are
/// multiples of `1 / steps`, in lexicographic order.
pub fn simplex_grid(k: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, steps: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / steps as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(k - 1, left - c, steps, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 {
        rec(k, steps, steps, &mut Vec::new(), &mut out);
    }
    out
}

/// Grid search over LM weights on the simplex with spacing `1 / steps`.
/// Returns the first weight vector reaching the lowest WER.
pub fn tune_weights(
    table: &ScoreTable,
    refs: &References,
    acoustic_weight: f64,
    steps: usize,
) -> Result<(Vec<f64>, CorpusWer)> {
    let mut best: Option<(Vec<f64>, CorpusWer)> = None;
    for w in simplex_grid(table.member_names.len(), steps) {
        let r = table.wer(&w, acoustic_weight, refs)?;
        if best.as_ref().is_none_or(|(_, b)| r.errors < b.errors) {
            best = Some((w, r));
        }
    }
    best.ok_or_else(|| Error::Config("no scorer members".into()))
}

/// One CSV row per single member plus the combination.
pub fn wer_report_csv(rows: &[(String, Vec<f64>, CorpusWer)]) -> String {
    let mut s = String::from("model,weights,errors,reference_words,wer\n");
    for (name, w, r) in rows {
        let ws: Vec<String> = w.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(
            s,
            "{name},{},{},{},{}",
            ws.join(" "),
            r.errors,
            r.reference_words,
            r.ratio()
        );
    }
    s
}

/// A random sparse first-order Markov source over pseudo-words, used to
/// build synthetic rescoring benchmarks whose true LM is known.
#[derive(Debug, Clone)]
pub struct SourceGrammar {
    pub words: Vec<String>,
    start: WeightedIndex<f64>,
    next: Vec<WeightedIndex<f64>>,
    end_prob: Vec<f64>,
    pub max_words: usize,
}

impl SourceGrammar {
    pub fn random<R: Rng + ?Sized>(
        n_words: usize,
        branching: usize,
        max_words: usize,
        rng: &mut R,
    ) -> Self {
        let words: Vec<String> = (0..n_words).map(|i| format!("w{i:02}")).collect();
        let sparse_row = |rng: &mut R| {
            let mut row = vec![0.0; n_words];
            for _ in 0..branching {
                row[rng.gen_range(0..n_words)] += rng.gen_range(0.2..1.0);
            }
            WeightedIndex::new(row).expect("positive weights")
        };
        let start = sparse_row(rng);
        let next = (0..n_words).map(|_| sparse_row(rng)).collect();
        let end_prob = (0..n_words).map(|_| rng.gen_range(0.1..0.5)).collect();
        Self {
            words,
            start,
            next,
            end_prob,
            max_words,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let mut w = self.start.sample(rng);
        let mut out = vec![self.words[w].as_str()];
        while out.len() < self.max_words && !rng.gen_bool(self.end_prob[w]) {
            w = self.next[w].sample(rng);
            out.push(&self.words[w]);
        }
        out.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub n_words: usize,
    pub branching: usize,
    pub max_words: usize,
    pub train_sentences: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub nbest: usize,
    pub max_edits: usize,
    /// Probability that the reference itself is among the hypotheses.
    pub oracle_rate: f64,
    /// Acoustic score is `-slope * edits + N(0, noise^2)`.
    pub acoustic_slope: f64,
    pub acoustic_noise: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_words: 20,
            branching: 3,
            max_words: 6,
            train_sentences: 2000,
            dev_utterances: 100,
            test_utterances: 100,
            nbest: 10,
            max_edits: 3,
            oracle_rate: 0.8,
            acoustic_slope: 1.0,
            acoustic_noise: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSplit {
    pub nbest: NBestList,
    pub references: References,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub grammar: SourceGrammar,
    pub train: Vec<String>,
    pub dev: BenchmarkSplit,
    pub test: BenchmarkSplit,
}

fn corrupt<R: Rng + ?Sized>(
    words: &[String],
    reference: &str,
    max_edits: usize,
    rng: &mut R,
) -> String {
    let mut toks: Vec<&str> = reference.split_whitespace().collect();
    for _ in 0..rng.gen_range(1..=max_edits.max(1)) {
        let w = words[rng.gen_range(0..words.len())].as_str();
        match rng.gen_range(0..3) {
            0 => {
                let i = rng.gen_range(0..toks.len());
                toks[i] = w;
            }
            1 => {
                let i = rng.gen_range(0..=toks.len());
                toks.insert(i, w);
            }
            _ if toks.len() > 1 => {
                toks.remove(rng.gen_range(0..toks.len()));
            }
            _ => toks.push(w),
        }
    }
    toks.join(" ")
}

fn make_split<R: Rng + ?Sized>(
    grammar: &SourceGrammar,
    cfg: &BenchmarkConfig,
    prefix: &str,
    n: usize,
    rng: &mut R,
) -> BenchmarkSplit {
    let noise = Normal::new(0.0, cfg.acoustic_noise).expect("finite noise scale");
    let mut utterances = Vec::with_capacity(n);
    let mut refs = BTreeMap::new();
    for u in 0..n {
        let id = format!("{prefix}{u:04}");
        let reference = grammar.sample(rng);
        let mut texts: Vec<String> = Vec::new();
        if rng.gen_bool(cfg.oracle_rate) {
            texts.push(reference.clone());
        }
        let mut attempts = 0;
        while texts.len() < cfg.nbest && attempts < 50 * cfg.nbest {
            attempts += 1;
            let h = corrupt(&grammar.words, &reference, cfg.max_edits, rng);
            if !texts.contains(&h) && h != reference {
                texts.push(h);
            }
        }
        let mut scored: Vec<(f64, String)> = texts
            .into_iter()
            .map(|t| {
                let edits = wer(&reference, &t).expect("nonempty reference").errors() as f64;
                (-cfg.acoustic_slope * edits + noise.sample(rng), t)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let hypotheses = scored
            .into_iter()
            .enumerate()
            .map(|(i, (a, text))| Hypothesis {
                rank: i + 1,
                acoustic: Some(a),
                text,
            })
            .collect();
        utterances.push(Utterance {
            id: id.clone(),
            hypotheses,
        });
        refs.insert(id, reference);
    }
    BenchmarkSplit {
        nbest: NBestList { utterances },
        references: References(refs),
    }
}

/// Training text plus dev and test N-best lists drawn from one random
/// [`SourceGrammar`].
pub fn generate_benchmark<R: Rng + ?Sized>(cfg: &BenchmarkConfig, rng: &mut R) -> Benchmark {
    let grammar = SourceGrammar::random(cfg.n_words, cfg.branching, cfg.max_words, rng);
    let train = (0..cfg.train_sentences)
        .map(|_| grammar.sample(rng))
        .collect();
    let dev = make_split(&grammar, cfg, "dev", cfg.dev_utterances, rng);
    let test = make_split(&grammar, cfg, "test", cfg.test_utterances, rng);
    Benchmark {
        grammar,
        train,
        dev,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::ngram::train_ngram;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap().ratio, 0.0);
        let s = wer("a b c", "a x c").unwrap();
        assert_eq!((s.substitutions, s.insertions, s.deletions), (1, 0, 0));
        assert!((s.ratio - 1.0 / 3.0).abs() < 1e-15);
        let s = wer("a b c", "a c").unwrap();
        assert_eq!((s.substitutions, s.insertions, s.deletions), (0, 0, 1));
        let s = wer("a", "x a y").unwrap();
        assert_eq!((s.substitutions, s.insertions, s.deletions), (0, 2, 0));
        assert_eq!(wer("a", "").unwrap().deletions, 1);
        assert!(matches!(wer("", "a"), Err(Error::EmptyReference)));
    }

    #[test]
    fn nbest_round_trip_and_validation() {
        let text = "u1 2 -3.5 a c\nu1 1 NA a b\nu2 1 0 \n";
        let nb = NBestList::parse(text).unwrap();
        assert_eq!(nb.utterances.len(), 2);
        assert_eq!(nb.utterances[0].hypotheses[0].text, "a b");
        assert_eq!(nb.utterances[0].hypotheses[1].acoustic, Some(-3.5));
        assert_eq!(nb.utterances[1].hypotheses[0].text, "");
        assert_eq!(NBestList::parse(&nb.to_text()).unwrap(), nb);
        assert!(NBestList::parse("u1 1 NA a\nu2 1 NA b\nu1 2 NA c\n").is_err());
        assert!(NBestList::parse("u1 1 NA a\nu1 1 NA b\n").is_err());
        assert!(NBestList::parse("u1 x NA a\n").is_err());
        assert!(NBestList::parse("u1 1 nan a\n").is_err());
    }

    #[test]
    fn reference_id_mismatch_lists_ids() {
        let nb = NBestList::parse("u1 1 NA a\nu2 1 NA b\n").unwrap();
        let refs = References::parse("u1 a\nu3 c\n").unwrap();
        match refs.check_ids(&nb) {
            Err(Error::IdMismatch {
                missing_reference,
                missing_nbest,
            }) => {
                assert_eq!(missing_reference, vec!["u2"]);
                assert_eq!(missing_nbest, vec!["u3"]);
            }
            other => panic!("{other:?}"),
        }
    }

    fn bigram_scorer(weights: &[f64]) -> CombinedScorer {
        let lines = ["a b", "a b", "a c", "b c"];
        let vocab =
            Arc::new(build_vocabulary(lines.iter().copied(), TokenLevel::Word, 1, None).unwrap());
        let data = vocab
            .encode_all(lines.iter().copied(), TokenLevel::Word, 10)
            .unwrap();
        let lm = LanguageModel::NGram(Arc::new(train_ngram(&data, 2, vocab.len()).unwrap()));
        let members = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (format!("m{i}"), lm.clone(), w))
            .collect();
        CombinedScorer::new(members, 0.0, vocab, TokenLevel::Word).unwrap()
    }

    #[test]
    fn single_member_equals_lm_and_halves_are_degenerate() {
        let one = bigram_scorer(&[1.0]);
        let x = one.encode("a b").unwrap();
        let LanguageModel::NGram(m) = &one.members[0].1 else {
            unreachable!()
        };
        assert_eq!(
            one.score_hypothesis("a b", None).unwrap(),
            m.logprob_sentence(&x)
        );
        let two = bigram_scorer(&[0.5, 0.5]);
        let a = two.score_hypothesis("a b", None).unwrap();
        assert!((a - m.logprob_sentence(&x)).abs() < 1e-12);
    }

    #[test]
    fn rescore_is_stable_on_ties() {
        let s = bigram_scorer(&[0.0]);
        let nb = NBestList::parse("u 1 NA c a\nu 2 NA a b\nu 3 NA b\n").unwrap();
        let r = s.rescore(&nb).unwrap();
        let ranks: Vec<usize> = r[0].ranked.iter().map(|(h, _)| h.rank).collect();
        assert_eq!(ranks, vec![1, 2, 3]);
        let s = bigram_scorer(&[1.0]);
        let r = s.rescore(&nb).unwrap();
        assert_eq!(r[0].best().text, "a b");
    }

    #[test]
    fn simplex_grid_counts() {
        assert_eq!(simplex_grid(1, 10), vec![vec![1.0]]);
        assert_eq!(simplex_grid(2, 10).len(), 11);
        let g = simplex_grid(3, 10);
        assert_eq!(g.len(), 66);
        assert!(g
            .iter()
            .all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn benchmark_is_reproducible_and_well_formed() {
        let cfg = BenchmarkConfig {
            train_sentences: 50,
            dev_utterances: 5,
            test_utterances: 5,
            ..Default::default()
        };
        let a = generate_benchmark(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = generate_benchmark(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        a.dev.references.check_ids(&a.dev.nbest).unwrap();
        for u in &a.test.nbest.utterances {
            assert!(!u.hypotheses.is_empty() && u.hypotheses.len() <= cfg.nbest);
            let ac: Vec<f64> = u.hypotheses.iter().map(|h| h.acoustic.unwrap()).collect();
            assert!(ac.windows(2).all(|w| w[0] >= w[1]));
        }
        assert_eq!(
            NBestList::parse(&a.dev.nbest.to_text()).unwrap(),
            a.dev.nbest
        );
    }
}
