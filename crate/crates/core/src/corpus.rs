//! Text ingestion: vocabularies, sequence encoding and length statistics.
//!
//! Every sequence handled by the models carries explicit boundary symbols,
//! and its length `l` counts them: the word `cat` encodes to
//! `<s> c a t </s>` with `l = 5`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BEGIN: &str = "<s>";
pub const END: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const BEGIN_ID: u32 = 0;
pub const END_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

/// Number of reserved ids at the front of every vocabulary.
pub const RESERVED: usize = 3;

/// Bundled short-word list used by the morphology pilot.
pub const SHORT_WORDS: &str = include_str!("../data/short_words.txt");
/// Training split of [`SHORT_WORDS`], one word per line.
pub const PILOT_TRAIN: &str = include_str!("../data/pilot_train.txt");
/// Validation split of [`SHORT_WORDS`], one word per line.
pub const PILOT_VALID: &str = include_str!("../data/pilot_valid.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenLevel {
    #[default]
    Word,
    Char,
}

impl TokenLevel {
    pub fn tokenize<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            TokenLevel::Word => line.split_whitespace().collect(),
            TokenLevel::Char => line
                .char_indices()
                .filter(|(_, c)| !c.is_whitespace())
                .map(|(i, c)| &line[i..i + c.len_utf8()])
                .collect(),
        }
    }
}

/// Bidirectional symbol/id map. Ids 0, 1, 2 are begin, end and unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw symbols, reserved ids first.
    pub fn from_symbols<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = vec![BEGIN.into(), END.into(), UNK.into()];
        all.extend(symbols.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < RESERVED {
            return Err(Error::Format(format!(
                "vocabulary needs at least {RESERVED} symbols, got {}",
                symbols.len()
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of symbols allowed strictly inside a sequence (everything but
    /// begin and end).
    pub fn payload_size(&self) -> usize {
        self.symbols.len() - 2
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Encodes one line. Unknown tokens map to `<unk>`.
    pub fn encode(
        &self,
        line: &str,
        level: TokenLevel,
        attach_boundaries: bool,
        max_len: usize,
    ) -> Result<Sequence> {
        let tokens = level.tokenize(line);
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if attach_boundaries {
            ids.push(BEGIN_ID);
        }
        ids.extend(tokens.iter().map(|t| self.id(t)));
        if attach_boundaries {
            ids.push(END_ID);
        }
        if ids.len() > max_len {
            return Err(Error::TooLong {
                line: line.to_string(),
                len: ids.len(),
                max: max_len,
            });
        }
        Sequence::new(ids)
    }

    pub fn encode_all<'a, I>(
        &self,
        lines: I,
        level: TokenLevel,
        max_len: usize,
    ) -> Result<Vec<Sequence>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        lines
            .into_iter()
            .map(|l| self.encode(l, level, true, max_len))
            .collect()
    }

    /// Inverse of [`Vocabulary::encode`] for in-vocabulary text. Boundary
    /// symbols are dropped.
    pub fn decode(&self, seq: &Sequence, level: TokenLevel) -> String {
        let sep = match level {
            TokenLevel::Word => " ",
            TokenLevel::Char => "",
        };
        let mut out = String::new();
        for &id in seq.ids() {
            if id == BEGIN_ID || id == END_ID {
                continue;
            }
            if !out.is_empty() {
                out.push_str(sep);
            }
            out.push_str(self.symbol(id).unwrap_or(UNK));
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.symbols {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    /// Reads the one-symbol-per-line format. The first three lines name the
    /// begin, end and unknown symbols.
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut symbols = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                continue;
            }
            symbols.push(line.to_string());
        }
        Self::from_full_list(symbols)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols {
            let _ = writeln!(s, "{sym}");
        }
        s
    }
}

/// Builds a vocabulary from corpus lines.
///
/// Symbols seen fewer than `min_count` times are left out (they encode to
/// `<unk>`). Ordering is by descending count, ties broken lexicographically,
/// so the result does not depend on hash iteration order. `max_size` caps the
/// number of non-reserved symbols.
pub fn build_vocabulary<'a, I>(
    lines: I,
    level: TokenLevel,
    min_count: usize,
    max_size: Option<usize>,
) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n_lines = 0usize;
    for line in lines {
        n_lines += 1;
        for tok in level.tokenize(line) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if n_lines == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && ![BEGIN, END, UNK].contains(t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(cap) = max_size {
        entries.truncate(cap);
    }
    Vocabulary::from_symbols(entries.into_iter().map(|(t, _)| t))
}

/// A token-id sequence. `len()` counts every id including boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence {
    ids: Vec<u32>,
}

impl Sequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self { ids })
    }

    /// `<s> payload </s>`.
    pub fn with_boundaries(payload: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(payload.len() + 2);
        ids.push(BEGIN_ID);
        ids.extend_from_slice(payload);
        ids.push(END_ID);
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_boundaries(&self) -> bool {
        self.ids.len() >= 2 && self.ids[0] == BEGIN_ID && self.ids[self.ids.len() - 1] == END_ID
    }

    /// Symbols between the boundaries.
    pub fn payload(&self) -> &[u32] {
        if self.has_boundaries() {
            &self.ids[1..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }

    pub fn check(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() > max_len {
            return Err(Error::LengthOutOfRange {
                len: self.ids.len(),
                max: max_len,
            });
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::SymbolOutOfRange {
                id,
                size: vocab_size,
            });
        }
        Ok(())
    }
}

/// Prior over lengths `1..=m`, stored at index `l - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthPrior {
    probs: Vec<f64>,
}

impl LengthPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Format("length prior is empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Format(
                "length prior has a negative or non-finite entry".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Format(format!(
                "length prior sums to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn max_len(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, len: usize) -> f64 {
        if len == 0 {
            return 0.0;
        }
        self.probs.get(len - 1).copied().unwrap_or(0.0)
    }

    pub fn log_prob(&self, len: usize) -> f64 {
        self.prob(len).ln()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Lengths with nonzero prior mass, ascending.
    pub fn support(&self) -> Vec<usize> {
        (1..=self.probs.len())
            .filter(|&l| self.prob(l) > 0.0)
            .collect()
    }
}

/// Relative frequency of each length. Absent lengths keep probability 0.
pub fn empirical_length_prior(dataset: &[Sequence], max_len: usize) -> Result<LengthPrior> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0usize; max_len];
    for seq in dataset {
        if seq.is_empty() || seq.len() > max_len {
            return Err(Error::LengthOutOfRange {
                len: seq.len(),
                max: max_len,
            });
        }
        counts[seq.len() - 1] += 1;
    }
    let total = dataset.len() as f64;
    LengthPrior::new(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Lower-cased alphabetic words of at most `max_chars` characters, deduplicated
/// and sorted.
pub fn extract_short_words(text: &str, max_chars: usize) -> Vec<String> {
    let mut words: Vec<String> = text
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty() && w.len() <= max_chars)
        .map(|w| w.to_ascii_lowercase())
        .collect();
    words.sort();
    words.dedup();
    words
}

/// Deterministic split: every `every`-th word (1-based position divisible by
/// `every`) goes to the validation side.
pub fn split_train_valid(words: &[String], every: usize) -> (Vec<String>, Vec<String>) {
    let every = every.max(2);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if (i + 1) % every == 0 {
            valid.push(w.clone());
        } else {
            train.push(w.clone());
        }
    }
    (train, valid)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Pilot corpus lines (train, valid) from the bundled list.
pub fn pilot_lines() -> (Vec<&'static str>, Vec<&'static str>) {
    let split = |s: &'static str| s.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    (split(PILOT_TRAIN), split(PILOT_VALID))
}
