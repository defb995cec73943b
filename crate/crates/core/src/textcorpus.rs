//! Corpus handling: vocabularies, tokenization, and token self-information.
//!
//! Ids 0..3 are reserved for PAD, CLS, SEP and UNK in that order. Content
//! tokens are assigned ids in order of first appearance in the corpus, which
//! makes vocabulary construction deterministic. Self-information uses
//! add-one smoothing: H(w) = -log2((count(w) + 1) / (N + V)) bits, where N
//! is the stream length and V the full vocabulary size.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;

/// Display forms of the reserved tokens, in id order.
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Marker appended to the last symbol of a word when learning merge rules,
/// so word boundaries survive subword segmentation.
const WORD_END: &str = "</w>";

#[derive(Debug)]
pub enum CorpusError {
    /// Bad caller input: empty corpus, empty sentence, id out of range.
    Input(String),
    /// A file did not match its expected line format.
    Parse { line: usize, detail: String },
    Io(std::io::Error),
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::Input(d) => write!(f, "{}", d),
            CorpusError::Parse { line, detail } => write!(f, "line {}: {}", line, detail),
            CorpusError::Io(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for CorpusError {}

impl From<std::io::Error> for CorpusError {
    fn from(e: std::io::Error) -> Self {
        CorpusError::Io(e)
    }
}

/// How raw text is split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    Whitespace,
    Char,
    /// Byte-pair encoding with this many learned merges.
    Bpe { merges: usize },
}

impl TokenizerMode {
    pub fn name(&self) -> &'static str {
        match self {
            TokenizerMode::Whitespace => "whitespace",
            TokenizerMode::Char => "char",
            TokenizerMode::Bpe { .. } => "bpe",
        }
    }
}

/// Token <-> id bijection plus whatever state tokenization needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mode: TokenizerMode,
    /// Learned merge rules in application order (BPE mode only).
    merges: Vec<(String, String)>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED_TOKENS.len()
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    fn with_reserved(mode: TokenizerMode) -> Vocab {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new(), mode, merges: Vec::new() };
        for t in RESERVED_TOKENS {
            v.intern(t);
        }
        v
    }
}

/// Splits a word into BPE start symbols: one per char, last char carrying
/// the word-end marker.
fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == n { format!("{}{}", c, WORD_END) } else { c.to_string() })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let joined = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = joined;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Learns merge rules from word frequencies. Ties in pair frequency go to
/// the lexicographically smallest pair, so the result does not depend on
/// hash iteration order.
fn learn_merges(word_freq: &BTreeMap<String, u64>, merges: usize) -> (Vec<(String, String)>, BTreeMap<String, Vec<String>>) {
    let mut segmented: BTreeMap<String, Vec<String>> =
        word_freq.keys().map(|w| (w.clone(), word_symbols(w))).collect();
    let mut rules = Vec::new();
    for _ in 0..merges {
        let mut pair_freq: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (word, symbols) in &segmented {
            let freq = word_freq[word];
            for pair in symbols.windows(2) {
                *pair_freq.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += freq;
            }
        }
        let best = pair_freq.iter().fold(None::<(&(String, String), u64)>, |best, (pair, &count)| match best {
            Some((_, best_count)) if best_count >= count => best,
            _ => Some((pair, count)),
        });
        let (left, right) = match best {
            Some((pair, count)) if count > 0 => pair.clone(),
            _ => break,
        };
        for symbols in segmented.values_mut() {
            apply_merge(symbols, &left, &right);
        }
        rules.push((left, right));
    }
    (rules, segmented)
}

/// Builds a deterministic vocabulary over a paired corpus.
pub fn build_vocab(pairs: &[(String, String)], mode: TokenizerMode) -> Result<Vocab, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::Input("cannot build a vocabulary from an empty corpus".to_string()));
    }
    let mut vocab = Vocab::with_reserved(mode);
    match mode {
        TokenizerMode::Whitespace => {
            for (src, tgt) in pairs {
                for side in [src, tgt] {
                    for w in side.split_whitespace() {
                        vocab.intern(w);
                    }
                }
            }
        }
        TokenizerMode::Char => {
            for (src, tgt) in pairs {
                for side in [src, tgt] {
                    for c in side.chars() {
                        vocab.intern(&c.to_string());
                    }
                }
            }
        }
        TokenizerMode::Bpe { merges } => {
            let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
            for (src, tgt) in pairs {
                for side in [src, tgt] {
                    for w in side.split_whitespace() {
                        *word_freq.entry(w.to_string()).or_insert(0) += 1;
                    }
                }
            }
            let (rules, segmented) = learn_merges(&word_freq, merges);
            vocab.merges = rules;
            // Intern symbols in corpus appearance order, not map order.
            for (src, tgt) in pairs {
                for side in [src, tgt] {
                    for w in side.split_whitespace() {
                        for sym in &segmented[w] {
                            vocab.intern(sym);
                        }
                    }
                }
            }
        }
    }
    Ok(vocab)
}

/// Maps text to token ids. Tokens outside the vocabulary become UNK.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    match vocab.mode {
        TokenizerMode::Whitespace => text
            .split_whitespace()
            .map(|w| vocab.id(w).unwrap_or(UNK))
            .collect(),
        TokenizerMode::Char => text
            .chars()
            .map(|c| vocab.id(&c.to_string()).unwrap_or(UNK))
            .collect(),
        TokenizerMode::Bpe { .. } => {
            let mut ids = Vec::new();
            for w in text.split_whitespace() {
                let mut symbols = word_symbols(w);
                for (left, right) in &vocab.merges {
                    apply_merge(&mut symbols, left, right);
                }
                for sym in symbols {
                    ids.push(vocab.id(&sym).unwrap_or(UNK));
                }
            }
            ids
        }
    }
}

/// Inverse of `tokenize` up to tokenizer granularity. Round-trips exactly in
/// whitespace and char modes for single-spaced sentences.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    match vocab.mode {
        TokenizerMode::Whitespace => ids
            .iter()
            .map(|&id| vocab.token(id))
            .collect::<Vec<_>>()
            .join(" "),
        TokenizerMode::Char => ids.iter().map(|&id| vocab.token(id)).collect(),
        TokenizerMode::Bpe { .. } => {
            let glued: String = ids.iter().map(|&id| vocab.token(id)).collect();
            glued
                .split(WORD_END)
                .filter(|w| !w.is_empty())
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

/// Per-token self-information over a corpus stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTable {
    h_bits: Vec<f64>,
    counts: Vec<u64>,
    total: u64,
}

impl EntropyTable {
    /// Self-information of a token in bits.
    pub fn h(&self, id: usize) -> f64 {
        self.h_bits[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    /// Stream length the table was counted over.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.h_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_bits.is_empty()
    }

    fn from_counts(counts: Vec<u64>) -> EntropyTable {
        let total: u64 = counts.iter().sum();
        let v = counts.len() as f64;
        let h_bits = counts
            .iter()
            .map(|&c| -(((c + 1) as f64) / (total as f64 + v)).log2())
            .collect();
        EntropyTable { h_bits, counts, total }
    }
}

/// Counts a token stream and derives smoothed self-information for every
/// vocabulary entry, including ones the stream never uses.
pub fn self_information(stream: &[usize], vocab: &Vocab) -> Result<EntropyTable, CorpusError> {
    let mut counts = vec![0u64; vocab.size()];
    for &id in stream {
        if id >= vocab.size() {
            return Err(CorpusError::Input(format!("token id {} out of range for vocab of {}", id, vocab.size())));
        }
        counts[id] += 1;
    }
    Ok(EntropyTable::from_counts(counts))
}

/// Positionwise self-information of one sentence, with summary statistics
/// over its content (non-reserved) positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceProfile {
    pub h: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Positions holding PAD/CLS/SEP/UNK, excluded from the statistics.
    pub reserved: Vec<bool>,
}

impl SentenceProfile {
    /// Builds a profile from raw per-position H values. Statistics cover the
    /// non-reserved positions; a profile with no content positions gets
    /// all-zero statistics.
    pub fn from_h(h: Vec<f64>, reserved: Vec<bool>) -> SentenceProfile {
        assert_eq!(h.len(), reserved.len(), "h and reserved flags must line up");
        let content: Vec<f64> = h.iter().zip(&reserved).filter(|(_, &r)| !r).map(|(&v, _)| v).collect();
        let (mean, max, min) = if content.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let mean = content.iter().sum::<f64>() / content.len() as f64;
            let max = content.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = content.iter().cloned().fold(f64::INFINITY, f64::min);
            (mean, max, min)
        };
        SentenceProfile { h, mean, max, min, reserved }
    }
}

/// Profiles a sentence against an entropy table. Empty sentences are
/// rejected.
pub fn sentence_profile(ids: &[usize], table: &EntropyTable) -> Result<SentenceProfile, CorpusError> {
    if ids.is_empty() {
        return Err(CorpusError::Input("cannot profile an empty sentence".to_string()));
    }
    let mut h = Vec::with_capacity(ids.len());
    let mut reserved = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= table.len() {
            return Err(CorpusError::Input(format!("token id {} out of range for table of {}", id, table.len())));
        }
        h.push(table.h(id));
        reserved.push(Vocab::is_reserved(id));
    }
    Ok(SentenceProfile::from_h(h, reserved))
}

/// Reads a paired corpus: UTF-8, one `source<TAB>target` pair per line.
pub fn load_pairs(path: &Path) -> Result<Vec<(String, String)>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((src, tgt)) => pairs.push((src.to_string(), tgt.to_string())),
            None => {
                return Err(CorpusError::Parse { line: i + 1, detail: "expected source<TAB>target".to_string() })
            }
        }
    }
    Ok(pairs)
}

/// Renders a vocabulary: mode header, merge rules, then one token per line.
pub fn vocab_to_string(vocab: &Vocab) -> String {
    let mut out = String::new();
    out.push_str(&format!("mode {}\n", vocab.mode.name()));
    out.push_str(&format!("merges {}\n", vocab.merges.len()));
    for (l, r) in &vocab.merges {
        out.push_str(&format!("{}\t{}\n", l, r));
    }
    out.push_str(&format!("tokens {}\n", vocab.tokens.len()));
    for t in &vocab.tokens {
        out.push_str(t);
        out.push('\n');
    }
    out
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<(), CorpusError> {
    fs::write(path, vocab_to_string(vocab))?;
    Ok(())
}

pub fn vocab_from_str(text: &str) -> Result<Vocab, CorpusError> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, &str), CorpusError> {
        lines.next().ok_or_else(|| CorpusError::Parse { line: 0, detail: format!("missing {}", what) })
    };
    let (ln, mode_line) = next("mode header")?;
    let mode_name = mode_line.strip_prefix("mode ").ok_or(CorpusError::Parse {
        line: ln + 1,
        detail: "expected 'mode <name>'".to_string(),
    })?;
    let (ln, merges_line) = next("merges header")?;
    let n_merges: usize = merges_line
        .strip_prefix("merges ")
        .and_then(|s| s.parse().ok())
        .ok_or(CorpusError::Parse { line: ln + 1, detail: "expected 'merges <count>'".to_string() })?;
    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let (ln, line) = next("merge rule")?;
        let (l, r) = line.split_once('\t').ok_or(CorpusError::Parse {
            line: ln + 1,
            detail: "expected 'left<TAB>right'".to_string(),
        })?;
        merges.push((l.to_string(), r.to_string()));
    }
    let (ln, tokens_line) = next("tokens header")?;
    let n_tokens: usize = tokens_line
        .strip_prefix("tokens ")
        .and_then(|s| s.parse().ok())
        .ok_or(CorpusError::Parse { line: ln + 1, detail: "expected 'tokens <count>'".to_string() })?;
    let mode = match mode_name {
        "whitespace" => TokenizerMode::Whitespace,
        "char" => TokenizerMode::Char,
        "bpe" => TokenizerMode::Bpe { merges: n_merges },
        other => {
            return Err(CorpusError::Parse { line: 1, detail: format!("unknown tokenizer mode '{}'", other) })
        }
    };
    let mut vocab = Vocab { tokens: Vec::new(), index: HashMap::new(), mode, merges };
    for _ in 0..n_tokens {
        let (ln, line) = next("token")?;
        if vocab.index.contains_key(line) {
            return Err(CorpusError::Parse { line: ln + 1, detail: format!("duplicate token '{}'", line) });
        }
        vocab.intern(line);
    }
    for (id, want) in RESERVED_TOKENS.iter().enumerate() {
        if vocab.tokens.get(id).map(String::as_str) != Some(*want) {
            return Err(CorpusError::Parse { line: 0, detail: format!("reserved token {} missing or misplaced", want) });
        }
    }
    Ok(vocab)
}

pub fn load_vocab(path: &Path) -> Result<Vocab, CorpusError> {
    vocab_from_str(&fs::read_to_string(path)?)
}

/// Renders the entropy table: `token<TAB>count<TAB>H` with H in bits to six
/// decimal places, one vocabulary entry per line in id order.
pub fn entropy_to_string(table: &EntropyTable, vocab: &Vocab) -> Result<String, CorpusError> {
    if table.len() != vocab.size() {
        return Err(CorpusError::Input(format!("table covers {} ids, vocab has {}", table.len(), vocab.size())));
    }
    let mut out = String::new();
    for id in 0..table.len() {
        out.push_str(&format!("{}\t{}\t{:.6}\n", vocab.token(id), table.count(id), table.h(id)));
    }
    Ok(out)
}

pub fn save_entropy(path: &Path, table: &EntropyTable, vocab: &Vocab) -> Result<(), CorpusError> {
    fs::write(path, entropy_to_string(table, vocab)?)?;
    Ok(())
}

/// Parses an entropy table back. H is recomputed from the exact counts; the
/// printed column is only cross-checked.
pub fn entropy_from_str(text: &str, vocab: &Vocab) -> Result<EntropyTable, CorpusError> {
    let mut counts = vec![0u64; vocab.size()];
    let mut printed = vec![0.0f64; vocab.size()];
    let mut seen = 0usize;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let (tok, count, h) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(t), Some(c), Some(h), None) => (t, c, h),
            _ => {
                return Err(CorpusError::Parse { line: i + 1, detail: "expected token<TAB>count<TAB>H".to_string() })
            }
        };
        let id = vocab.id(tok).ok_or_else(|| CorpusError::Parse {
            line: i + 1,
            detail: format!("token '{}' not in vocabulary", tok),
        })?;
        counts[id] = count
            .parse()
            .map_err(|_| CorpusError::Parse { line: i + 1, detail: format!("bad count '{}'", count) })?;
        printed[id] = h
            .parse()
            .map_err(|_| CorpusError::Parse { line: i + 1, detail: format!("bad H '{}'", h) })?;
        seen += 1;
    }
    if seen != vocab.size() {
        return Err(CorpusError::Parse { line: 0, detail: format!("{} entries for a vocab of {}", seen, vocab.size()) });
    }
    let table = EntropyTable::from_counts(counts);
    for id in 0..table.len() {
        if (table.h(id) - printed[id]).abs() > 1e-5 {
            return Err(CorpusError::Parse {
                line: id + 1,
                detail: format!("H column {} disagrees with recomputed {:.6}", printed[id], table.h(id)),
            });
        }
    }
    Ok(table)
}

pub fn load_entropy(path: &Path, vocab: &Vocab) -> Result<EntropyTable, CorpusError> {
    entropy_from_str(&fs::read_to_string(path)?, vocab)
}

/// Rebuilds a table from raw counts, as stored in checkpoints.
pub fn entropy_from_counts(counts: Vec<u64>) -> EntropyTable {
    EntropyTable::from_counts(counts)
}
