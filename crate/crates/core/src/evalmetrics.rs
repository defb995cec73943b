//! Quality and diversity metrics: BLEU, ROUGE-L, distinct-n, self-BLEU,
//! and diverse-4.
//!
//! BLEU uses clipped modified n-gram precisions with add-epsilon smoothing
//! (a zero match count scores eps / total, an empty order scores eps) and
//! the usual brevity penalty against the closest reference length. All
//! metrics are pure functions over token slices and land in [0, 1].

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

/// Smoothing floor for zero n-gram matches.
pub const BLEU_EPS: f64 = 1e-9;

#[derive(Debug)]
pub enum MetricsError {
    /// The operation was called outside its stated domain.
    Contract(String),
}

impl std::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricsError::Contract(d) => write!(f, "{}", d),
        }
    }
}

impl std::error::Error for MetricsError {}

fn ngram_counts<T: Eq + Hash + Clone>(text: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if text.len() >= n {
        for w in text.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision at one order: matches are clipped per gram to
/// the highest count any reference allows. Returns (matched, total).
fn clipped_matches<T: Eq + Hash + Clone>(hyp: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let total = hyp.len().saturating_sub(n - 1);
    if total == 0 {
        return (0, 0);
    }
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts: Vec<HashMap<Vec<T>, usize>> = refs.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matched = 0;
    for (gram, &count) in &hyp_counts {
        let clip = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
        matched += count.min(clip);
    }
    (matched, total)
}

/// Sentence BLEU against several references. The brevity penalty compares
/// against the reference length closest to the hypothesis (ties to the
/// shorter reference).
pub fn bleu_multi<T: Eq + Hash + Clone>(hyp: &[T], refs: &[&[T]], max_n: usize) -> Result<f64, MetricsError> {
    if max_n < 1 {
        return Err(MetricsError::Contract("bleu needs max_n >= 1".to_string()));
    }
    if refs.is_empty() || refs.iter().any(|r| r.is_empty()) {
        return Err(MetricsError::Contract("bleu needs non-empty references".to_string()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        let (matched, total) = clipped_matches(hyp, refs, n);
        let p = if total == 0 {
            BLEU_EPS
        } else if matched == 0 {
            BLEU_EPS / total as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let h = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| (rl.abs_diff(h), rl))
        .expect("at least one reference");
    let bp = if h >= r { 1.0 } else { (1.0 - r as f64 / h as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Sentence BLEU against a single reference.
pub fn bleu<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], max_n: usize) -> Result<f64, MetricsError> {
    bleu_multi(hyp, &[reference], max_n)
}

/// Corpus BLEU: n-gram matches and lengths pool over all pairs before the
/// geometric mean and a single corpus-level brevity penalty.
pub fn bleu_corpus<T: Eq + Hash + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
) -> Result<f64, MetricsError> {
    if max_n < 1 {
        return Err(MetricsError::Contract("bleu needs max_n >= 1".to_string()));
    }
    if hyps.len() != refs.len() {
        return Err(MetricsError::Contract(format!("{} hypotheses against {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(MetricsError::Contract("corpus bleu needs at least one pair".to_string()));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(MetricsError::Contract("bleu needs non-empty references".to_string()));
    }
    if hyps.iter().all(|h| h.is_empty()) {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let (m, t) = clipped_matches(h, &[r.as_slice()], n);
            matched += m;
            total += t;
        }
        let p = if total == 0 {
            BLEU_EPS
        } else if matched == 0 {
            BLEU_EPS / total as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let h: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if h >= r { 1.0 } else { (1.0 - r as f64 / h as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// ROUGE-L: longest-common-subsequence F-measure. Empty input or an empty
/// intersection scores 0.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (n, m) = (hyp.len(), reference.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    for i in 1..=n {
        for j in 1..=m {
            dp[i * (m + 1) + j] = if hyp[i - 1] == reference[j - 1] {
                dp[(i - 1) * (m + 1) + j - 1] + 1
            } else {
                dp[(i - 1) * (m + 1) + j].max(dp[i * (m + 1) + j - 1])
            };
        }
    }
    let lcs = dp[n * (m + 1) + m];
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / n as f64;
    let r = lcs as f64 / m as f64;
    2.0 * p * r / (p + r)
}

/// Distinct-n pooled over the whole text set: unique n-grams over total
/// n-grams, 0 when no n-grams exist.
pub fn distinct_n<T: Eq + Hash + Clone>(texts: &[Vec<T>], n: usize) -> Result<f64, MetricsError> {
    if n < 1 {
        return Err(MetricsError::Contract("distinct-n needs n >= 1".to_string()));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        if t.len() >= n {
            for w in t.windows(n) {
                unique.insert(w.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Self-BLEU: each text scored against all the others as references, then
/// averaged. High values mean the set repeats itself.
pub fn self_bleu<T: Eq + Hash + Clone>(texts: &[Vec<T>]) -> Result<f64, MetricsError> {
    if texts.len() < 2 {
        return Err(MetricsError::Contract("self-bleu needs at least two texts".to_string()));
    }
    let mut sum = 0.0f64;
    for (i, hyp) in texts.iter().enumerate() {
        let refs: Vec<&[T]> = texts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, t)| t.as_slice())
            .collect();
        sum += bleu_multi(hyp, &refs, 4)?;
    }
    Ok(sum / texts.len() as f64)
}

/// Diverse-4: unique 4-grams pooled over the set divided by total words
/// pooled; 0 when fewer than four words exist anywhere.
pub fn diverse_4<T: Eq + Hash + Clone>(texts: &[Vec<T>]) -> f64 {
    let words: usize = texts.iter().map(Vec::len).sum();
    if words < 4 {
        return 0.0;
    }
    let mut unique = HashSet::new();
    for t in texts {
        if t.len() >= 4 {
            for w in t.windows(4) {
                unique.insert(w.to_vec());
            }
        }
    }
    unique.len() as f64 / words as f64
}

/// The combined evaluation over aligned hypothesis/reference files, with
/// optional per-condition sample groups for the diversity side.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Mean sentence-level BLEU (the headline quality number).
    pub bleu: f64,
    /// Corpus-level BLEU, reported alongside since conventions differ.
    pub bleu_corpus: f64,
    pub rouge_l: f64,
    pub dist_1: f64,
    pub self_bleu: f64,
    pub diverse_4: f64,
    /// Evaluated hypothesis/reference pairs.
    pub pairs: usize,
    /// Diversity groups the self-BLEU / diverse-4 means ran over.
    pub groups: usize,
}

impl MetricReport {
    /// Quality metrics come from the aligned pairs. Diversity metrics come
    /// from `samples` (several generations per condition) when given;
    /// otherwise the hypothesis set is treated as one group, or skipped as
    /// zero when it has fewer than two members. Empty generations stay in
    /// the quality pass (scoring zero) but are left out of each group's
    /// self-BLEU pool, since an empty text cannot act as a reference.
    pub fn compute(
        hyps: &[Vec<String>],
        refs: &[Vec<String>],
        samples: Option<&[Vec<Vec<String>>]>,
    ) -> Result<MetricReport, MetricsError> {
        if hyps.len() != refs.len() {
            return Err(MetricsError::Contract(format!(
                "{} hypotheses against {} references",
                hyps.len(),
                refs.len()
            )));
        }
        if hyps.is_empty() {
            return Err(MetricsError::Contract("nothing to evaluate".to_string()));
        }
        let mut bleu_sum = 0.0;
        let mut rouge_sum = 0.0;
        for (h, r) in hyps.iter().zip(refs) {
            bleu_sum += bleu(h, r, 4)?;
            rouge_sum += rouge_l(h, r);
        }
        let dist_1 = distinct_n(hyps, 1)?;
        let groups: Vec<&[Vec<String>]> = match samples {
            Some(gs) => gs.iter().map(|g| g.as_slice()).collect(),
            None => vec![hyps],
        };
        let mut sb_sum = 0.0;
        let mut d4_sum = 0.0;
        let mut counted = 0usize;
        for g in &groups {
            if g.len() >= 2 {
                let filled: Vec<Vec<String>> = g.iter().filter(|t| !t.is_empty()).cloned().collect();
                if filled.len() >= 2 {
                    sb_sum += self_bleu(&filled)?;
                }
                d4_sum += diverse_4(g);
                counted += 1;
            }
        }
        let (self_bleu, diverse_4) = if counted > 0 {
            (sb_sum / counted as f64, d4_sum / counted as f64)
        } else {
            (0.0, 0.0)
        };
        Ok(MetricReport {
            bleu: bleu_sum / hyps.len() as f64,
            bleu_corpus: bleu_corpus(hyps, refs, 4)?,
            rouge_l: rouge_sum / hyps.len() as f64,
            dist_1,
            self_bleu,
            diverse_4,
            pairs: hyps.len(),
            groups: counted,
        })
    }

    /// Human-readable table followed by a machine-readable block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        let rows = [
            ("bleu", self.bleu),
            ("bleu_corpus", self.bleu_corpus),
            ("rouge_l", self.rouge_l),
            ("dist_1", self.dist_1),
            ("self_bleu", self.self_bleu),
            ("diverse_4", self.diverse_4),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{:<12} {:>10.6}", k, v);
        }
        let _ = writeln!(s, "pairs={} groups={}", self.pairs, self.groups);
        let _ = writeln!(s);
        for (k, v) in rows {
            let _ = writeln!(s, "{}={:.6}", k, v);
        }
        s
    }
}
