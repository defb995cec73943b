//! Reverse-process generation: a strided denoising loop with the source
//! half anchored to its clean embeddings, optional self-conditioning,
//! nearest-embedding word rounding, MBR candidate selection, and a decode
//! order trace that records when each position settled.
//!
//! Inference never knows the target words, so schedule tables passed here
//! should be built with zero entropy shaping for every position; any
//! entropy-aware behaviour the model has lives in its weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{DenoiseRunner, DenoiserError, ModelParams};
use crate::diffusion::{posterior_between, DiffusionError, EmbeddingTable, PairedBatch};
use crate::evalmetrics::bleu;
use crate::numcore::Tensor;
use crate::schedules::AlphaBarTable;
use crate::textcorpus::{EntropyTable, Vocab, UNK};

#[derive(Debug)]
pub enum SamplerError {
    /// The operation was called outside its stated domain.
    Contract(String),
    /// Malformed trace text.
    Format(String),
    Denoiser(DenoiserError),
    Diffusion(DiffusionError),
}

impl std::fmt::Display for SamplerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplerError::Contract(d) => write!(f, "{}", d),
            SamplerError::Format(d) => write!(f, "bad trace: {}", d),
            SamplerError::Denoiser(e) => write!(f, "denoiser: {}", e),
            SamplerError::Diffusion(e) => write!(f, "diffusion: {}", e),
        }
    }
}

impl std::error::Error for SamplerError {}

impl From<DenoiserError> for SamplerError {
    fn from(e: DenoiserError) -> SamplerError {
        SamplerError::Denoiser(e)
    }
}

impl From<DiffusionError> for SamplerError {
    fn from(e: DiffusionError) -> SamplerError {
        SamplerError::Diffusion(e)
    }
}

/// Knobs for one sampling run. `seed` is a label recorded in the trace;
/// the caller owns the RNG itself.
#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub use_self_cond: bool,
    /// Snap each denoised estimate onto its nearest embedding row before
    /// using it downstream. Off by default.
    pub clamp_x0: bool,
    pub seed: u64,
}

impl SampleOptions {
    pub fn new(seed: u64) -> SampleOptions {
        SampleOptions { use_self_cond: true, clamp_x0: false, seed }
    }
}

/// The RNG stream for one candidate: same seed, independent stream per
/// candidate index, so candidates can run in any order or in parallel.
pub fn candidate_rng(seed: u64, candidate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(candidate);
    rng
}

/// One retained step of a sampling run: the rounded denoised estimate for
/// every position, with source positions forced to the input tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// Iteration index, 0-based, ascending over the run.
    pub step: usize,
    /// The time level this estimate was denoised from.
    pub t: usize,
    pub tokens: Vec<usize>,
}

/// Decode-order record of one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
    /// Per position: the first retained iteration from which the rounded
    /// token never changes through the end of the run.
    pub stabilization: Vec<usize>,
    pub source_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
    pub schedule: String,
    pub seed: u64,
    pub total_steps: usize,
}

fn stabilization_from_steps(steps: &[TraceStep], len: usize) -> Vec<usize> {
    let mut stab = vec![0usize; len];
    for p in 0..len {
        let last = steps.last().map(|s| s.tokens[p]);
        let mut settled = steps.last().map(|s| s.step).unwrap_or(0);
        for s in steps.iter().rev() {
            if Some(s.tokens[p]) == last {
                settled = s.step;
            } else {
                break;
            }
        }
        stab[p] = settled;
    }
    stab
}

/// The descending time grid for a strided run: steps+1 values from T down
/// to 0, evenly spaced to the nearest integer, endpoints exact. Adjacent
/// values always differ since steps <= T.
pub fn stride_schedule(t_max: usize, steps: usize) -> Result<Vec<usize>, SamplerError> {
    if steps < 2 {
        return Err(SamplerError::Contract(format!("need at least 2 sampling steps, got {}", steps)));
    }
    if steps > t_max {
        return Err(SamplerError::Contract(format!("{} steps exceed the {}-step schedule", steps, t_max)));
    }
    Ok((0..=steps).map(|k| ((steps - k) * t_max + steps / 2) / steps).collect())
}

/// Nearest-embedding rounding: per position, the token whose embedding row
/// minimizes squared distance, ties to the lowest id. Expects finite input.
pub fn round(x0: &Tensor, emb: &EmbeddingTable) -> Result<Vec<usize>, SamplerError> {
    let d = emb.dim();
    let shape = x0.shape();
    if shape.is_empty() || shape[shape.len() - 1] != d {
        return Err(SamplerError::Contract(format!(
            "rounding needs a trailing dimension of {}, got shape {:?}",
            d, shape
        )));
    }
    let positions = x0.data().len() / d;
    let mut out = Vec::with_capacity(positions);
    for p in 0..positions {
        let x = &x0.data()[p * d..(p + 1) * d];
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for id in 0..emb.vocab() {
            let row = emb.row(id);
            let mut dist = 0.0f64;
            for k in 0..d {
                let diff = x[k] as f64 - row[k] as f64;
                dist += diff * diff;
            }
            if dist < best_dist {
                best = id;
                best_dist = dist;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Replaces every d-vector in x0 with its nearest embedding row.
pub fn clamp_to_embedding(x0: &Tensor, emb: &EmbeddingTable) -> Result<Tensor, SamplerError> {
    let ids = round(x0, emb)?;
    let d = emb.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for id in &ids {
        data.extend_from_slice(emb.row(*id));
    }
    Ok(Tensor::new(x0.shape().to_vec(), data).expect("shape preserved"))
}

/// How many iterations apart retained trace steps sit; endpoints are
/// always retained.
fn retention_stride(steps: usize) -> usize {
    steps.div_ceil(50)
}

/// Extracts the generated target from a full rounded row: the open slot
/// positions in order, cut at the first structural token. Unknown-word
/// tokens are ordinary text and survive the cut.
pub fn target_tokens(tokens: &[usize], source_mask: &[bool], pad_mask: &[bool]) -> Vec<usize> {
    (0..tokens.len())
        .filter(|&p| !source_mask[p] && !pad_mask[p])
        .map(|p| tokens[p])
        .take_while(|&id| id == UNK || !Vocab::is_reserved(id))
        .collect()
}

/// Runs the reverse process for one source sequence and returns the
/// generated target ids (trimmed at the first structural token) plus the
/// decode-order trace.
///
/// The row is laid out as during training, with `slots` open target
/// positions and pads after them. Target and pad positions start from
/// standard normal draws; source positions are pinned to their clean
/// embedding rows at every step and consume no randomness. Each iteration
/// denoises from the current grid time, optionally feeds the previous
/// estimate back as self-conditioning, and draws the next state from the
/// reverse-step distribution between adjacent grid times; the final
/// iteration keeps the denoised estimate and rounds it.
pub fn reverse_sample(
    source: &[usize],
    slots: usize,
    params: &ModelParams,
    table: &AlphaBarTable,
    steps: usize,
    rng: &mut ChaCha8Rng,
    opts: &SampleOptions,
) -> Result<(Vec<usize>, SampleTrace), SamplerError> {
    let len = table.len();
    let t_max = table.t_max();
    if t_max != params.config.t_max {
        return Err(SamplerError::Contract(format!(
            "schedule covers {} steps, model was built for {}",
            t_max, params.config.t_max
        )));
    }
    let emb = params.embedding();
    if let Some(&id) = source.iter().find(|&&id| id >= emb.vocab()) {
        return Err(SamplerError::Contract(format!(
            "source token {} outside the {}-entry vocabulary",
            id,
            emb.vocab()
        )));
    }
    let grid = stride_schedule(t_max, steps)?;
    let batch = PairedBatch::generation(&[source.to_vec()], slots, len)?;
    let d = emb.dim();

    let mut x = vec![0.0f32; len * d];
    for p in 0..len {
        if batch.is_source(0, p) {
            x[p * d..(p + 1) * d].copy_from_slice(emb.row(batch.id(0, p)));
        } else {
            for k in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                x[p * d + k] = eps as f32;
            }
        }
    }
    let mut x = Tensor::new(vec![1, len, d], x).expect("shape matches data");
    let mut sc = Tensor::zeros(&[1, len, d]);

    let mut runner = DenoiseRunner::new(&params.config, 1, len, &batch.source_mask, &batch.pad_mask)?;
    let stride = retention_stride(steps);
    let mut retained: Vec<TraceStep> = Vec::new();
    let mut final_x0 = None;

    for k in 0..steps {
        let (t_hi, t_lo) = (grid[k], grid[k + 1]);
        let mut x0_hat = runner.run(&x, &sc, t_hi, params)?;
        if opts.clamp_x0 {
            x0_hat = clamp_to_embedding(&x0_hat, &emb)?;
        }
        if k % stride == 0 || k == steps - 1 {
            let mut tokens = round(&x0_hat, &emb)?;
            for (p, tok) in tokens.iter_mut().enumerate() {
                if batch.is_source(0, p) {
                    *tok = batch.id(0, p);
                }
            }
            retained.push(TraceStep { step: k, t: t_hi, tokens });
        }
        if t_lo == 0 {
            final_x0 = Some(x0_hat.clone());
        } else {
            let hi: Vec<f64> = (0..len).map(|i| table.get(t_hi, i)).collect();
            let lo: Vec<f64> = (0..len).map(|i| table.get(t_lo, i)).collect();
            let (mean, var) = posterior_between(&x, &x0_hat, &hi, &lo)?;
            let mut next = vec![0.0f32; len * d];
            for p in 0..len {
                if batch.is_source(0, p) {
                    next[p * d..(p + 1) * d].copy_from_slice(emb.row(batch.id(0, p)));
                } else {
                    let sd = (var.data()[p] as f64).sqrt();
                    for k2 in 0..d {
                        let eps: f64 = rng.sample(StandardNormal);
                        next[p * d + k2] = (mean.data()[p * d + k2] as f64 + sd * eps) as f32;
                    }
                }
            }
            x = Tensor::new(vec![1, len, d], next).expect("shape matches data");
        }
        if opts.use_self_cond {
            sc = x0_hat;
        }
    }

    let final_x0 = final_x0.expect("grid ends at 0");
    let mut tokens = round(&final_x0, &emb)?;
    for (p, tok) in tokens.iter_mut().enumerate() {
        if batch.is_source(0, p) {
            *tok = batch.id(0, p);
        }
    }
    let target = target_tokens(&tokens, &batch.source_mask, &batch.pad_mask);

    let stabilization = stabilization_from_steps(&retained, len);
    let trace = SampleTrace {
        steps: retained,
        stabilization,
        source_mask: batch.source_mask.clone(),
        pad_mask: batch.pad_mask.clone(),
        schedule: table.spec().kind.name().to_string(),
        seed: opts.seed,
        total_steps: steps,
    };
    Ok((target, trace))
}

/// Draws `count` candidates for one source, each on its own RNG stream
/// derived from (seed, candidate index).
pub fn sample_candidates(
    source: &[usize],
    slots: usize,
    params: &ModelParams,
    table: &AlphaBarTable,
    steps: usize,
    seed: u64,
    count: usize,
    use_self_cond: bool,
    clamp_x0: bool,
) -> Result<Vec<(Vec<usize>, SampleTrace)>, SamplerError> {
    if count == 0 {
        return Err(SamplerError::Contract("need at least one candidate".to_string()));
    }
    let opts = SampleOptions { use_self_cond, clamp_x0, seed };
    (0..count)
        .map(|c| {
            let mut rng = candidate_rng(seed, c as u64);
            reverse_sample(source, slots, params, table, steps, &mut rng, &opts)
        })
        .collect()
}

fn pair_bleu(hyp: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    bleu(hyp, reference, 4).expect("non-empty reference")
}

/// Minimum Bayes risk selection: the candidate with the highest mean
/// sentence BLEU against all the others. Ties go to the lowest index; a
/// single candidate wins by default.
pub fn mbr_select(candidates: &[Vec<usize>]) -> Result<usize, SamplerError> {
    if candidates.is_empty() {
        return Err(SamplerError::Contract("cannot select from zero candidates".to_string()));
    }
    if candidates.len() == 1 {
        return Ok(0);
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let mut sum = 0.0;
        for (j, other) in candidates.iter().enumerate() {
            if i != j {
                sum += pair_bleu(c, other);
            }
        }
        let score = sum / (candidates.len() - 1) as f64;
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// Stabilization summary for one entropy quartile.
#[derive(Debug, Clone, PartialEq)]
pub struct QuartileStats {
    pub count: usize,
    pub mean_stab: f64,
    /// stabilization step -> how many tokens settled there.
    pub hist: BTreeMap<usize, usize>,
}

/// Decode-order evidence: do high-information tokens settle earlier?
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOrderReport {
    /// Bottom (lowest self-information) quartile first.
    pub quartiles: Vec<QuartileStats>,
    /// Nearest-rank 25/50/75 percentile edges over the observed values.
    pub edges: [f64; 3],
    /// mean stabilization of the lowest populated quartile minus the
    /// highest populated one; absent when they coincide or nothing
    /// qualified. Positive means high-information tokens settled earlier.
    pub delta: Option<f64>,
    pub tokens: usize,
}

impl DecodeOrderReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>10}  histogram", "quartile", "count", "mean_stab");
        for (qi, q) in self.quartiles.iter().enumerate() {
            let hist: String = q
                .hist
                .iter()
                .map(|(step, n)| format!("{}:{}", step, n))
                .collect::<Vec<_>>()
                .join(" ");
            if q.count == 0 {
                let _ = writeln!(s, "q{:<9} {:>6} {:>10}  -", qi + 1, 0, "-");
            } else {
                let _ = writeln!(s, "q{:<9} {:>6} {:>10.3}  {}", qi + 1, q.count, q.mean_stab, hist);
            }
        }
        match self.delta {
            Some(d) => {
                let _ = writeln!(s, "delta={:.6}", d);
            }
            None => {
                let _ = writeln!(s, "delta=absent");
            }
        }
        let _ = writeln!(s, "tokens={}", self.tokens);
        s
    }
}

/// Buckets every generated token (non-source, non-pad, non-structural) by
/// the self-information of its final rounded identity and summarizes when
/// each bucket's tokens stabilized.
pub fn decode_order_report(
    traces: &[SampleTrace],
    entropy: &EntropyTable,
) -> Result<DecodeOrderReport, SamplerError> {
    if traces.is_empty() {
        return Err(SamplerError::Contract("need at least one trace".to_string()));
    }
    let mut items: Vec<(f64, usize)> = Vec::new();
    for tr in traces {
        let last = tr
            .steps
            .last()
            .ok_or_else(|| SamplerError::Contract("trace has no retained steps".to_string()))?;
        for p in 0..last.tokens.len() {
            if tr.source_mask[p] || tr.pad_mask[p] {
                continue;
            }
            let tok = last.tokens[p];
            if Vocab::is_reserved(tok) || tok >= entropy.len() {
                continue;
            }
            items.push((entropy.h(tok), tr.stabilization[p]));
        }
    }
    let empty = || QuartileStats { count: 0, mean_stab: 0.0, hist: BTreeMap::new() };
    if items.is_empty() {
        return Ok(DecodeOrderReport {
            quartiles: vec![empty(), empty(), empty(), empty()],
            edges: [0.0; 3],
            delta: None,
            tokens: 0,
        });
    }
    let mut hs: Vec<f64> = items.iter().map(|it| it.0).collect();
    hs.sort_by(f64::total_cmp);
    let n = hs.len();
    let edge = |p: f64| hs[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    let edges = [edge(0.25), edge(0.5), edge(0.75)];
    let mut quartiles = vec![empty(), empty(), empty(), empty()];
    let mut sums = [0.0f64; 4];
    for (h, stab) in &items {
        let q = if *h <= edges[0] {
            0
        } else if *h <= edges[1] {
            1
        } else if *h <= edges[2] {
            2
        } else {
            3
        };
        quartiles[q].count += 1;
        sums[q] += *stab as f64;
        *quartiles[q].hist.entry(*stab).or_insert(0) += 1;
    }
    for (q, sum) in quartiles.iter_mut().zip(sums) {
        if q.count > 0 {
            q.mean_stab = sum / q.count as f64;
        }
    }
    let lowest = quartiles.iter().position(|q| q.count > 0);
    let highest = quartiles.iter().rposition(|q| q.count > 0);
    let delta = match (lowest, highest) {
        (Some(lo), Some(hi)) if lo < hi => Some(quartiles[lo].mean_stab - quartiles[hi].mean_stab),
        _ => None,
    };
    Ok(DecodeOrderReport { quartiles, edges, delta, tokens: items.len() })
}

/// Serializes a trace: `# key=value` headers, then one line per retained
/// step with tab-separated step, time, and space-joined tokens.
pub fn trace_to_string(trace: &SampleTrace) -> String {
    let mask_str = |m: &[bool]| m.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>();
    let mut s = String::new();
    let _ = writeln!(s, "# schedule={}", trace.schedule);
    let _ = writeln!(s, "# seed={}", trace.seed);
    let _ = writeln!(s, "# steps={}", trace.total_steps);
    let _ = writeln!(s, "# source_mask={}", mask_str(&trace.source_mask));
    let _ = writeln!(s, "# pad_mask={}", mask_str(&trace.pad_mask));
    for step in &trace.steps {
        let tokens: Vec<String> = step.tokens.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}\t{}\t{}", step.step, step.t, tokens.join(" "));
    }
    s
}

/// Parses the `trace_to_string` format; stabilization is recomputed from
/// the retained steps.
pub fn trace_from_str(text: &str) -> Result<SampleTrace, SamplerError> {
    let mut schedule = None;
    let mut seed = None;
    let mut total_steps = None;
    let mut source_mask: Option<Vec<bool>> = None;
    let mut pad_mask: Option<Vec<bool>> = None;
    let mut steps: Vec<TraceStep> = Vec::new();
    let parse_mask = |v: &str| -> Result<Vec<bool>, SamplerError> {
        v.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(SamplerError::Format(format!("mask character {:?}", other))),
            })
            .collect()
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| SamplerError::Format(format!("line {}: header without '='", ln + 1)))?;
            match key.trim() {
                "schedule" => schedule = Some(value.trim().to_string()),
                "seed" => {
                    seed = Some(value.trim().parse::<u64>().map_err(|e| {
                        SamplerError::Format(format!("line {}: seed: {}", ln + 1, e))
                    })?)
                }
                "steps" => {
                    total_steps = Some(value.trim().parse::<usize>().map_err(|e| {
                        SamplerError::Format(format!("line {}: steps: {}", ln + 1, e))
                    })?)
                }
                "source_mask" => source_mask = Some(parse_mask(value.trim())?),
                "pad_mask" => pad_mask = Some(parse_mask(value.trim())?),
                other => {
                    return Err(SamplerError::Format(format!("line {}: unknown header {:?}", ln + 1, other)))
                }
            }
            continue;
        }
        let mut fields = line.split('\t');
        let (step, t, toks) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => {
                return Err(SamplerError::Format(format!("line {}: expected step, time, tokens", ln + 1)))
            }
        };
        let step = step
            .parse::<usize>()
            .map_err(|e| SamplerError::Format(format!("line {}: step: {}", ln + 1, e)))?;
        let t = t
            .parse::<usize>()
            .map_err(|e| SamplerError::Format(format!("line {}: time: {}", ln + 1, e)))?;
        let tokens: Result<Vec<usize>, SamplerError> = toks
            .split_whitespace()
            .map(|w| {
                w.parse::<usize>()
                    .map_err(|e| SamplerError::Format(format!("line {}: token: {}", ln + 1, e)))
            })
            .collect();
        steps.push(TraceStep { step, t, tokens: tokens? });
    }
    let source_mask = source_mask.ok_or_else(|| SamplerError::Format("missing source_mask header".to_string()))?;
    let pad_mask = pad_mask.ok_or_else(|| SamplerError::Format("missing pad_mask header".to_string()))?;
    if steps.is_empty() {
        return Err(SamplerError::Format("no retained steps".to_string()));
    }
    let len = source_mask.len();
    if pad_mask.len() != len || steps.iter().any(|s| s.tokens.len() != len) {
        return Err(SamplerError::Format("masks and token rows disagree on length".to_string()));
    }
    let stabilization = stabilization_from_steps(&steps, len);
    Ok(SampleTrace {
        steps,
        stabilization,
        source_mask,
        pad_mask,
        schedule: schedule.ok_or_else(|| SamplerError::Format("missing schedule header".to_string()))?,
        seed: seed.ok_or_else(|| SamplerError::Format("missing seed header".to_string()))?,
        total_steps: total_steps.ok_or_else(|| SamplerError::Format("missing steps header".to_string()))?,
    })
}
