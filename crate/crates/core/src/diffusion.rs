//! The continuous diffusion process over embedded token sequences.
//!
//! A paired example is laid out as one row: [CLS] source [SEP] target [SEP]
//! then PAD up to the row length. Embedding lifts token ids to vectors with
//! a small Gaussian jitter (sigma0). Forward noising is partial: target
//! positions mix signal and noise per the schedule table, source positions
//! are copied bit-exactly at every step, so the model always conditions on
//! a clean source. The posterior gives the reverse-step distribution
//! q(x_{t-1} | x_t, x0_hat) used by the sampler.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numcore::Tensor;
use crate::schedules::AlphaBarTable;
use crate::textcorpus::{CLS, PAD, SEP};

/// Below this remaining-noise level the posterior collapses onto x0_hat.
const POSTERIOR_FLOOR: f64 = 1e-12;

#[derive(Debug)]
pub enum DiffusionError {
    /// Bad caller data: rows that do not fit, empty sides, id out of range.
    Input(String),
    /// An operation was used outside its stated domain.
    Contract(String),
}

impl fmt::Display for DiffusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionError::Input(d) | DiffusionError::Contract(d) => write!(f, "{}", d),
        }
    }
}

impl std::error::Error for DiffusionError {}

/// Token embedding matrix, one row per vocabulary entry. Rows are kept
/// pairwise distinct so nearest-row rounding has a unique answer on exact
/// hits.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    table: Tensor,
}

impl EmbeddingTable {
    /// Standard-normal rows, then a jitter pass to break any duplicates.
    pub fn init(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
        let data: Vec<f32> = (0..vocab * dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        Self::from_tensor(Tensor::new(vec![vocab, dim], data).unwrap(), rng)
    }

    /// Wraps an existing matrix, jittering later rows until all rows are
    /// pairwise distinct.
    pub fn from_tensor(mut table: Tensor, rng: &mut ChaCha8Rng) -> EmbeddingTable {
        assert_eq!(table.ndim(), 2, "embedding table must be 2-D");
        let (v, d) = (table.shape()[0], table.shape()[1]);
        loop {
            let mut clash = None;
            'scan: for a in 0..v {
                for b in a + 1..v {
                    let ra = &table.data()[a * d..(a + 1) * d];
                    let rb = &table.data()[b * d..(b + 1) * d];
                    if ra == rb {
                        clash = Some(b);
                        break 'scan;
                    }
                }
            }
            match clash {
                Some(b) => {
                    for k in 0..d {
                        let jitter = rng.sample::<f64, _>(StandardNormal) as f32 * 1e-3;
                        table.data_mut()[b * d + k] += jitter;
                    }
                }
                None => break,
            }
        }
        EmbeddingTable { table }
    }

    /// Rebuilds from checkpoint data without jittering; trusts the caller.
    pub fn from_tensor_unchecked(table: Tensor) -> EmbeddingTable {
        assert_eq!(table.ndim(), 2, "embedding table must be 2-D");
        EmbeddingTable { table }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f32] {
        let d = self.dim();
        &self.table.data()[id * d..(id + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }
}

/// A batch of laid-out rows with their role masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub rows: usize,
    pub len: usize,
    /// Token ids, row-major rows x len.
    pub ids: Vec<usize>,
    /// True on CLS, the source tokens, and the separator after them.
    pub source_mask: Vec<bool>,
    /// True on the PAD tail.
    pub pad_mask: Vec<bool>,
}

impl PairedBatch {
    /// Lays out tokenized pairs into fixed-length rows.
    pub fn build(pairs: &[(Vec<usize>, Vec<usize>)], len: usize) -> Result<PairedBatch, DiffusionError> {
        if pairs.is_empty() {
            return Err(DiffusionError::Input("batch needs at least one pair".to_string()));
        }
        let rows = pairs.len();
        let mut ids = vec![PAD; rows * len];
        let mut source_mask = vec![false; rows * len];
        let mut pad_mask = vec![false; rows * len];
        for (r, (src, tgt)) in pairs.iter().enumerate() {
            if src.is_empty() || tgt.is_empty() {
                return Err(DiffusionError::Input(format!("row {}: source and target must be non-empty", r)));
            }
            let need = 3 + src.len() + tgt.len();
            if need > len {
                return Err(DiffusionError::Input(format!("row {}: needs {} positions, row length is {}", r, need, len)));
            }
            let base = r * len;
            let mut p = 0;
            let mut put = |id: usize, is_source: bool| {
                ids[base + p] = id;
                source_mask[base + p] = is_source;
                p += 1;
            };
            put(CLS, true);
            for &id in src {
                put(id, true);
            }
            put(SEP, true);
            for &id in tgt {
                put(id, false);
            }
            put(SEP, false);
            for slot in p..len {
                pad_mask[base + slot] = true;
                let _ = slot;
            }
        }
        Ok(PairedBatch { rows, len, ids, source_mask, pad_mask })
    }

    /// Lays out source-only rows with `slots` open target positions, for
    /// sampling. The target ids are placeholders; nothing reads them.
    pub fn generation(sources: &[Vec<usize>], slots: usize, len: usize) -> Result<PairedBatch, DiffusionError> {
        if sources.is_empty() {
            return Err(DiffusionError::Input("batch needs at least one source".to_string()));
        }
        if slots == 0 {
            return Err(DiffusionError::Input("need at least one open target position".to_string()));
        }
        let rows = sources.len();
        let mut ids = vec![PAD; rows * len];
        let mut source_mask = vec![false; rows * len];
        let mut pad_mask = vec![false; rows * len];
        for (r, src) in sources.iter().enumerate() {
            if src.is_empty() {
                return Err(DiffusionError::Input(format!("row {}: source must be non-empty", r)));
            }
            let need = 2 + src.len() + slots;
            if need > len {
                return Err(DiffusionError::Input(format!("row {}: needs {} positions, row length is {}", r, need, len)));
            }
            let base = r * len;
            ids[base] = CLS;
            source_mask[base] = true;
            for (k, &id) in src.iter().enumerate() {
                ids[base + 1 + k] = id;
                source_mask[base + 1 + k] = true;
            }
            ids[base + 1 + src.len()] = SEP;
            source_mask[base + 1 + src.len()] = true;
            for slot in 2 + src.len() + slots..len {
                pad_mask[base + slot] = true;
            }
        }
        Ok(PairedBatch { rows, len, ids, source_mask, pad_mask })
    }

    pub fn id(&self, row: usize, pos: usize) -> usize {
        self.ids[row * self.len + pos]
    }

    pub fn is_source(&self, row: usize, pos: usize) -> bool {
        self.source_mask[row * self.len + pos]
    }

    pub fn is_pad(&self, row: usize, pos: usize) -> bool {
        self.pad_mask[row * self.len + pos]
    }

    /// A live generation/learning position: neither source nor pad.
    pub fn is_target(&self, row: usize, pos: usize) -> bool {
        !self.is_source(row, pos) && !self.is_pad(row, pos)
    }
}

/// One point along the diffusion trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    /// rows x len x dim.
    pub x: Tensor,
    pub t: usize,
}

/// Embeds a batch: x0 = EMB(id) + sigma0 * eps at every position. Noise is
/// drawn position-major, one standard normal per coordinate.
pub fn embed(batch: &PairedBatch, emb: &EmbeddingTable, sigma0: f64, rng: &mut ChaCha8Rng) -> DiffusionState {
    let d = emb.dim();
    let mut x = Vec::with_capacity(batch.rows * batch.len * d);
    for &id in &batch.ids {
        let row = emb.row(id);
        for &v in row {
            let eps: f64 = rng.sample(StandardNormal);
            x.push((v as f64 + sigma0 * eps) as f32);
        }
    }
    DiffusionState { x: Tensor::new(vec![batch.rows, batch.len, d], x).unwrap(), t: 0 }
}

/// Jumps the clean state to step t: target positions get
/// sqrt(ab) * x0 + sqrt(1 - ab) * eps with ab = table[t][position], source
/// positions are copied bit-exactly. No noise is drawn for source
/// positions.
pub fn forward_noise(
    x0: &DiffusionState,
    t: usize,
    table: &AlphaBarTable,
    source_mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionState, DiffusionError> {
    let shape = x0.x.shape();
    if shape.len() != 3 {
        return Err(DiffusionError::Contract(format!("state must be rows x len x dim, got {:?}", shape)));
    }
    let (rows, len, d) = (shape[0], shape[1], shape[2]);
    if x0.t != 0 {
        return Err(DiffusionError::Contract(format!("forward noising starts from t=0, state is at t={}", x0.t)));
    }
    if t > table.t_max() {
        return Err(DiffusionError::Contract(format!("t={} beyond schedule T={}", t, table.t_max())));
    }
    if table.len() != len {
        return Err(DiffusionError::Contract(format!("table covers {} positions, state has {}", table.len(), len)));
    }
    if source_mask.len() != rows * len {
        return Err(DiffusionError::Contract(format!(
            "source mask has {} entries for {} positions",
            source_mask.len(),
            rows * len
        )));
    }
    let mut x = vec![0.0f32; rows * len * d];
    for r in 0..rows {
        for i in 0..len {
            let src = &x0.x.data()[(r * len + i) * d..(r * len + i + 1) * d];
            let dst = &mut x[(r * len + i) * d..(r * len + i + 1) * d];
            if source_mask[r * len + i] {
                dst.copy_from_slice(src);
            } else {
                let ab = table.get(t, i);
                let signal = ab.sqrt();
                let noise = (1.0 - ab).sqrt();
                for k in 0..d {
                    let eps: f64 = rng.sample(StandardNormal);
                    dst[k] = (signal * src[k] as f64 + noise * eps) as f32;
                }
            }
        }
    }
    Ok(DiffusionState { x: Tensor::new(vec![rows, len, d], x).unwrap(), t })
}

/// Reverse-step distribution between two cumulative signal levels. Returns
/// the per-coordinate mean (same shape as x_t) and the per-position
/// variance (rows x len). Once the high step is fully noised out or the
/// levels coincide numerically, the step collapses onto x0_hat exactly.
pub fn posterior_between(
    x_t: &Tensor,
    x0_hat: &Tensor,
    ab_hi: &[f64],
    ab_lo: &[f64],
) -> Result<(Tensor, Tensor), DiffusionError> {
    let shape = x_t.shape();
    if shape.len() != 3 || x0_hat.shape() != shape {
        return Err(DiffusionError::Contract(format!(
            "states must share a rows x len x dim shape, got {:?} and {:?}",
            shape,
            x0_hat.shape()
        )));
    }
    let (rows, len, d) = (shape[0], shape[1], shape[2]);
    if ab_hi.len() != len || ab_lo.len() != len {
        return Err(DiffusionError::Contract(format!(
            "signal levels cover {} and {} positions, state has {}",
            ab_hi.len(),
            ab_lo.len(),
            len
        )));
    }
    let mut mean = vec![0.0f32; rows * len * d];
    let mut var = vec![0.0f32; rows * len];
    for i in 0..len {
        let (hi, lo) = (ab_hi[i], ab_lo[i]);
        let remaining = 1.0 - hi;
        let (w0, wt, v) = if remaining < POSTERIOR_FLOOR || (lo - hi).abs() < POSTERIOR_FLOOR {
            (1.0, 0.0, 0.0)
        } else {
            let alpha = hi / lo;
            let beta = 1.0 - alpha;
            let w0 = lo.sqrt() * beta / remaining;
            let wt = alpha.sqrt() * (1.0 - lo) / remaining;
            let v = beta * (1.0 - lo) / remaining;
            (w0, wt, v)
        };
        for r in 0..rows {
            var[r * len + i] = v as f32;
            let off = (r * len + i) * d;
            for k in 0..d {
                mean[off + k] = (w0 * x0_hat.data()[off + k] as f64 + wt * x_t.data()[off + k] as f64) as f32;
            }
        }
    }
    Ok((
        Tensor::new(vec![rows, len, d], mean).unwrap(),
        Tensor::new(vec![rows, len], var).unwrap(),
    ))
}

/// The classic single-step posterior q(x_{t-1} | x_t, x0_hat) read off a
/// schedule table. Requires t >= 2; the final step is the sampler's
/// rounding step, not a posterior draw.
pub fn posterior(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    table: &AlphaBarTable,
) -> Result<(Tensor, Tensor), DiffusionError> {
    if t < 2 || t > table.t_max() {
        return Err(DiffusionError::Contract(format!("posterior needs 2 <= t <= T, got t={}", t)));
    }
    let len = table.len();
    let hi: Vec<f64> = (0..len).map(|i| table.get(t, i)).collect();
    let lo: Vec<f64> = (0..len).map(|i| table.get(t - 1, i)).collect();
    posterior_between(x_t, x0_hat, &hi, &lo)
}
