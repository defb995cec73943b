//! The denoising network: an encoder-only transformer predicting the clean
//! embedding sequence x0 from a noisy state.
//!
//! Inputs are fused on the feature axis: the noisy state x_t and the
//! self-condition estimate are concatenated to 2d channels and projected
//! back to d (realized as two d x d half-projections, which is the same
//! linear map). Position, role (source or target), and a learned projection
//! of a sinusoidal step encoding are added, then pre-norm attention blocks
//! run over the whole row with pad positions masked out of attention.
//! An all-zeros self-condition input reduces the network to the plain
//! no-self-conditioning model because the second half-projection
//! contributes exactly zero.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::EmbeddingTable;
use crate::numcore::{Bindings, Graph, GraphError, NodeId, Tensor};

/// Additive attention bias for masked (pad) key positions. Large enough
/// that softmax underflows their weight to exactly zero.
pub const ATTN_MASK_BIAS: f32 = -1e9;

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug)]
pub enum DenoiserError {
    /// Invalid model configuration.
    Config(String),
    /// Valid config, but the operation was called outside its domain.
    Contract(String),
    /// An error surfaced by the compute graph.
    Graph(GraphError),
}

impl fmt::Display for DenoiserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserError::Config(d) => write!(f, "config: {}", d),
            DenoiserError::Contract(d) => write!(f, "{}", d),
            DenoiserError::Graph(e) => write!(f, "graph: {}", e),
        }
    }
}

impl std::error::Error for DenoiserError {}

impl From<GraphError> for DenoiserError {
    fn from(e: GraphError) -> DenoiserError {
        DenoiserError::Graph(e)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub hidden_mult: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub t_max: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small desk-scale defaults used by the tests and examples.
    pub fn desk(vocab: usize, max_len: usize) -> ModelConfig {
        ModelConfig { layers: 2, heads: 4, d: 32, hidden_mult: 2, max_len, vocab, t_max: 200, dropout: 0.0 }
    }

    /// The large preset mirroring the published configuration. Documented
    /// for completeness; far beyond what the test suite exercises.
    pub fn large(vocab: usize, max_len: usize) -> ModelConfig {
        ModelConfig { layers: 12, heads: 12, d: 128, hidden_mult: 4, max_len, vocab, t_max: 2000, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |d: String| Err(DenoiserError::Config(d));
        if self.layers < 1 {
            return bad("layers must be at least 1".to_string());
        }
        if self.heads < 1 || self.d % self.heads != 0 {
            return bad(format!("width {} must divide evenly into {} heads", self.d, self.heads));
        }
        if self.d % 2 != 0 {
            return bad(format!("width {} must be even for the sin/cos step encoding", self.d));
        }
        if self.hidden_mult < 1 {
            return bad("hidden multiplier must be at least 1".to_string());
        }
        if self.max_len < 4 {
            return bad("max length must fit at least one tiny row".to_string());
        }
        if self.vocab < 5 {
            return bad("vocabulary must extend beyond the reserved tokens".to_string());
        }
        if self.t_max < 2 {
            return bad("need at least two diffusion steps".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d * self.hidden_mult
    }
}

/// Named parameter tensors plus the config they were shaped for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Fresh parameters: unit-scale embedding rows (kept pairwise distinct
    /// for rounding), fan-in-scaled weights, identity layer norms.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams, DenoiserError> {
        config.validate()?;
        let d = config.d;
        let mut tensors = BTreeMap::new();
        let emb = EmbeddingTable::init(config.vocab, d, rng);
        tensors.insert("emb".to_string(), emb.tensor().clone());
        let small = |rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64| -> Tensor {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * sigma) as f32)
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        tensors.insert("pos".to_string(), small(rng, &[config.max_len, d], 0.1));
        tensors.insert("role".to_string(), small(rng, &[2, d], 0.1));
        let linear = |rng: &mut ChaCha8Rng, tensors: &mut BTreeMap<String, Tensor>, name: &str, fan_in: usize, fan_out: usize| {
            let sigma = (1.0 / fan_in as f64).sqrt();
            tensors.insert(format!("{}_w", name), small(rng, &[fan_in, fan_out], sigma));
            tensors.insert(format!("{}_b", name), Tensor::zeros(&[fan_out]));
        };
        linear(rng, &mut tensors, "in", 2 * d, d);
        linear(rng, &mut tensors, "time1", d, d);
        linear(rng, &mut tensors, "time2", d, d);
        for l in 0..config.layers {
            for half in ["ln1", "ln2"] {
                tensors.insert(format!("l{}_{}_g", l, half), Tensor::ones(&[d]));
                tensors.insert(format!("l{}_{}_b", l, half), Tensor::zeros(&[d]));
            }
            for proj in ["q", "k", "v", "o"] {
                linear(rng, &mut tensors, &format!("l{}_{}", l, proj), d, d);
            }
            linear(rng, &mut tensors, &format!("l{}_f1", l), d, config.hidden());
            linear(rng, &mut tensors, &format!("l{}_f2", l), config.hidden(), d);
        }
        tensors.insert("out_ln_g".to_string(), Tensor::ones(&[d]));
        tensors.insert("out_ln_b".to_string(), Tensor::zeros(&[d]));
        linear(rng, &mut tensors, "out", d, d);
        Ok(ModelParams { config: config.clone(), tensors })
    }

    /// Bindings view for graph evaluation.
    pub fn bindings(&self) -> Bindings {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn embedding(&self) -> EmbeddingTable {
        EmbeddingTable::from_tensor_unchecked(self.tensors["emb"].clone())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }
}

/// Raw sinusoidal encoding of a step index: interleaved sin/cos pairs over
/// a geometric frequency ladder, every entry in [-1, 1].
pub fn time_embedding(t: usize, d: usize) -> Vec<f32> {
    let mut enc = vec![0.0f32; d];
    for k in 0..d / 2 {
        let omega = (10000f64).powf(-((2 * k) as f64) / d as f64);
        let angle = t as f64 * omega;
        enc[2 * k] = angle.sin() as f32;
        enc[2 * k + 1] = angle.cos() as f32;
    }
    enc
}

/// Materializes per-row step encodings, repeated across all positions:
/// rows x len x d with row r carrying time_embedding(ts[r]).
pub fn time_input(ts: &[usize], len: usize, d: usize) -> Tensor {
    let rows = ts.len();
    let mut data = Vec::with_capacity(rows * len * d);
    for &t in ts {
        let enc = time_embedding(t, d);
        for _ in 0..len {
            data.extend_from_slice(&enc);
        }
    }
    Tensor::new(vec![rows, len, d], data).unwrap()
}

/// Additive attention bias blocking every pad key: 0 on live keys,
/// ATTN_MASK_BIAS on pad keys, laid out rows x heads x len x len.
pub fn pad_attention_bias(pad_mask: &[bool], rows: usize, len: usize, heads: usize) -> Tensor {
    assert_eq!(pad_mask.len(), rows * len, "pad mask must cover every position");
    let mut data = vec![0.0f32; rows * heads * len * len];
    for r in 0..rows {
        for k in 0..len {
            if pad_mask[r * len + k] {
                for h in 0..heads {
                    for q in 0..len {
                        data[((r * heads + h) * len + q) * len + k] = ATTN_MASK_BIAS;
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, heads, len, len], data).unwrap()
}

/// Row indices into the role table: 0 for source positions, 1 otherwise.
pub fn role_ids(source_mask: &[bool]) -> Vec<usize> {
    source_mask.iter().map(|&s| if s { 0 } else { 1 }).collect()
}

fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Appends the denoiser to `g` and returns the x0 estimate node.
///
/// The caller supplies the data-dependent leaves: the noisy state, the
/// self-condition estimate, the step encoding from `time_input`, and the
/// attention bias from `pad_attention_bias`. Parameter leaves are declared
/// here under the names produced by `ModelParams::init`. `dropout_masks`
/// is either empty (inference, or dropout 0) or one node per residual
/// branch in layer order (attention then feed-forward), each rows x len x d.
pub fn build_denoiser(
    g: &mut Graph,
    cfg: &ModelConfig,
    rows: usize,
    len: usize,
    x_t: NodeId,
    self_cond: NodeId,
    time_enc: NodeId,
    attn_bias: NodeId,
    role: &[usize],
    dropout_masks: &[NodeId],
) -> Result<NodeId, DenoiserError> {
    cfg.validate()?;
    if len > cfg.max_len {
        return Err(DenoiserError::Contract(format!("row length {} exceeds max length {}", len, cfg.max_len)));
    }
    if role.len() != rows * len {
        return Err(DenoiserError::Contract(format!("role ids cover {} positions, need {}", role.len(), rows * len)));
    }
    if !dropout_masks.is_empty() && dropout_masks.len() != 2 * cfg.layers {
        return Err(DenoiserError::Contract(format!(
            "need one dropout mask per residual branch ({}), got {}",
            2 * cfg.layers,
            dropout_masks.len()
        )));
    }
    let d = cfg.d;
    let (heads, dh) = (cfg.heads, cfg.head_dim());

    // Fused input projection: split the 2d x d matrix into halves so that
    // x_t @ top + self_cond @ bottom equals concat(x_t, self_cond) @ whole.
    let in_w = g.param("in_w", &[2 * d, d]);
    let in_b = g.param("in_b", &[d]);
    let top_idx: Vec<usize> = (0..d).collect();
    let bot_idx: Vec<usize> = (d..2 * d).collect();
    let top = g.gather_rows(in_w, &top_idx)?;
    let bot = g.gather_rows(in_w, &bot_idx)?;
    let xt_proj = g.matmul(x_t, top)?;
    let sc_proj = g.matmul(self_cond, bot)?;
    let fused = g.add(xt_proj, sc_proj)?;
    let mut h = g.add(fused, in_b)?;

    let pos = g.param("pos", &[cfg.max_len, d]);
    let pos_rows = g.gather_rows(pos, &(0..len).collect::<Vec<_>>())?;
    h = g.add(h, pos_rows)?;

    let role_table = g.param("role", &[2, d]);
    let role_rows = g.gather_rows(role_table, role)?;
    let role_shaped = g.reshape(role_rows, &[rows, len, d])?;
    h = g.add(h, role_shaped)?;

    let t1w = g.param("time1_w", &[d, d]);
    let t1b = g.param("time1_b", &[d]);
    let t2w = g.param("time2_w", &[d, d]);
    let t2b = g.param("time2_b", &[d]);
    let t_hidden = affine(g, time_enc, t1w, t1b)?;
    let t_act = g.gelu(t_hidden)?;
    let t_proj = affine(g, t_act, t2w, t2b)?;
    h = g.add(h, t_proj)?;

    let scale = g.constant(Tensor::scalar(1.0 / (dh as f32).sqrt()));
    for l in 0..cfg.layers {
        let name = |s: &str| format!("l{}_{}", l, s);
        let ln1_g = g.param(&name("ln1_g"), &[d]);
        let ln1_b = g.param(&name("ln1_b"), &[d]);
        let normed = g.layer_norm(h, LN_EPS)?;
        let scaled = g.mul(normed, ln1_g)?;
        let a_in = g.add(scaled, ln1_b)?;

        let mut qkv = Vec::with_capacity(3);
        for p in ["q", "k", "v"] {
            let w = g.param(&name(&format!("{}_w", p)), &[d, d]);
            let b = g.param(&name(&format!("{}_b", p)), &[d]);
            let full = affine(g, a_in, w, b)?;
            let split = g.reshape(full, &[rows, len, heads, dh])?;
            qkv.push(g.transpose(split, 1, 2)?);
        }
        let (q, k, v) = (qkv[0], qkv[1], qkv[2]);
        let k_t = g.transpose(k, 2, 3)?;
        let logits = g.matmul(q, k_t)?;
        let logits = g.mul(logits, scale)?;
        let logits = g.add(logits, attn_bias)?;
        let weights = g.softmax(logits)?;
        let ctx = g.matmul(weights, v)?;
        let merged = g.transpose(ctx, 1, 2)?;
        let flat = g.reshape(merged, &[rows, len, d])?;
        let o_w = g.param(&name("o_w"), &[d, d]);
        let o_b = g.param(&name("o_b"), &[d]);
        let mut attn_out = affine(g, flat, o_w, o_b)?;
        if !dropout_masks.is_empty() {
            attn_out = g.mul(attn_out, dropout_masks[2 * l])?;
        }
        h = g.add(h, attn_out)?;

        let ln2_g = g.param(&name("ln2_g"), &[d]);
        let ln2_b = g.param(&name("ln2_b"), &[d]);
        let normed2 = g.layer_norm(h, LN_EPS)?;
        let scaled2 = g.mul(normed2, ln2_g)?;
        let f_in = g.add(scaled2, ln2_b)?;
        let f1w = g.param(&name("f1_w"), &[d, cfg.hidden()]);
        let f1b = g.param(&name("f1_b"), &[cfg.hidden()]);
        let f2w = g.param(&name("f2_w"), &[cfg.hidden(), d]);
        let f2b = g.param(&name("f2_b"), &[d]);
        let hidden = affine(g, f_in, f1w, f1b)?;
        let act = g.gelu(hidden)?;
        let mut ffn_out = affine(g, act, f2w, f2b)?;
        if !dropout_masks.is_empty() {
            ffn_out = g.mul(ffn_out, dropout_masks[2 * l + 1])?;
        }
        h = g.add(h, ffn_out)?;
    }

    let ogn = g.param("out_ln_g", &[d]);
    let obn = g.param("out_ln_b", &[d]);
    let fin = g.layer_norm(h, LN_EPS)?;
    let fin = g.mul(fin, ogn)?;
    let fin = g.add(fin, obn)?;
    let ow = g.param("out_w", &[d, d]);
    let ob = g.param("out_b", &[d]);
    Ok(affine(g, fin, ow, ob)?)
}

/// A reusable inference graph over fixed masks and batch geometry. The
/// state, self-condition, and step change between calls; the structure
/// does not, so rebinding avoids rebuilding.
pub struct DenoiseRunner {
    graph: Graph,
    cfg: ModelConfig,
    rows: usize,
    len: usize,
}

impl DenoiseRunner {
    pub fn new(cfg: &ModelConfig, rows: usize, len: usize, source_mask: &[bool], pad_mask: &[bool]) -> Result<DenoiseRunner, DenoiserError> {
        cfg.validate()?;
        if source_mask.len() != rows * len || pad_mask.len() != rows * len {
            return Err(DenoiserError::Contract(format!(
                "masks must cover {} positions, got {} and {}",
                rows * len,
                source_mask.len(),
                pad_mask.len()
            )));
        }
        let mut graph = Graph::new();
        let x_t = graph.input("x_t", &[rows, len, cfg.d]);
        let self_cond = graph.input("self_cond", &[rows, len, cfg.d]);
        let time_enc = graph.input("time", &[rows, len, cfg.d]);
        let bias = graph.constant(pad_attention_bias(pad_mask, rows, len, cfg.heads));
        let out = build_denoiser(&mut graph, cfg, rows, len, x_t, self_cond, time_enc, bias, &role_ids(source_mask), &[])?;
        graph.mark_output("x0_hat", out);
        Ok(DenoiseRunner { graph, cfg: cfg.clone(), rows, len })
    }

    /// One denoising pass at step `t` for the whole batch.
    pub fn run(&mut self, x_t: &Tensor, self_cond: &Tensor, t: usize, params: &ModelParams) -> Result<Tensor, DenoiserError> {
        let want = [self.rows, self.len, self.cfg.d];
        if x_t.shape() != want || self_cond.shape() != want {
            return Err(DenoiserError::Contract(format!(
                "state shapes {:?} / {:?} do not match batch geometry {:?}",
                x_t.shape(),
                self_cond.shape(),
                want
            )));
        }
        if t > self.cfg.t_max {
            return Err(DenoiserError::Contract(format!("step {} beyond T={}", t, self.cfg.t_max)));
        }
        if params.config != self.cfg {
            return Err(DenoiserError::Contract("params were shaped for a different config".to_string()));
        }
        let mut bindings = params.bindings();
        bindings.insert("x_t".to_string(), x_t.clone());
        bindings.insert("self_cond".to_string(), self_cond.clone());
        bindings.insert("time".to_string(), time_input(&vec![t; self.rows], self.len, self.cfg.d));
        let mut out = self.graph.eval(&bindings)?;
        Ok(out.remove("x0_hat").expect("x0_hat is always marked"))
    }
}

/// One-shot denoising pass; builds a fresh graph. For repeated calls over
/// the same geometry prefer `DenoiseRunner`.
pub fn denoise(
    x_t: &Tensor,
    self_cond: &Tensor,
    t: usize,
    source_mask: &[bool],
    pad_mask: &[bool],
    params: &ModelParams,
) -> Result<Tensor, DenoiserError> {
    let shape = x_t.shape();
    if shape.len() != 3 {
        return Err(DenoiserError::Contract(format!("state must be rows x len x d, got {:?}", shape)));
    }
    let mut runner = DenoiseRunner::new(&params.config, shape[0], shape[1], source_mask, pad_mask)?;
    runner.run(x_t, self_cond, t, params)
}
