//! Training loop: the end-to-end objective with partial noising, the
//! stochastic self-conditioning policy, adaptive-moment updates, and the
//! step metrics log.
//!
//! Every step assembles one compute graph. The clean state x0 is gathered
//! from the embedding table inside the graph, so the squared-error targets
//! and the rounding likelihood both push gradient into the embeddings
//! (the objective is end-to-end). The noisy state is formed in-graph as
//! cs * x0 + cn * eps with per-position coefficients read off each row's
//! schedule table; source positions use (1, 0), which anchors them to the
//! clean row exactly. Per example, a uniformly sampled step t picks the
//! squared-error target: the jittered x0 for t >= 2, the clean embedding
//! rows for t = 1. The rounding term scores every non-pad position against
//! the vocabulary through softmax over negative squared distances.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{build_denoiser, pad_attention_bias, role_ids, time_input, DenoiserError, ModelConfig, ModelParams};
use crate::diffusion::{DiffusionError, PairedBatch};
use crate::numcore::{Graph, GraphError, NodeId, Tensor};
use crate::schedules::{alphabar_table, entropy_relative, AlphaBarTable, ScheduleError, ScheduleSpec};
use crate::textcorpus::{sentence_profile, CorpusError, EntropyTable, Vocab};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug)]
pub enum TrainingError {
    /// Invalid configuration.
    Config(String),
    /// Bad data handed to the trainer.
    Input(String),
    /// A step produced a non-finite quantity; the step was aborted.
    Numeric { step: usize, detail: String },
    Graph(GraphError),
    Denoiser(DenoiserError),
    Diffusion(DiffusionError),
    Schedule(ScheduleError),
    Corpus(CorpusError),
}

impl fmt::Display for TrainingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingError::Config(d) => write!(f, "config: {}", d),
            TrainingError::Input(d) => write!(f, "{}", d),
            TrainingError::Numeric { step, detail } => write!(f, "step {}: {}", step, detail),
            TrainingError::Graph(e) => write!(f, "graph: {}", e),
            TrainingError::Denoiser(e) => write!(f, "denoiser: {}", e),
            TrainingError::Diffusion(e) => write!(f, "diffusion: {}", e),
            TrainingError::Schedule(e) => write!(f, "schedule: {}", e),
            TrainingError::Corpus(e) => write!(f, "corpus: {}", e),
        }
    }
}

impl std::error::Error for TrainingError {}

impl From<GraphError> for TrainingError {
    fn from(e: GraphError) -> Self {
        TrainingError::Graph(e)
    }
}

impl From<DenoiserError> for TrainingError {
    fn from(e: DenoiserError) -> Self {
        TrainingError::Denoiser(e)
    }
}

impl From<DiffusionError> for TrainingError {
    fn from(e: DiffusionError) -> Self {
        TrainingError::Diffusion(e)
    }
}

impl From<ScheduleError> for TrainingError {
    fn from(e: ScheduleError) -> Self {
        TrainingError::Schedule(e)
    }
}

impl From<CorpusError> for TrainingError {
    fn from(e: CorpusError) -> Self {
        TrainingError::Corpus(e)
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Steps of linear warmup before the rate goes flat.
    pub warmup: usize,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Probability of training a step with self-conditioning.
    pub p_sc: f64,
    /// Embedding jitter scale for q(x0 | w).
    pub sigma0: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
}

impl TrainConfig {
    /// Defaults: warmup is a tenth of the run, self-conditioning on half
    /// the steps.
    pub fn new(steps: usize, batch: usize, seed: u64) -> TrainConfig {
        TrainConfig { lr: 1e-3, warmup: steps.div_ceil(10), steps, batch, seed, p_sc: 0.5, sigma0: 0.1, clip: 1.0 }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |d: String| Err(TrainingError::Config(d));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.p_sc) {
            return bad(format!("self-conditioning probability {} outside [0, 1]", self.p_sc));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip));
        }
        if self.sigma0 < 0.0 {
            return bad(format!("sigma0 {} must be non-negative", self.sigma0));
        }
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch size must be positive".to_string());
        }
        Ok(())
    }
}

/// A tokenized corpus prepared for training: fixed row geometry and one
/// schedule table per pair, shaped by that row's informativeness profile.
pub struct TrainTask {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub vocab: Vocab,
    pub entropy: EntropyTable,
    pub spec: ScheduleSpec,
    /// Uniform row length: the longest laid-out pair.
    pub len: usize,
    /// Open target slots needed at generation time (longest target plus
    /// its trailing separator).
    pub gen_slots: usize,
    tables: Vec<AlphaBarTable>,
}

impl TrainTask {
    pub fn new(
        pairs: Vec<(Vec<usize>, Vec<usize>)>,
        vocab: Vocab,
        entropy: EntropyTable,
        spec: ScheduleSpec,
    ) -> Result<TrainTask, TrainingError> {
        spec.validate()?;
        if pairs.is_empty() {
            return Err(TrainingError::Input("training corpus is empty".to_string()));
        }
        if entropy.len() != vocab.size() {
            return Err(TrainingError::Input(format!(
                "entropy table covers {} ids, vocab has {}",
                entropy.len(),
                vocab.size()
            )));
        }
        let mut len = 0;
        let mut gen_slots = 0;
        for (i, (src, tgt)) in pairs.iter().enumerate() {
            if src.is_empty() || tgt.is_empty() {
                return Err(TrainingError::Input(format!("pair {}: source and target must be non-empty", i)));
            }
            if let Some(&bad) = src.iter().chain(tgt).find(|&&id| id >= vocab.size()) {
                return Err(TrainingError::Input(format!("pair {}: token id {} outside the vocabulary", i, bad)));
            }
            len = len.max(3 + src.len() + tgt.len());
            gen_slots = gen_slots.max(tgt.len() + 1);
        }
        let mut tables = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            let row = PairedBatch::build(std::slice::from_ref(pair), len)?;
            let profile = sentence_profile(&row.ids, &entropy)?;
            let e = entropy_relative(&profile);
            tables.push(alphabar_table(&spec, &e)?);
        }
        Ok(TrainTask { pairs, vocab, entropy, spec, len, gen_slots, tables })
    }

    pub fn table(&self, pair: usize) -> &AlphaBarTable {
        &self.tables[pair]
    }
}

/// Everything random about one training step, drawn up front so a step is
/// a deterministic function of its plan.
pub struct StepPlan {
    /// Corpus pair index per batch row.
    pub rows: Vec<usize>,
    /// Diffusion step per batch row, uniform over 1..=T.
    pub t: Vec<usize>,
    /// Embedding jitter, rows x len x d.
    pub eps0: Tensor,
    /// Forward-noising draw, rows x len x d.
    pub epsn: Tensor,
    /// Whether this step trains with a self-condition estimate.
    pub use_self_cond: bool,
    /// Inverted-keep-probability masks, one per residual branch, when
    /// dropout is active.
    pub dropout: Vec<Tensor>,
}

/// A built objective graph with handles to its interesting nodes.
pub struct StepGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub mse: NodeId,
    pub nll: NodeId,
    pub x0_hat: NodeId,
}

/// Attaches the two-term objective to an existing graph.
///
/// `x0_jit` is the sampled clean state (with jitter), `x0_clean` the bare
/// embedding rows, `x0_hat` the estimate under scrutiny. Rows with t >= 2
/// anchor the squared term on `x0_jit`, rows at t = 1 on `x0_clean`. The
/// rounding term scores every non-pad position. Returns (loss, mse, nll).
fn attach_objective(
    g: &mut Graph,
    emb: NodeId,
    x0_jit: NodeId,
    x0_clean: NodeId,
    x0_hat: NodeId,
    batch: &PairedBatch,
    t: &[usize],
    d: usize,
    vocab: usize,
) -> Result<(NodeId, NodeId, NodeId), TrainingError> {
    let (rows, len) = (batch.rows, batch.len);

    // Target selection and squared-error weights.
    let mut jit_mask = vec![0.0f32; rows * len * d];
    let mut clean_mask = vec![0.0f32; rows * len * d];
    let mut w_mse = vec![0.0f32; rows * len * d];
    for r in 0..rows {
        for i in 0..len {
            for k in 0..d {
                let at = (r * len + i) * d + k;
                if t[r] >= 2 {
                    jit_mask[at] = 1.0;
                } else {
                    clean_mask[at] = 1.0;
                }
                if batch.is_target(r, i) {
                    w_mse[at] = 1.0 / rows as f32;
                }
            }
        }
    }
    let jit_mask = g.constant(Tensor::new(vec![rows, len, d], jit_mask).unwrap());
    let clean_mask = g.constant(Tensor::new(vec![rows, len, d], clean_mask).unwrap());
    let w_mse = g.constant(Tensor::new(vec![rows, len, d], w_mse).unwrap());
    let jit_part = g.mul(x0_jit, jit_mask)?;
    let clean_part = g.mul(x0_clean, clean_mask)?;
    let target = g.add(jit_part, clean_part)?;
    let diff = g.sub(target, x0_hat)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, w_mse)?;
    let mse = g.sum(weighted)?;

    // Rounding likelihood: softmax over negative squared distances to the
    // embedding rows, realized as 2 x.e - |x|^2 - |e|^2 without concat.
    let flat = g.reshape(x0_hat, &[rows * len, d])?;
    let emb_t = g.transpose(emb, 0, 1)?;
    let xe = g.matmul(flat, emb_t)?;
    let two = g.constant(Tensor::scalar(2.0));
    let two_xe = g.mul(xe, two)?;
    let x_sq_elem = g.mul(flat, flat)?;
    let ones_dv = g.constant(Tensor::ones(&[d, vocab]));
    let x_sq = g.matmul(x_sq_elem, ones_dv)?;
    let e_sq_elem = g.mul(emb, emb)?;
    let ones_d1 = g.constant(Tensor::ones(&[d, 1]));
    let e_sq_col = g.matmul(e_sq_elem, ones_d1)?;
    let e_sq = g.reshape(e_sq_col, &[vocab])?;
    let part = g.sub(two_xe, x_sq)?;
    let logits = g.sub(part, e_sq)?;
    let nll_vec = g.log_softmax_nll(logits, &batch.ids)?;

    let mut w_nll = vec![0.0f32; rows * len];
    for r in 0..rows {
        let live = (0..len).filter(|&i| !batch.is_pad(r, i)).count();
        for i in 0..len {
            if !batch.is_pad(r, i) {
                w_nll[r * len + i] = 1.0 / (rows * live) as f32;
            }
        }
    }
    let w_nll = g.constant(Tensor::new(vec![rows * len], w_nll).unwrap());
    let nll_weighted = g.mul(nll_vec, w_nll)?;
    let nll = g.sum(nll_weighted)?;

    let loss = g.add(mse, nll)?;
    Ok((loss, mse, nll))
}

/// Builds the full objective graph for one step: in-graph embedding and
/// noising, the denoiser, and both loss terms. When `sc_const` is given
/// the self-condition is baked in as a constant; otherwise it is the
/// bindable input `self_cond`.
pub fn build_step_graph(
    mcfg: &ModelConfig,
    batch: &PairedBatch,
    tables: &[&AlphaBarTable],
    plan: &StepPlan,
    sigma0: f64,
    sc_const: Option<&Tensor>,
) -> Result<StepGraph, TrainingError> {
    mcfg.validate()?;
    let (rows, len, d) = (batch.rows, batch.len, mcfg.d);
    let state_shape = [rows, len, d];
    if tables.len() != rows || plan.t.len() != rows {
        return Err(TrainingError::Input(format!(
            "need one table and one t per row: {} rows, {} tables, {} steps",
            rows,
            tables.len(),
            plan.t.len()
        )));
    }
    if plan.eps0.shape() != state_shape || plan.epsn.shape() != state_shape {
        return Err(TrainingError::Input(format!(
            "noise draws must be {:?}, got {:?} and {:?}",
            state_shape,
            plan.eps0.shape(),
            plan.epsn.shape()
        )));
    }
    for (r, table) in tables.iter().enumerate() {
        if table.len() != len {
            return Err(TrainingError::Input(format!("row {}: table covers {} positions, row has {}", r, table.len(), len)));
        }
        if plan.t[r] < 1 || plan.t[r] > table.t_max() {
            return Err(TrainingError::Input(format!("row {}: t={} outside 1..={}", r, plan.t[r], table.t_max())));
        }
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= mcfg.vocab) {
        return Err(TrainingError::Input(format!("token id {} outside model vocabulary {}", bad, mcfg.vocab)));
    }

    let mut g = Graph::new();
    let emb = g.param("emb", &[mcfg.vocab, d]);
    let gathered = g.gather_rows(emb, &batch.ids)?;
    let x0_clean = g.reshape(gathered, &[rows, len, d])?;
    let eps0 = g.constant(plan.eps0.clone());
    let sig = g.constant(Tensor::scalar(sigma0 as f32));
    let jitter = g.mul(eps0, sig)?;
    let x0 = g.add(x0_clean, jitter)?;

    // Forward noising coefficients: (1, 0) on source, schedule elsewhere.
    let mut cs = vec![0.0f32; rows * len * d];
    let mut cn = vec![0.0f32; rows * len * d];
    for r in 0..rows {
        for i in 0..len {
            let (s, n) = if batch.is_source(r, i) {
                (1.0f64, 0.0f64)
            } else {
                let ab = tables[r].get(plan.t[r], i);
                (ab.sqrt(), (1.0 - ab).sqrt())
            };
            for k in 0..d {
                cs[(r * len + i) * d + k] = s as f32;
                cn[(r * len + i) * d + k] = n as f32;
            }
        }
    }
    let cs = g.constant(Tensor::new(vec![rows, len, d], cs).unwrap());
    let cn = g.constant(Tensor::new(vec![rows, len, d], cn).unwrap());
    let epsn = g.constant(plan.epsn.clone());
    let signal = g.mul(x0, cs)?;
    let noise = g.mul(epsn, cn)?;
    let x_t = g.add(signal, noise)?;

    let self_cond = match sc_const {
        Some(t) => {
            if t.shape() != state_shape {
                return Err(TrainingError::Input(format!(
                    "self-condition constant must be {:?}, got {:?}",
                    state_shape,
                    t.shape()
                )));
            }
            g.constant(t.clone())
        }
        None => g.input("self_cond", &state_shape),
    };
    let time = g.constant(time_input(&plan.t, len, d));
    let bias = g.constant(pad_attention_bias(&batch.pad_mask, rows, len, mcfg.heads));
    let masks: Vec<NodeId> = plan.dropout.iter().map(|m| g.constant(m.clone())).collect();
    let x0_hat = build_denoiser(&mut g, mcfg, rows, len, x_t, self_cond, time, bias, &role_ids(&batch.source_mask), &masks)?;

    let (loss, mse, nll) = attach_objective(&mut g, emb, x0, x0_clean, x0_hat, batch, &plan.t, d, mcfg.vocab)?;
    g.mark_output("loss", loss);
    g.mark_output("mse", mse);
    g.mark_output("nll", nll);
    g.mark_output("x0_hat", x0_hat);
    Ok(StepGraph { graph: g, loss, mse, nll, x0_hat })
}

/// One step's metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub nll: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
}

/// Renders the log line for one step. Wall time is the one field that
/// legitimately differs between otherwise identical runs.
pub fn metrics_line(r: &StepRecord) -> String {
    format!(
        "step={} loss={:.6} grad_norm={:.6} lr={:.8} elapsed_ms={}",
        r.step, r.loss, r.grad_norm, r.lr, r.elapsed_ms
    )
}

/// Owns the parameters and optimizer state for one training run.
pub struct Trainer {
    pub task: TrainTask,
    pub params: ModelParams,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
    rng: ChaCha8Rng,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Trainer {
    pub fn new(task: TrainTask, params: ModelParams, config: TrainConfig) -> Result<Trainer, TrainingError> {
        config.validate()?;
        params.config.validate()?;
        if params.config.vocab != task.vocab.size() {
            return Err(TrainingError::Config(format!(
                "model vocabulary {} does not match corpus vocabulary {}",
                params.config.vocab,
                task.vocab.size()
            )));
        }
        if task.len > params.config.max_len {
            return Err(TrainingError::Config(format!(
                "rows need {} positions, model caps at {}",
                task.len, params.config.max_len
            )));
        }
        if task.spec.t_max != params.config.t_max {
            return Err(TrainingError::Config(format!(
                "schedule runs to T={}, model expects T={}",
                task.spec.t_max, params.config.t_max
            )));
        }
        if !params.all_finite() {
            return Err(TrainingError::Config("initial parameters contain non-finite values".to_string()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { task, params, config, step: 0, rng, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Draws every random choice for the next step. Order: batch rows,
    /// per-row t, embedding jitter, noising draw, the self-conditioning
    /// coin (only when p_sc > 0), dropout masks (only when dropout > 0).
    pub fn plan_step(&mut self) -> StepPlan {
        let (b, len, d) = (self.config.batch, self.task.len, self.params.config.d);
        let n = self.task.pairs.len();
        let rows: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..n)).collect();
        let t_max = self.task.spec.t_max;
        let t: Vec<usize> = (0..b).map(|_| self.rng.gen_range(1..=t_max)).collect();
        let draw = |rng: &mut ChaCha8Rng| -> Tensor {
            let data = (0..b * len * d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
            Tensor::new(vec![b, len, d], data).unwrap()
        };
        let eps0 = draw(&mut self.rng);
        let epsn = draw(&mut self.rng);
        let use_self_cond = if self.config.p_sc > 0.0 { self.rng.gen_bool(self.config.p_sc) } else { false };
        let mut dropout = Vec::new();
        let p_drop = self.params.config.dropout;
        if p_drop > 0.0 {
            let keep = 1.0 - p_drop;
            for _ in 0..2 * self.params.config.layers {
                let data = (0..b * len * d)
                    .map(|_| if self.rng.gen_bool(keep) { (1.0 / keep) as f32 } else { 0.0 })
                    .collect();
                dropout.push(Tensor::new(vec![b, len, d], data).unwrap());
            }
        }
        StepPlan { rows, t, eps0, epsn, use_self_cond, dropout }
    }

    /// Current learning rate for a given 1-based optimizer step.
    fn rate_at(&self, step: usize) -> f64 {
        if self.config.warmup == 0 {
            return self.config.lr;
        }
        self.config.lr * (step as f64 / self.config.warmup as f64).min(1.0)
    }

    /// Runs one optimization step. On a non-finite loss or gradient the
    /// step aborts with `Numeric` and the parameters are left untouched.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainingError> {
        let started = Instant::now();
        let step = self.step + 1;
        let plan = self.plan_step();
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = plan.rows.iter().map(|&r| self.task.pairs[r].clone()).collect();
        let batch = PairedBatch::build(&pairs, self.task.len)?;
        let tables: Vec<&AlphaBarTable> = plan.rows.iter().map(|&r| self.task.table(r)).collect();
        let mut sg = build_step_graph(&self.params.config, &batch, &tables, &plan, self.config.sigma0, None)?;

        let shape = [batch.rows, self.task.len, self.params.config.d];
        let mut bindings = self.params.bindings();
        bindings.insert("self_cond".to_string(), Tensor::zeros(&shape));
        if plan.use_self_cond {
            let mut first = sg.graph.eval(&bindings)?;
            let estimate = first.remove("x0_hat").expect("x0_hat is always marked");
            bindings.insert("self_cond".to_string(), estimate);
        }
        sg.graph.eval(&bindings)?;
        let loss = sg.graph.scalar_value(sg.loss)?;
        let mse = sg.graph.scalar_value(sg.mse)?;
        let nll = sg.graph.scalar_value(sg.nll)?;
        for (name, value) in [("squared-error", mse), ("rounding", nll)] {
            if !value.is_finite() {
                return Err(TrainingError::Numeric { step, detail: format!("{} term is non-finite", name) });
            }
        }
        if !loss.is_finite() {
            return Err(TrainingError::Numeric { step, detail: "loss is non-finite".to_string() });
        }

        let grads = sg.graph.backward(sg.loss)?;
        let mut norm_sq = 0.0f64;
        for g in grads.values() {
            for &v in g.data() {
                norm_sq += (v as f64) * (v as f64);
            }
        }
        let grad_norm = norm_sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(TrainingError::Numeric { step, detail: "gradient norm is non-finite".to_string() });
        }
        let scale = if grad_norm > self.config.clip { self.config.clip / grad_norm } else { 1.0 };

        let lr = self.rate_at(step);
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for (name, grad) in &grads {
            let theta = self.params.tensors.get_mut(name).expect("gradient for unknown parameter");
            let n = theta.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = theta.data_mut();
            for i in 0..n {
                let gi = grad.data()[i] as f64 * scale;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                data[i] = (data[i] as f64 - update) as f32;
            }
        }
        self.step = step;
        Ok(StepRecord {
            step,
            loss,
            mse,
            nll,
            grad_norm,
            lr,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Runs the configured number of steps, collecting one record each.
    pub fn run(&mut self) -> Result<Vec<StepRecord>, TrainingError> {
        let mut records = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            records.push(self.train_step()?);
        }
        Ok(records)
    }

    /// Rebuilds a trainer at a given completed-step count, e.g. from a
    /// checkpoint. The RNG fast-forwards by replaying step plans, so the
    /// upcoming draws match a run that never stopped; optimizer moments
    /// restart empty.
    pub fn resume(
        task: TrainTask,
        params: ModelParams,
        config: TrainConfig,
        completed: usize,
    ) -> Result<Trainer, TrainingError> {
        let mut trainer = Trainer::new(task, params, config)?;
        for _ in 0..completed {
            let _ = trainer.plan_step();
        }
        trainer.step = completed;
        Ok(trainer)
    }
}
