//! Checkpoint persistence.
//!
//! Binary layout: the magic `IDIF`, a little-endian u32 version, then four
//! length-prefixed sections (u64 LE byte length followed by the payload):
//!
//! 1. run configuration as UTF-8 `key=value` lines,
//! 2. the vocabulary in its text export format,
//! 3. the entropy table in its text export format,
//! 4. the parameter tensors: a u32 count, then per tensor a u32-length
//!    UTF-8 name, u32 rank, u32 dims, and the f32 LE payload.
//!
//! Numbers in the config section print through Rust's shortest
//! round-trippable float formatting, so save, load, save reproduces the
//! original file byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::denoiser::{ModelConfig, ModelParams};
use crate::numcore::Tensor;
use crate::schedules::{ScheduleKind, ScheduleSpec};
use crate::textcorpus::{entropy_from_str, entropy_to_string, vocab_from_str, vocab_to_string, EntropyTable, Vocab};
use crate::training::TrainConfig;

pub const CKPT_MAGIC: &[u8; 4] = b"IDIF";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    /// Structurally invalid file; `offset` points at the failing byte.
    Format { offset: usize, detail: String },
    Io(std::io::Error),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Format { offset, detail } => write!(f, "byte {}: {}", offset, detail),
            CheckpointError::Io(e) => write!(f, "io: {}", e),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// A full training state snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub spec: ScheduleSpec,
    /// Completed optimization steps at save time.
    pub step: usize,
    /// Uniform training row length.
    pub row_len: usize,
    /// Open target slots to allocate when generating.
    pub gen_slots: usize,
    pub vocab: Vocab,
    pub entropy: EntropyTable,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn params(&self) -> ModelParams {
        ModelParams { config: self.model.clone(), tensors: self.tensors.clone() }
    }
}

fn config_text(c: &Checkpoint) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{}={}\n", k, v));
    kv("model.layers", c.model.layers.to_string());
    kv("model.heads", c.model.heads.to_string());
    kv("model.d", c.model.d.to_string());
    kv("model.hidden_mult", c.model.hidden_mult.to_string());
    kv("model.max_len", c.model.max_len.to_string());
    kv("model.vocab", c.model.vocab.to_string());
    kv("model.t_max", c.model.t_max.to_string());
    kv("model.dropout", c.model.dropout.to_string());
    kv("train.lr", c.train.lr.to_string());
    kv("train.warmup", c.train.warmup.to_string());
    kv("train.steps", c.train.steps.to_string());
    kv("train.batch", c.train.batch.to_string());
    kv("train.seed", c.train.seed.to_string());
    kv("train.p_sc", c.train.p_sc.to_string());
    kv("train.sigma0", c.train.sigma0.to_string());
    kv("train.clip", c.train.clip.to_string());
    kv("schedule.kind", c.spec.kind.name().to_string());
    kv("schedule.t_max", c.spec.t_max.to_string());
    kv("schedule.lambda", c.spec.lambda.to_string());
    kv("schedule.s", c.spec.s.to_string());
    kv("schedule.beta_min", c.spec.beta_min.to_string());
    kv("schedule.beta_max", c.spec.beta_max.to_string());
    kv("schedule.enforce_monotonic", c.spec.enforce_monotonic.to_string());
    kv("step", c.step.to_string());
    kv("row_len", c.row_len.to_string());
    kv("gen_slots", c.gen_slots.to_string());
    s
}

struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    fn parse(text: &str, offset: usize) -> Result<ConfigMap, CheckpointError> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(CheckpointError::Format {
                offset,
                detail: format!("config line '{}' is not key=value", line),
            })?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CheckpointError::Format { offset, detail: format!("duplicate config key '{}'", k) });
            }
        }
        Ok(ConfigMap(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, offset: usize) -> Result<T, CheckpointError> {
        let raw = self.0.get(key).ok_or(CheckpointError::Format {
            offset,
            detail: format!("missing config key '{}'", key),
        })?;
        raw.parse().map_err(|_| CheckpointError::Format {
            offset,
            detail: format!("config key '{}' has unparseable value '{}'", key, raw),
        })
    }
}

fn tensors_bytes(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &dim in t.shape() {
            b.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

/// Serializes a checkpoint to its exact byte representation.
pub fn checkpoint_bytes(c: &Checkpoint) -> Vec<u8> {
    let sections = [
        config_text(c).into_bytes(),
        vocab_to_string(&c.vocab).into_bytes(),
        entropy_to_string(&c.entropy, &c.vocab)
            .expect("checkpoint entropy table always matches its vocab")
            .into_bytes(),
        tensors_bytes(&c.tensors),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for s in sections {
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        out.extend_from_slice(&s);
    }
    out
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(c))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.buf.len() {
            return Err(CheckpointError::Format {
                offset: self.at,
                detail: format!("truncated while reading {} ({} bytes needed, {} left)", what, n, self.buf.len() - self.at),
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn section(&mut self, what: &str) -> Result<&'a [u8], CheckpointError> {
        let len = self.u64(what)? as usize;
        self.take(len, what)
    }

    fn text_section(&mut self, what: &str) -> Result<(String, usize), CheckpointError> {
        let start = self.at + 8;
        let raw = self.section(what)?;
        let text = String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Format {
            offset: start,
            detail: format!("{} section is not UTF-8", what),
        })?;
        Ok((text, start))
    }
}

/// Parses checkpoint bytes, verifying magic, version, and every length.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::Format { offset: 0, detail: format!("bad magic {:?}", magic) });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::Format {
            offset: 4,
            detail: format!("unsupported version {} (expected {})", version, CKPT_VERSION),
        });
    }

    let (config, config_off) = r.text_section("config")?;
    let cfg = ConfigMap::parse(&config, config_off)?;
    let model = ModelConfig {
        layers: cfg.get("model.layers", config_off)?,
        heads: cfg.get("model.heads", config_off)?,
        d: cfg.get("model.d", config_off)?,
        hidden_mult: cfg.get("model.hidden_mult", config_off)?,
        max_len: cfg.get("model.max_len", config_off)?,
        vocab: cfg.get("model.vocab", config_off)?,
        t_max: cfg.get("model.t_max", config_off)?,
        dropout: cfg.get("model.dropout", config_off)?,
    };
    let train = TrainConfig {
        lr: cfg.get("train.lr", config_off)?,
        warmup: cfg.get("train.warmup", config_off)?,
        steps: cfg.get("train.steps", config_off)?,
        batch: cfg.get("train.batch", config_off)?,
        seed: cfg.get("train.seed", config_off)?,
        p_sc: cfg.get("train.p_sc", config_off)?,
        sigma0: cfg.get("train.sigma0", config_off)?,
        clip: cfg.get("train.clip", config_off)?,
    };
    let kind_name: String = cfg.get("schedule.kind", config_off)?;
    let kind = ScheduleKind::from_name(&kind_name).ok_or(CheckpointError::Format {
        offset: config_off,
        detail: format!("unknown schedule kind '{}'", kind_name),
    })?;
    let spec = ScheduleSpec {
        kind,
        t_max: cfg.get("schedule.t_max", config_off)?,
        lambda: cfg.get("schedule.lambda", config_off)?,
        s: cfg.get("schedule.s", config_off)?,
        beta_min: cfg.get("schedule.beta_min", config_off)?,
        beta_max: cfg.get("schedule.beta_max", config_off)?,
        enforce_monotonic: cfg.get("schedule.enforce_monotonic", config_off)?,
    };
    let step = cfg.get("step", config_off)?;
    let row_len = cfg.get("row_len", config_off)?;
    let gen_slots = cfg.get("gen_slots", config_off)?;

    let (vocab_text, vocab_off) = r.text_section("vocab")?;
    let vocab = vocab_from_str(&vocab_text).map_err(|e| CheckpointError::Format {
        offset: vocab_off,
        detail: format!("vocab section: {}", e),
    })?;
    let (entropy_text, entropy_off) = r.text_section("entropy")?;
    let entropy = entropy_from_str(&entropy_text, &vocab).map_err(|e| CheckpointError::Format {
        offset: entropy_off,
        detail: format!("entropy section: {}", e),
    })?;

    let tensor_start = r.at + 8;
    let tensor_buf = r.section("tensors")?;
    if r.at != buf.len() {
        return Err(CheckpointError::Format {
            offset: r.at,
            detail: format!("{} trailing bytes after the last section", buf.len() - r.at),
        });
    }
    let mut tr = Reader { buf: tensor_buf, at: 0 };
    let count = tr.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = tr.u32("tensor name length")? as usize;
        let name_at = tensor_start + tr.at;
        let name = String::from_utf8(tr.take(name_len, "tensor name")?.to_vec()).map_err(|_| {
            CheckpointError::Format { offset: name_at, detail: "tensor name is not UTF-8".to_string() }
        })?;
        let rank = tr.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(tr.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = tr.take(numel * 4, "tensor payload")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let at = tensor_start + tr.at;
        if tensors
            .insert(name.clone(), Tensor::new(shape, data).expect("length computed from shape"))
            .is_some()
        {
            return Err(CheckpointError::Format { offset: at, detail: format!("duplicate tensor '{}'", name) });
        }
    }
    if tr.at != tensor_buf.len() {
        return Err(CheckpointError::Format {
            offset: tensor_start + tr.at,
            detail: "trailing bytes inside the tensor section".to_string(),
        });
    }

    Ok(Checkpoint { model, train, spec, step, row_len, gen_slots, vocab, entropy, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    checkpoint_from_bytes(&fs::read(path)?)
}
