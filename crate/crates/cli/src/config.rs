//! Run configuration: one flat `key = value` file covering the model,
//! schedule, training, and sampling knobs plus the run paths. Every field
//! has a default; parsing resolves each field to exactly one value, and
//! `to_text` echoes the whole resolved set back in a stable order, so
//! parse and echo are inverses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use infodiff_core::denoiser::ModelConfig;
use infodiff_core::schedules::{ScheduleKind, ScheduleSpec};
use infodiff_core::textcorpus::TokenizerMode;
use infodiff_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub hidden_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub schedule: ScheduleKind,
    pub lambda: f64,
    pub t_max: usize,
    pub lr: f64,
    pub warmup: usize,
    pub steps: usize,
    pub batch: usize,
    pub p_sc: f64,
    pub sigma0: f64,
    pub clip: f64,
    pub checkpoint_interval: usize,
    pub sample_steps: usize,
    pub candidates: usize,
    pub self_cond: bool,
    pub clamp_x0: bool,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub corpus: PathBuf,
    pub tokenizer: TokenizerMode,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            layers: 2,
            heads: 4,
            d: 32,
            hidden_mult: 2,
            max_len: 64,
            dropout: 0.0,
            schedule: ScheduleKind::InfoAware,
            lambda: 0.25,
            t_max: 200,
            lr: 1e-3,
            warmup: 30,
            steps: 300,
            batch: 8,
            p_sc: 0.5,
            sigma0: 0.1,
            clip: 1.0,
            checkpoint_interval: 100,
            sample_steps: 200,
            candidates: 10,
            self_cond: true,
            clamp_x0: false,
            seed: 42,
            run_dir: PathBuf::from("runs/default"),
            corpus: PathBuf::from("data/pairs.tsv"),
            tokenizer: TokenizerMode::Whitespace,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("{}: expected on or off, got {:?}", key, other)),
    }
}

fn parse_tokenizer(v: &str) -> Result<TokenizerMode, String> {
    if let Some(merges) = v.strip_prefix("bpe:") {
        let merges = merges.parse::<usize>().map_err(|e| format!("tokenizer: bpe merges: {}", e))?;
        return Ok(TokenizerMode::Bpe { merges });
    }
    match v {
        "whitespace" => Ok(TokenizerMode::Whitespace),
        "char" => Ok(TokenizerMode::Char),
        other => Err(format!("tokenizer: expected whitespace, char, or bpe:N, got {:?}", other)),
    }
}

fn tokenizer_name(mode: TokenizerMode) -> String {
    match mode {
        TokenizerMode::Bpe { merges } => format!("bpe:{}", merges),
        other => other.name().to_string(),
    }
}

impl RunConfig {
    /// Parses the flat config format: one `key = value` per line, `#` to
    /// end of line is a comment, blank lines ignored, every key optional.
    /// Unknown or repeated keys are errors. The warmup default is derived
    /// from the resolved step count.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", ln + 1))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if value.is_empty() {
                return Err(format!("line {}: {} has no value", ln + 1, key));
            }
            if raw.insert(key.clone(), value).is_some() {
                return Err(format!("line {}: {} given twice", ln + 1, key));
            }
        }
        let mut cfg = RunConfig::default();
        let mut take = |key: &str| raw.remove(key);
        macro_rules! num {
            ($key:expr, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = v.parse().map_err(|e| format!("{}: {}", $key, e))?;
                }
            };
        }
        num!("model.layers", cfg.layers);
        num!("model.heads", cfg.heads);
        num!("model.d", cfg.d);
        num!("model.hidden_mult", cfg.hidden_mult);
        num!("model.max_len", cfg.max_len);
        num!("model.dropout", cfg.dropout);
        if let Some(v) = take("schedule.kind") {
            cfg.schedule =
                ScheduleKind::from_name(&v).ok_or_else(|| format!("schedule.kind: unknown schedule {:?}", v))?;
        }
        num!("schedule.lambda", cfg.lambda);
        num!("schedule.t_max", cfg.t_max);
        num!("train.lr", cfg.lr);
        num!("train.steps", cfg.steps);
        num!("train.batch", cfg.batch);
        num!("train.p_sc", cfg.p_sc);
        num!("train.sigma0", cfg.sigma0);
        num!("train.clip", cfg.clip);
        num!("train.checkpoint_interval", cfg.checkpoint_interval);
        cfg.warmup = match take("train.warmup") {
            Some(v) => v.parse().map_err(|e| format!("train.warmup: {}", e))?,
            None => cfg.steps.div_ceil(10),
        };
        num!("sample.steps", cfg.sample_steps);
        num!("sample.candidates", cfg.candidates);
        if let Some(v) = take("sample.self_cond") {
            cfg.self_cond = parse_bool("sample.self_cond", &v)?;
        }
        if let Some(v) = take("sample.clamp_x0") {
            cfg.clamp_x0 = parse_bool("sample.clamp_x0", &v)?;
        }
        num!("seed", cfg.seed);
        if let Some(v) = take("run_dir") {
            cfg.run_dir = PathBuf::from(v);
        }
        if let Some(v) = take("corpus") {
            cfg.corpus = PathBuf::from(v);
        }
        if let Some(v) = take("tokenizer") {
            cfg.tokenizer = parse_tokenizer(&v)?;
        }
        if let Some((key, _)) = raw.into_iter().next() {
            return Err(format!("unknown key {:?}", key));
        }
        if cfg.checkpoint_interval == 0 {
            return Err("train.checkpoint_interval must be positive".to_string());
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {}", path.display(), e))?;
        RunConfig::parse(&text).map_err(|e| format!("{}: {}", path.display(), e))
    }

    /// Echoes every resolved field, one line each, parseable by `parse`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{} = {}", k, v);
        };
        kv("model.layers", self.layers.to_string());
        kv("model.heads", self.heads.to_string());
        kv("model.d", self.d.to_string());
        kv("model.hidden_mult", self.hidden_mult.to_string());
        kv("model.max_len", self.max_len.to_string());
        kv("model.dropout", self.dropout.to_string());
        kv("schedule.kind", self.schedule.name().to_string());
        kv("schedule.lambda", self.lambda.to_string());
        kv("schedule.t_max", self.t_max.to_string());
        kv("train.lr", self.lr.to_string());
        kv("train.warmup", self.warmup.to_string());
        kv("train.steps", self.steps.to_string());
        kv("train.batch", self.batch.to_string());
        kv("train.p_sc", self.p_sc.to_string());
        kv("train.sigma0", self.sigma0.to_string());
        kv("train.clip", self.clip.to_string());
        kv("train.checkpoint_interval", self.checkpoint_interval.to_string());
        kv("sample.steps", self.sample_steps.to_string());
        kv("sample.candidates", self.candidates.to_string());
        kv("sample.self_cond", if self.self_cond { "on" } else { "off" }.to_string());
        kv("sample.clamp_x0", if self.clamp_x0 { "on" } else { "off" }.to_string());
        kv("seed", self.seed.to_string());
        kv("run_dir", self.run_dir.display().to_string());
        kv("corpus", self.corpus.display().to_string());
        kv("tokenizer", tokenizer_name(self.tokenizer));
        s
    }

    /// The model shape for a corpus needing `row_len` positions; the
    /// position table grows to fit if the configured cap is too small.
    pub fn model_config(&self, vocab: usize, row_len: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d: self.d,
            hidden_mult: self.hidden_mult,
            max_len: self.max_len.max(row_len),
            vocab,
            t_max: self.t_max,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup: self.warmup,
            steps: self.steps,
            batch: self.batch,
            seed: self.seed,
            p_sc: self.p_sc,
            sigma0: self.sigma0,
            clip: self.clip,
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        let mut spec = ScheduleSpec::new(self.schedule, self.t_max);
        spec.lambda = self.lambda;
        spec
    }
}
