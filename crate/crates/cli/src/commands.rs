//! The five subcommands. Each returns `CliError` for anything the user
//! can fix (exit 2) and `Numeric` when optimization aborted (exit 3);
//! everything written into the run directory is a deterministic function
//! of the resolved config and seed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use infodiff_core::denoiser::ModelParams;
use infodiff_core::evalmetrics::{bleu, MetricReport};
use infodiff_core::sampler::{
    candidate_rng, decode_order_report, mbr_select, reverse_sample, target_tokens, trace_from_str,
    trace_to_string, SampleOptions, SampleTrace,
};
use infodiff_core::schedules::{alphabar_table, ScheduleKind};
use infodiff_core::textcorpus::{
    build_vocab, detokenize, load_entropy, load_pairs, load_vocab, self_information, tokenize, Vocab,
};
use infodiff_core::training::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use infodiff_core::training::{metrics_line, TrainTask, Trainer, TrainingError};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Usage or input problem; exit code 2.
    Input(String),
    /// Optimization hit a non-finite value; exit code 3.
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(d) => write!(f, "{}", d),
            CliError::Numeric(d) => write!(f, "{}", d),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e)))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e)))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e)))
}

fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("vocab.txt")
}

fn entropy_path(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("entropy.txt")
}

fn load_prep(cfg: &RunConfig) -> Result<(Vocab, infodiff_core::textcorpus::EntropyTable), CliError> {
    let vp = vocab_path(cfg);
    let ep = entropy_path(cfg);
    if !vp.exists() || !ep.exists() {
        return Err(CliError::Input(format!(
            "missing {} or {}; run `infodiff prep` first",
            vp.display(),
            ep.display()
        )));
    }
    let vocab = load_vocab(&vp).map_err(input)?;
    let entropy = load_entropy(&ep, &vocab).map_err(input)?;
    Ok((vocab, entropy))
}

/// Tokenizes the raw pair corpus and writes the vocabulary and entropy
/// exports into the run directory.
pub fn cmd_prep(cfg: &RunConfig, corpus: Option<PathBuf>) -> Result<(), CliError> {
    let corpus = corpus.unwrap_or_else(|| cfg.corpus.clone());
    let pairs = load_pairs(&corpus).map_err(input)?;
    let vocab = build_vocab(&pairs, cfg.tokenizer).map_err(input)?;
    let mut stream = Vec::new();
    for (src, tgt) in &pairs {
        stream.extend(tokenize(src, &vocab));
        stream.extend(tokenize(tgt, &vocab));
    }
    let entropy = self_information(&stream, &vocab).map_err(input)?;
    ensure_dir(&cfg.run_dir)?;
    infodiff_core::textcorpus::save_vocab(&vocab_path(cfg), &vocab).map_err(input)?;
    infodiff_core::textcorpus::save_entropy(&entropy_path(cfg), &entropy, &vocab).map_err(input)?;
    write_file(&cfg.run_dir.join("config.resolved"), &cfg.to_text())?;
    println!("prep: {} pairs, {} tokens in vocabulary", pairs.len(), vocab.size());
    println!("prep: wrote {} and {}", vocab_path(cfg).display(), entropy_path(cfg).display());
    Ok(())
}

fn tokenized_pairs(cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<(Vec<usize>, Vec<usize>)>, CliError> {
    let pairs = load_pairs(&cfg.corpus).map_err(input)?;
    Ok(pairs.iter().map(|(s, t)| (tokenize(s, vocab), tokenize(t, vocab))).collect())
}

/// Trains a denoiser, appending one metrics line per step and writing
/// checkpoints at the configured interval plus a trailing `final.idif`.
/// With `resume`, picks up the given checkpoint's parameters and step.
pub fn cmd_train(cfg: &RunConfig, resume: Option<PathBuf>) -> Result<(), CliError> {
    let (vocab, entropy) = load_prep(cfg)?;
    let pairs = tokenized_pairs(cfg, &vocab)?;
    let spec = cfg.schedule_spec();
    let task = TrainTask::new(pairs, vocab.clone(), entropy, spec).map_err(input)?;
    let mcfg = cfg.model_config(vocab.size(), task.len);
    if mcfg.max_len > cfg.max_len {
        println!("train: raising model.max_len to {} to fit the corpus rows", mcfg.max_len);
    }
    let tcfg = cfg.train_config();

    let mut trainer = match resume {
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            init_rng.set_stream(1);
            let params = ModelParams::init(&mcfg, &mut init_rng).map_err(input)?;
            Trainer::new(task, params, tcfg).map_err(input)?
        }
        Some(path) => {
            let ckpt = load_checkpoint(&path).map_err(input)?;
            if ckpt.vocab != vocab {
                return Err(CliError::Input(format!(
                    "{}: checkpoint vocabulary does not match the prepared one",
                    path.display()
                )));
            }
            if ckpt.row_len != task.len {
                return Err(CliError::Input(format!(
                    "{}: checkpoint rows are {} positions, corpus needs {}",
                    path.display(),
                    ckpt.row_len,
                    task.len
                )));
            }
            println!("train: resuming from {} at step {}", path.display(), ckpt.step);
            Trainer::resume(task, ckpt.params(), tcfg, ckpt.step).map_err(input)?
        }
    };

    ensure_dir(&cfg.run_dir)?;
    write_file(&cfg.run_dir.join("config.resolved"), &cfg.to_text())?;
    let log_path = cfg.run_dir.join("metrics.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::Input(format!("{}: {}", log_path.display(), e)))?;

    let echo_every = (cfg.steps / 10).max(1);
    while trainer.step < cfg.steps {
        let rec = match trainer.train_step() {
            Ok(rec) => rec,
            Err(TrainingError::Numeric { step, detail }) => {
                return Err(CliError::Numeric(format!("step {}: {}", step, detail)));
            }
            Err(e) => return Err(input(e)),
        };
        writeln!(
            log,
            "step={} loss={:.6} mse={:.6} nll={:.6} grad_norm={:.6} lr={:.8}",
            rec.step, rec.loss, rec.mse, rec.nll, rec.grad_norm, rec.lr
        )
        .map_err(|e| CliError::Input(format!("{}: {}", log_path.display(), e)))?;
        if rec.step % echo_every == 0 || rec.step == cfg.steps {
            println!("{}", metrics_line(&rec));
        }
        if rec.step % cfg.checkpoint_interval == 0 || rec.step == cfg.steps {
            let ckpt = snapshot(&trainer);
            let path = cfg.run_dir.join(format!("ckpt_{}.idif", rec.step));
            save_checkpoint(&path, &ckpt).map_err(input)?;
        }
    }
    let ckpt = snapshot(&trainer);
    save_checkpoint(&cfg.run_dir.join("final.idif"), &ckpt).map_err(input)?;
    println!("train: {} steps done, final checkpoint at {}", trainer.step, cfg.run_dir.join("final.idif").display());
    Ok(())
}

fn snapshot(trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        model: trainer.params.config.clone(),
        train: trainer.config.clone(),
        spec: trainer.task.spec.clone(),
        step: trainer.step,
        row_len: trainer.task.len,
        gen_slots: trainer.task.gen_slots,
        vocab: trainer.task.vocab.clone(),
        entropy: trainer.task.entropy.clone(),
        tensors: trainer.params.tensors.clone(),
    }
}

pub struct SampleArgs {
    pub checkpoint: Option<PathBuf>,
    pub source: PathBuf,
    pub out: Option<PathBuf>,
    pub schedule: Option<ScheduleKind>,
    pub lambda: Option<f64>,
}

/// Generates `candidates` samples per source line, picks each line's MBR
/// winner, and writes winners, all candidates, and per-candidate traces.
pub fn cmd_sample(cfg: &RunConfig, args: &SampleArgs) -> Result<(), CliError> {
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| cfg.run_dir.join("final.idif"));
    let ckpt = load_checkpoint(&ckpt_path).map_err(input)?;
    let vp = vocab_path(cfg);
    if vp.exists() {
        let prepared = load_vocab(&vp).map_err(input)?;
        if prepared != ckpt.vocab {
            return Err(CliError::Input(format!(
                "{}: vocabulary does not match the checkpoint's",
                vp.display()
            )));
        }
    }
    let params = ckpt.params();

    let mut spec = ckpt.spec.clone();
    if let Some(kind) = args.schedule {
        spec.kind = kind;
    }
    if let Some(lambda) = args.lambda {
        spec.lambda = lambda;
    }
    // Target words are unknown before generation, so inference tables get
    // zero entropy shaping at every position.
    let table = alphabar_table(&spec, &vec![0.0; ckpt.row_len]).map_err(input)?;

    let mut steps = cfg.sample_steps;
    if steps > spec.t_max {
        println!("sample: clamping steps to the schedule length {}", spec.t_max);
        steps = spec.t_max;
    }
    if cfg.candidates == 0 {
        return Err(CliError::Input("need at least one candidate per source".to_string()));
    }

    let sources = read_lines(&args.source)?;
    if sources.iter().all(|l| l.trim().is_empty()) {
        return Err(CliError::Input(format!("{}: no source lines", args.source.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.run_dir.join("samples"));
    let traces_dir = out.join("traces");
    ensure_dir(&traces_dir)?;

    let opts = SampleOptions { use_self_cond: cfg.self_cond, clamp_x0: cfg.clamp_x0, seed: cfg.seed };
    let mut hyps = String::new();
    let mut cands = String::new();
    for (i, line) in sources.iter().enumerate() {
        let ids = tokenize(line, &ckpt.vocab);
        if ids.is_empty() {
            return Err(CliError::Input(format!("{}: line {} is empty", args.source.display(), i + 1)));
        }
        let mut texts = Vec::with_capacity(cfg.candidates);
        let mut outs = Vec::with_capacity(cfg.candidates);
        for c in 0..cfg.candidates {
            let mut rng = candidate_rng(cfg.seed, (i * cfg.candidates + c) as u64);
            let (tokens, trace) =
                reverse_sample(&ids, ckpt.gen_slots, &params, &table, steps, &mut rng, &opts)
                    .map_err(input)?;
            let text = detokenize(&tokens, &ckpt.vocab);
            write_file(&traces_dir.join(format!("line{}_cand{}.trace", i, c)), &trace_to_string(&trace))?;
            let _ = writeln!(cands, "{}\t{}\t{}", i, c, text);
            texts.push(text);
            outs.push(tokens);
        }
        let winner = mbr_select(&outs).map_err(input)?;
        let _ = writeln!(hyps, "{}", texts[winner]);
    }
    write_file(&out.join("hyps.txt"), &hyps)?;
    write_file(&out.join("candidates.txt"), &cands)?;
    println!(
        "sample: {} sources x {} candidates with {} steps -> {}",
        sources.len(),
        cfg.candidates,
        steps,
        out.display()
    );
    Ok(())
}

fn whitespace_tokens(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}

/// Parses a candidates.txt export back into per-source groups.
fn sample_groups(path: &Path) -> Result<Vec<Vec<Vec<String>>>, CliError> {
    let mut groups: Vec<Vec<Vec<String>>> = Vec::new();
    for (ln, line) in read_lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (idx, _cand, text) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(CliError::Input(format!(
                    "{}: line {}: expected line, candidate, text",
                    path.display(),
                    ln + 1
                )))
            }
        };
        let idx: usize = idx
            .parse()
            .map_err(|e| CliError::Input(format!("{}: line {}: {}", path.display(), ln + 1, e)))?;
        while groups.len() <= idx {
            groups.push(Vec::new());
        }
        groups[idx].push(text.split_whitespace().map(str::to_string).collect());
    }
    Ok(groups)
}

pub struct EvalArgs {
    pub hyps: PathBuf,
    pub refs: PathBuf,
    pub samples: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Scores hypotheses against aligned references and writes the report.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let hyp_lines = read_lines(&args.hyps)?;
    let ref_lines = read_lines(&args.refs)?;
    if hyp_lines.len() != ref_lines.len() {
        return Err(CliError::Input(format!(
            "{} has {} lines, {} has {}",
            args.hyps.display(),
            hyp_lines.len(),
            args.refs.display(),
            ref_lines.len()
        )));
    }
    if let Some((i, _)) = ref_lines.iter().enumerate().find(|(_, l)| l.trim().is_empty()) {
        return Err(CliError::Input(format!("{}: reference line {} is empty", args.refs.display(), i + 1)));
    }
    let hyps = whitespace_tokens(&hyp_lines);
    let refs = whitespace_tokens(&ref_lines);
    let groups = match &args.samples {
        Some(path) => Some(sample_groups(path)?),
        None => None,
    };
    let report = MetricReport::compute(&hyps, &refs, groups.as_deref()).map_err(input)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.run_dir.join("report.txt"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_file(&out, &report.to_text())?;
    print!("{}", report.to_text());
    println!("eval: report written to {}", out.display());
    Ok(())
}

pub struct TraceArgs {
    pub dir: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn trace_line_index(name: &str) -> Option<usize> {
    name.strip_prefix("line")?.split('_').next()?.parse().ok()
}

/// Builds the decode-order report over a directory of trace files and,
/// given references, the BLEU-vs-step curve data.
pub fn cmd_trace(cfg: &RunConfig, args: &TraceArgs) -> Result<(), CliError> {
    let dir = args.dir.clone().unwrap_or_else(|| cfg.run_dir.join("samples").join("traces"));
    let mut entries: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "trace"))
            .collect(),
        Err(e) => return Err(CliError::Input(format!("{}: {}", dir.display(), e))),
    };
    entries.sort();
    if entries.is_empty() {
        return Err(CliError::Input(format!("{}: no trace files", dir.display())));
    }
    let (vocab, entropy) = load_prep(cfg)?;
    let mut traces: Vec<(usize, SampleTrace)> = Vec::with_capacity(entries.len());
    for path in &entries {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e)))?;
        let trace = trace_from_str(&text).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e)))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let line = trace_line_index(stem).unwrap_or(0);
        traces.push((line, trace));
    }

    let only: Vec<SampleTrace> = traces.iter().map(|(_, t)| t.clone()).collect();
    let report = decode_order_report(&only, &entropy).map_err(input)?;
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.run_dir.clone());
    ensure_dir(&out_dir)?;
    write_file(&out_dir.join("decode_order.txt"), &report.to_text())?;
    print!("{}", report.to_text());

    if let Some(ref_path) = &args.references {
        let ref_lines = read_lines(ref_path)?;
        let refs: Vec<Vec<usize>> = ref_lines.iter().map(|l| tokenize(l, &vocab)).collect();
        let mut curve: std::collections::BTreeMap<usize, (f64, usize)> = std::collections::BTreeMap::new();
        for (line, trace) in &traces {
            let reference = refs.get(*line).ok_or_else(|| {
                CliError::Input(format!("{}: no reference line {}", ref_path.display(), line))
            })?;
            if reference.is_empty() {
                return Err(CliError::Input(format!("{}: reference line {} is empty", ref_path.display(), line + 1)));
            }
            for step in &trace.steps {
                let hyp = target_tokens(&step.tokens, &trace.source_mask, &trace.pad_mask);
                let score = if hyp.is_empty() { 0.0 } else { bleu(&hyp, reference, 4).map_err(input)? };
                let slot = curve.entry(step.step).or_insert((0.0, 0));
                slot.0 += score;
                slot.1 += 1;
            }
        }
        let mut text = String::new();
        for (step, (sum, n)) in &curve {
            let _ = writeln!(text, "{}\t{:.6}", step, sum / *n as f64);
        }
        write_file(&out_dir.join("bleu_curve.txt"), &text)?;
        println!("trace: curve over {} steps written to {}", curve.len(), out_dir.join("bleu_curve.txt").display());
    }
    println!("trace: {} traces summarized", traces.len());
    Ok(())
}
