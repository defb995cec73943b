//! Noise schedules: how much of the original signal survives at step t.
//!
//! All schedules are expressed through the cumulative signal fraction
//! alpha_bar with alpha_bar[0] = 1 (clean) and alpha_bar[T] = 0 (pure
//! noise). Four position-uniform families are provided, plus a per-position
//! family that keeps informative tokens cleaner for longer:
//!
//!   alpha_bar[t][i] = clamp(1 - t/T + lambda * sin(pi t / T) * e_i, 0, 1)
//!
//! where e_i is the token's self-information rescaled to [-1, 1] around the
//! sentence mean. With lambda <= 1/pi the per-position curves stay
//! non-increasing in t, so the forward process never adds signal back.
//!
//! Tables force the boundary rows to exactly 1 and 0 rather than trusting
//! floating-point trig to land there.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::textcorpus::SentenceProfile;

/// Range below which an entropy spread counts as degenerate.
const DEGENERATE_RANGE: f64 = 1e-12;
/// Cumulative signal this small is treated as fully noised.
const ALPHABAR_FLOOR: f64 = 1e-12;
/// On-disk magic for exported tables.
const ABAR_MAGIC: &[u8; 4] = b"ABAR";
const ABAR_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ScheduleError {
    /// Invalid schedule parameters.
    Config(String),
    /// A built table failed the non-increasing check.
    Monotonicity { t: usize, position: usize },
    /// An exported table file is malformed at this byte offset.
    Format { offset: u64, detail: String },
    Io(std::io::Error),
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleError::Config(d) => write!(f, "{}", d),
            ScheduleError::Monotonicity { t, position } => {
                write!(f, "alpha_bar increases at t={} position {}", t, position)
            }
            ScheduleError::Format { offset, detail } => write!(f, "byte {}: {}", offset, detail),
            ScheduleError::Io(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for ScheduleError {}

impl From<std::io::Error> for ScheduleError {
    fn from(e: std::io::Error) -> Self {
        ScheduleError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linearly spaced per-step betas, cumulative product alpha_bar.
    Linear,
    /// Squared-cosine curve normalized to start at 1.
    Cosine,
    /// 1 - sqrt(t/T + s), clamped.
    Sqrt,
    /// Straight line 1 - t/T.
    MutualInfo,
    /// Mutual-info line shaped per position by token self-information.
    InfoAware,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sqrt => "sqrt",
            ScheduleKind::MutualInfo => "mi",
            ScheduleKind::InfoAware => "info",
        }
    }

    pub fn from_name(name: &str) -> Option<ScheduleKind> {
        match name {
            "linear" => Some(ScheduleKind::Linear),
            "cosine" => Some(ScheduleKind::Cosine),
            "sqrt" => Some(ScheduleKind::Sqrt),
            "mi" => Some(ScheduleKind::MutualInfo),
            "info" => Some(ScheduleKind::InfoAware),
            _ => None,
        }
    }
}

/// Parameters defining a schedule family instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Number of diffusion steps T; tables cover t = 0..=T.
    pub t_max: usize,
    /// Entropy shaping strength (InfoAware only).
    pub lambda: f64,
    /// Small offset used by the cosine and sqrt families.
    pub s: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Reject lambda values that could let alpha_bar increase in t.
    pub enforce_monotonic: bool,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, t_max: usize) -> ScheduleSpec {
        let s = match kind {
            ScheduleKind::Cosine => 0.008,
            _ => 1e-4,
        };
        ScheduleSpec {
            kind,
            t_max,
            lambda: 0.25,
            s,
            beta_min: 1e-4,
            beta_max: 0.02,
            enforce_monotonic: true,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.t_max < 1 {
            return Err(ScheduleError::Config("t_max must be at least 1".to_string()));
        }
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max < 1.0) {
            return Err(ScheduleError::Config(format!(
                "betas must satisfy 0 < beta_min < beta_max < 1, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        if self.s < 0.0 {
            return Err(ScheduleError::Config(format!("s must be non-negative, got {}", self.s)));
        }
        if self.lambda < 0.0 {
            return Err(ScheduleError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.kind == ScheduleKind::InfoAware && self.enforce_monotonic && self.lambda > 1.0 / PI {
            return Err(ScheduleError::Config(format!(
                "lambda {} exceeds 1/pi; per-position alpha_bar could increase in t",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// The position-uniform alpha_bar value at step t, before any boundary
/// forcing. The InfoAware family falls back to its e = 0 backbone here.
pub fn base_alphabar(spec: &ScheduleSpec, t: usize) -> f64 {
    let tt = spec.t_max as f64;
    let x = t as f64 / tt;
    match spec.kind {
        ScheduleKind::Linear => {
            let mut prod = 1.0f64;
            for i in 1..=t {
                let frac = if spec.t_max > 1 { (i - 1) as f64 / (spec.t_max - 1) as f64 } else { 0.0 };
                let beta = spec.beta_min + (spec.beta_max - spec.beta_min) * frac;
                prod *= 1.0 - beta;
            }
            prod
        }
        ScheduleKind::Cosine => {
            let f = |u: f64| ((u + spec.s) / (1.0 + spec.s) * PI / 2.0).cos().powi(2);
            f(x) / f(0.0)
        }
        ScheduleKind::Sqrt => (1.0 - (x + spec.s).sqrt()).clamp(0.0, 1.0),
        ScheduleKind::MutualInfo | ScheduleKind::InfoAware => 1.0 - x,
    }
}

/// Time-dependent shaping weight lambda(t) = lambda * sin(pi t / T).
pub fn lambda_weight(spec: &ScheduleSpec, t: usize) -> f64 {
    spec.lambda * (PI * t as f64 / spec.t_max as f64).sin()
}

/// Rescales a sentence's self-information to [-1, 1] around its mean:
/// e_i = (H_i - mean) / (max - min). Reserved positions and degenerate
/// ranges map to 0.
pub fn entropy_relative(profile: &SentenceProfile) -> Vec<f64> {
    let range = profile.max - profile.min;
    profile
        .h
        .iter()
        .zip(&profile.reserved)
        .map(|(&h, &reserved)| {
            if reserved || range < DEGENERATE_RANGE {
                0.0
            } else {
                (h - profile.mean) / range
            }
        })
        .collect()
}

/// Cumulative signal fractions for one sequence: a (T+1) x L grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBarTable {
    spec: ScheduleSpec,
    len: usize,
    /// Row-major grid, rows indexed by t in 0..=T.
    grid: Vec<f32>,
}

impl AlphaBarTable {
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Sequence length the table covers.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn t_max(&self) -> usize {
        self.spec.t_max
    }

    /// alpha_bar at step t for position i.
    pub fn get(&self, t: usize, i: usize) -> f64 {
        debug_assert!(t <= self.spec.t_max && i < self.len);
        self.grid[t * self.len + i] as f64
    }

    pub fn grid(&self) -> &[f32] {
        &self.grid
    }
}

/// Builds the alpha_bar grid for one sequence. `e` carries one entropy
/// weight per position (ignored outside the InfoAware family); its length
/// fixes the table width. Boundary rows are forced to exactly 1 and 0.
pub fn alphabar_table(spec: &ScheduleSpec, e: &[f64]) -> Result<AlphaBarTable, ScheduleError> {
    spec.validate()?;
    if e.is_empty() {
        return Err(ScheduleError::Config("table needs at least one position".to_string()));
    }
    if let Some(bad) = e.iter().find(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
        return Err(ScheduleError::Config(format!("entropy weight {} outside [-1, 1]", bad)));
    }
    let len = e.len();
    let t_max = spec.t_max;
    let mut grid = vec![0.0f32; (t_max + 1) * len];
    for t in 0..=t_max {
        let row = &mut grid[t * len..(t + 1) * len];
        if t == 0 {
            row.iter_mut().for_each(|v| *v = 1.0);
            continue;
        }
        if t == t_max {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        match spec.kind {
            ScheduleKind::InfoAware => {
                let backbone = 1.0 - t as f64 / t_max as f64;
                let w = lambda_weight(spec, t);
                for (i, v) in row.iter_mut().enumerate() {
                    *v = (backbone + w * e[i]).clamp(0.0, 1.0) as f32;
                }
            }
            _ => {
                let a = base_alphabar(spec, t) as f32;
                row.iter_mut().for_each(|v| *v = a);
            }
        }
    }
    let table = AlphaBarTable { spec: spec.clone(), len, grid };
    if spec.enforce_monotonic {
        for i in 0..len {
            for t in 1..=t_max {
                if table.get(t, i) > table.get(t - 1, i) {
                    return Err(ScheduleError::Monotonicity { t, position: i });
                }
            }
        }
    }
    Ok(table)
}

/// Per-step signal retention alpha_t = alpha_bar[t] / alpha_bar[t-1] at a
/// position, or 0 once the previous step is already fully noised.
pub fn per_step_alpha(table: &AlphaBarTable, t: usize, i: usize) -> f64 {
    assert!(t >= 1 && t <= table.t_max(), "per-step alpha needs 1 <= t <= T, got {}", t);
    let prev = table.get(t - 1, i);
    if prev < ALPHABAR_FLOOR {
        0.0
    } else {
        table.get(t, i) / prev
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".txt");
    PathBuf::from(os)
}

/// Writes a table: binary grid (magic, version, then (T+1) x L f32 values
/// row-major, little-endian) plus a text sidecar with the parameters.
pub fn save_alphabar(path: &Path, table: &AlphaBarTable) -> Result<(), ScheduleError> {
    let mut bytes = Vec::with_capacity(8 + table.grid.len() * 4);
    bytes.extend_from_slice(ABAR_MAGIC);
    bytes.extend_from_slice(&ABAR_VERSION.to_le_bytes());
    for v in &table.grid {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let spec = &table.spec;
    let mut f = fs::File::create(sidecar_path(path))?;
    writeln!(f, "kind = {}", spec.kind.name())?;
    writeln!(f, "t_max = {}", spec.t_max)?;
    writeln!(f, "len = {}", table.len)?;
    writeln!(f, "lambda = {}", spec.lambda)?;
    writeln!(f, "s = {}", spec.s)?;
    writeln!(f, "beta_min = {}", spec.beta_min)?;
    writeln!(f, "beta_max = {}", spec.beta_max)?;
    writeln!(f, "enforce_monotonic = {}", spec.enforce_monotonic)?;
    Ok(())
}

/// Reads a table written by `save_alphabar`, checking magic, version and
/// exact payload size.
pub fn load_alphabar(path: &Path) -> Result<AlphaBarTable, ScheduleError> {
    let sidecar = fs::read_to_string(sidecar_path(path))?;
    let mut kind = None;
    let mut t_max = None;
    let mut len = None;
    let mut lambda = None;
    let mut s = None;
    let mut beta_min = None;
    let mut beta_max = None;
    let mut enforce = None;
    for (i, line) in sidecar.lines().enumerate() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| ScheduleError::Format {
            offset: 0,
            detail: format!("sidecar line {}: expected 'key = value'", i + 1),
        })?;
        let bad = |detail: String| ScheduleError::Format { offset: 0, detail };
        match k {
            "kind" => kind = Some(ScheduleKind::from_name(v).ok_or_else(|| bad(format!("unknown kind '{}'", v)))?),
            "t_max" => t_max = Some(v.parse().map_err(|_| bad(format!("bad t_max '{}'", v)))?),
            "len" => len = Some(v.parse().map_err(|_| bad(format!("bad len '{}'", v)))?),
            "lambda" => lambda = Some(v.parse().map_err(|_| bad(format!("bad lambda '{}'", v)))?),
            "s" => s = Some(v.parse().map_err(|_| bad(format!("bad s '{}'", v)))?),
            "beta_min" => beta_min = Some(v.parse().map_err(|_| bad(format!("bad beta_min '{}'", v)))?),
            "beta_max" => beta_max = Some(v.parse().map_err(|_| bad(format!("bad beta_max '{}'", v)))?),
            "enforce_monotonic" => enforce = Some(v == "true"),
            other => return Err(bad(format!("unknown sidecar key '{}'", other))),
        }
    }
    let missing = |what: &str| ScheduleError::Format { offset: 0, detail: format!("sidecar missing {}", what) };
    let spec = ScheduleSpec {
        kind: kind.ok_or_else(|| missing("kind"))?,
        t_max: t_max.ok_or_else(|| missing("t_max"))?,
        lambda: lambda.ok_or_else(|| missing("lambda"))?,
        s: s.ok_or_else(|| missing("s"))?,
        beta_min: beta_min.ok_or_else(|| missing("beta_min"))?,
        beta_max: beta_max.ok_or_else(|| missing("beta_max"))?,
        enforce_monotonic: enforce.ok_or_else(|| missing("enforce_monotonic"))?,
    };
    let len = len.ok_or_else(|| missing("len"))?;
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != ABAR_MAGIC {
        return Err(ScheduleError::Format { offset: 0, detail: "bad magic, expected ABAR".to_string() });
    }
    if bytes.len() < 8 {
        return Err(ScheduleError::Format { offset: 4, detail: "truncated before version".to_string() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ABAR_VERSION {
        return Err(ScheduleError::Format { offset: 4, detail: format!("unsupported version {}", version) });
    }
    let expected = 8 + (spec.t_max + 1) * len * 4;
    if bytes.len() != expected {
        return Err(ScheduleError::Format {
            offset: bytes.len().min(expected) as u64,
            detail: format!("payload is {} bytes, expected {}", bytes.len(), expected),
        });
    }
    let grid = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(AlphaBarTable { spec, len, grid })
}
