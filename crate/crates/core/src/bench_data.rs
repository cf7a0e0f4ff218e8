//! Damped pendulum transitions under behavior policies of increasing spread.
//!
//! Inputs are `[angle, velocity, action]`, targets the one-step state change.
//! Every split is collected by rollouts from its own seed stream; ID data follow
//! a noisy stabilizing controller, `near`/`mid` scale its noise, `far` draws
//! actions uniformly over the whole range.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng, Matrix};

pub const DATASET_MAGIC: &str = "pnc-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const SPLIT_NAMES: [&str; 6] = ["train", "val", "id", "near", "mid", "far"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub eval_size: usize,
    pub gravity_over_length: f64,
    pub damping: f64,
    pub dt: f64,
    pub substeps: usize,
    pub episode_len: usize,
    pub policy_noise: f64,
    pub near_factor: f64,
    pub mid_factor: f64,
    pub action_limit: f64,
    pub target_noise: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            train_size: 4000,
            val_size: 1000,
            eval_size: 1000,
            gravity_over_length: 4.0,
            damping: 0.1,
            dt: 0.1,
            substeps: 1,
            episode_len: 20,
            policy_noise: 0.25,
            near_factor: 2.0,
            mid_factor: 4.0,
            action_limit: 3.0,
            target_noise: 0.01,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.train_size, self.val_size, self.eval_size, self.substeps, self.episode_len];
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("split sizes, substeps and episode length must be >= 1".into()));
        }
        let positive = [self.gravity_over_length, self.dt, self.policy_noise, self.action_limit];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("pendulum constants, noise and action limit must be > 0".into()));
        }
        if !(self.damping >= 0.0) || !(self.target_noise >= 0.0) {
            return Err(Error::InvalidConfig("damping and target noise must be >= 0".into()));
        }
        if !(1.0 < self.near_factor && self.near_factor < self.mid_factor && self.mid_factor.is_finite()) {
            return Err(Error::InvalidConfig("need 1 < near_factor < mid_factor".into()));
        }
        Ok(())
    }

    fn size_of(&self, split: &str) -> usize {
        match split {
            "train" => self.train_size,
            "val" => self.val_size,
            _ => self.eval_size,
        }
    }
}

/// `(angle, velocity)`.
pub type State = [f64; 2];

fn derivative(cfg: &BenchConfig, s: State, a: f64) -> State {
    [s[1], -cfg.gravity_over_length * s[0].sin() - cfg.damping * s[1] + a]
}

/// One RK4 step of length `dt`, split into `substeps`.
pub fn step(cfg: &BenchConfig, s: State, a: f64) -> State {
    let h = cfg.dt / cfg.substeps as f64;
    let mut x = s;
    for _ in 0..cfg.substeps {
        let add = |x: State, k: State, c: f64| [x[0] + c * k[0], x[1] + c * k[1]];
        let k1 = derivative(cfg, x, a);
        let k2 = derivative(cfg, add(x, k1, h / 2.0), a);
        let k3 = derivative(cfg, add(x, k2, h / 2.0), a);
        let k4 = derivative(cfg, add(x, k3, h), a);
        x = [
            x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
    }
    x
}

/// Noise-free controller the ID behavior is built around.
pub fn expert_action(s: State) -> f64 {
    -2.0 * s[0].sin() - 1.0 * s[1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Behavior {
    Expert { noise: f64 },
    Uniform,
}

fn behavior(cfg: &BenchConfig, split: &str) -> Behavior {
    match split {
        "near" => Behavior::Expert { noise: cfg.policy_noise * cfg.near_factor },
        "mid" => Behavior::Expert { noise: cfg.policy_noise * cfg.mid_factor },
        "far" => Behavior::Uniform,
        _ => Behavior::Expert { noise: cfg.policy_noise },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl DataSplit {
    pub fn empty() -> Self {
        Self { inputs: Matrix::zeros(0, 3), targets: Matrix::zeros(0, 2) }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Mean absolute action.
    pub fn mean_action_norm(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.inputs.column(2).iter().map(|a| a.abs()).sum::<f64>() / self.len() as f64
    }
}

fn collect(cfg: &BenchConfig, split: &str, n: usize, seed: u64) -> Result<DataSplit> {
    let mut rng = seeded_rng(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let kind = behavior(cfg, split);
    let lim = cfg.action_limit;
    let mut inputs = Vec::with_capacity(n * 3);
    let mut targets = Vec::with_capacity(n * 2);
    let mut rows = 0;
    while rows < n {
        let mut s: State = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        for _ in 0..cfg.episode_len {
            if rows == n {
                break;
            }
            let a = match kind {
                Behavior::Expert { noise } => expert_action(s) + noise * unit.sample(&mut rng),
                Behavior::Uniform => rng.random_range(-lim..=lim),
            }
            .clamp(-lim, lim);
            let next = step(cfg, s, a);
            inputs.extend_from_slice(&[s[0], s[1], a]);
            for k in 0..2 {
                targets.push(next[k] - s[k] + cfg.target_noise * unit.sample(&mut rng));
            }
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteResult(format!("pendulum state in split {split}")));
            }
            s = next;
            rows += 1;
        }
    }
    Ok(DataSplit { inputs: Matrix::from_row_slice(n, 3, &inputs), targets: Matrix::from_row_slice(n, 2, &targets) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedDataset {
    pub config: BenchConfig,
    pub seed: u64,
    /// In [`SPLIT_NAMES`] order.
    pub splits: Vec<DataSplit>,
}

impl ShiftedDataset {
    pub fn split(&self, name: &str) -> Result<&DataSplit> {
        SPLIT_NAMES
            .iter()
            .position(|s| *s == name)
            .map(|i| &self.splits[i])
            .ok_or_else(|| Error::InvalidConfig(format!("unknown split '{name}'")))
    }

    pub fn train(&self) -> &DataSplit {
        &self.splits[0]
    }

    pub fn val(&self) -> &DataSplit {
        &self.splits[1]
    }
}

pub fn generate(config: &BenchConfig, seed: u64) -> Result<ShiftedDataset> {
    config.validate()?;
    let splits = SPLIT_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| collect(config, name, config.size_of(name), derive_seed(seed, &[0xDA7A, i as u64])))
        .collect::<Result<_>>()?;
    Ok(ShiftedDataset { config: config.clone(), seed, splits })
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitHeader {
    name: String,
    rows: usize,
    input_dim: usize,
    target_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    config: BenchConfig,
    seed: u64,
    splits: Vec<SplitHeader>,
}

fn push_row_major(out: &mut Vec<u8>, m: &Matrix) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

impl ShiftedDataset {
    /// Layout: `pnc-dataset v<N>\n`, a little-endian `u64` header length, the
    /// JSON header, then each split's inputs and targets as row-major LE `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = DatasetHeader {
            config: self.config.clone(),
            seed: self.seed,
            splits: SPLIT_NAMES
                .iter()
                .zip(&self.splits)
                .map(|(n, s)| SplitHeader {
                    name: n.to_string(),
                    rows: s.len(),
                    input_dim: s.inputs.ncols(),
                    target_dim: s.targets.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = format!("{DATASET_MAGIC} v{DATASET_VERSION}\n").into_bytes();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.splits {
            push_row_major(&mut out, &s.inputs);
            push_row_major(&mut out, &s.targets);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::CorruptFile("missing dataset header line".into()))?;
        let line =
            std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::CorruptFile("header line is not text".into()))?;
        let version = line
            .strip_prefix(DATASET_MAGIC)
            .and_then(|r| r.strip_prefix(" v"))
            .ok_or_else(|| Error::CorruptFile(format!("not a dataset file: '{line}'")))?
            .parse::<u32>()
            .map_err(|_| Error::CorruptFile(format!("bad version in '{line}'")))?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: DATASET_VERSION });
        }
        let mut pos = nl + 1;
        let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(len)
                .filter(|e| *e <= bytes.len())
                .ok_or_else(|| Error::CorruptFile(format!("file truncated: need {len} bytes at offset {pos}")))?;
            let out = &bytes[*pos..end];
            *pos = end;
            Ok(out)
        };
        let hlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let header: DatasetHeader = serde_json::from_slice(take(&mut pos, hlen)?)
            .map_err(|e| Error::CorruptFile(format!("bad dataset header: {e}")))?;
        if header.splits.len() != SPLIT_NAMES.len() || header.splits.iter().zip(SPLIT_NAMES).any(|(h, n)| h.name != n) {
            return Err(Error::CorruptFile("unexpected split list".into()));
        }
        let mut read = |rows: usize, cols: usize| -> Result<Matrix> {
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::CorruptFile("split size overflows".into()))?;
            let raw = take(&mut pos, len)?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptFile("non-finite value in payload".into()));
            }
            Ok(Matrix::from_row_slice(rows, cols, &vals))
        };
        let mut splits = Vec::new();
        for h in &header.splits {
            let inputs = read(h.rows, h.input_dim)?;
            let targets = read(h.rows, h.target_dim)?;
            splits.push(DataSplit { inputs, targets });
        }
        if pos != bytes.len() {
            return Err(Error::CorruptFile(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { config: header.config, seed: header.seed, splits })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
