//! Run configuration: a flat key=value text format shared by config files,
//! command-line flag overrides, and checkpoint headers.
//!
//! Every knob the training loop, evaluator, and transfer pipeline consume
//! lives here so that a run is fully described by one small text blob. The
//! serialized form is deterministic (fixed key order, shortest-roundtrip
//! float formatting), which lets checkpoint headers participate in bit-exact
//! reproducibility checks.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::FeatureKind;
use crate::numerics::Precision;
use crate::optimizer::LrRule;
use crate::scaler::DEFAULT_GROWTH_INTERVAL;

/// Complete description of a training/evaluation run.
///
/// Defaults describe a small desk-scale run; anything data-dependent
/// (`data`) starts empty and must be supplied before training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// LSTM hidden width h.
    pub hidden_dim: usize,
    /// Byte embedding width.
    pub embed_dim: usize,
    /// Truncation length T of backprop through time.
    pub seq_len: usize,
    /// Global minibatch rows B (split evenly across workers).
    pub batch_size: usize,
    /// Data-parallel worker count N.
    pub n_workers: usize,
    /// Learning rate at the reference batch size of 128.
    pub base_lr: f64,
    /// How `base_lr` scales with `batch_size`: none, linear, or sqrt.
    pub lr_rule: LrRule,
    /// Iterations over which the rate decays linearly to zero; training also
    /// stops here. 0 disables the decay schedule (constant rate).
    pub decay_iters: u64,
    /// Epoch cap; 0 means no epoch-based stop.
    pub max_epochs: u32,
    /// Clean steps between loss-scale doublings.
    pub growth_interval: u32,
    /// mixed (FP16 working weights) or fp32 (everything FP32).
    pub precision: Precision,
    /// Master seed for init, corpus shuffling, and shard dealing.
    pub seed: u64,
    /// Corpus path: a file of newline-separated records, or a directory of
    /// such files.
    pub data: String,
    /// Rows used by held-out evaluation.
    pub eval_batch: usize,
    /// Where the final checkpoint lands.
    pub checkpoint: String,
    /// Also checkpoint every this many iterations (0 = final only). Periodic
    /// files get the iteration number appended, e.g. `model.mlmf.2000`.
    pub checkpoint_every: u64,
    /// Checkpoint to continue from; empty starts fresh.
    pub resume: String,
    /// Per-iteration metrics CSV path.
    pub metrics: String,
    /// Which recurrent state becomes the transfer feature vector.
    pub feature_kind: FeatureKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden_dim: 256,
            embed_dim: 64,
            seq_len: 256,
            batch_size: 32,
            n_workers: 1,
            base_lr: 5e-4,
            lr_rule: LrRule::None,
            decay_iters: 10_000,
            max_epochs: 0,
            growth_interval: DEFAULT_GROWTH_INTERVAL,
            precision: Precision::Mixed,
            seed: 42,
            data: String::new(),
            eval_batch: 16,
            checkpoint: "checkpoint.mlmf".into(),
            checkpoint_every: 0,
            resume: String::new(),
            metrics: "metrics.csv".into(),
            feature_kind: FeatureKind::CellState,
        }
    }
}

/// Key names in serialization order. Kept in one place so the parser, the
/// serializer, and the CLI flag mirror never drift apart.
pub const CONFIG_KEYS: [&str; 20] = [
    "hidden_dim",
    "embed_dim",
    "seq_len",
    "batch_size",
    "n_workers",
    "base_lr",
    "lr_rule",
    "decay_iters",
    "max_epochs",
    "growth_interval",
    "precision",
    "seed",
    "data",
    "eval_batch",
    "checkpoint",
    "checkpoint_every",
    "resume",
    "metrics",
    "feature_kind",
    "window",
];

/// Streaming window for featurization. Not a real knob — results are bitwise
/// independent of it — but exposed so memory use on long texts is tunable.
pub const DEFAULT_FEATURE_WINDOW: usize = 4096;

impl RunConfig {
    /// Apply one `key=value` assignment. Unknown keys and malformed values
    /// are errors; catching typos beats silently training the wrong model.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Config(format!("invalid value {value:?} for config key {key}"))
            })
        }
        let value = value.trim();
        match key {
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "seq_len" => self.seq_len = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "n_workers" => self.n_workers = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "lr_rule" => self.lr_rule = LrRule::parse(value)?,
            "decay_iters" => self.decay_iters = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "growth_interval" => self.growth_interval = num(key, value)?,
            "precision" => self.precision = Precision::parse(value)?,
            "seed" => self.seed = num(key, value)?,
            "data" => self.data = value.to_string(),
            "eval_batch" => self.eval_batch = num(key, value)?,
            "checkpoint" => self.checkpoint = value.to_string(),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "resume" => self.resume = value.to_string(),
            "metrics" => self.metrics = value.to_string(),
            "feature_kind" => self.feature_kind = FeatureKind::parse(value)?,
            // Accepted for compatibility with older config files; the value
            // is fixed because it cannot change any result.
            "window" => {
                let _: usize = num(key, value)?;
            }
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Current value of one key, formatted exactly as serialization writes it.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "hidden_dim" => self.hidden_dim.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "n_workers" => self.n_workers.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "lr_rule" => self.lr_rule.name().to_string(),
            "decay_iters" => self.decay_iters.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "growth_interval" => self.growth_interval.to_string(),
            "precision" => self.precision.name().to_string(),
            "seed" => self.seed.to_string(),
            "data" => self.data.clone(),
            "eval_batch" => self.eval_batch.to_string(),
            "checkpoint" => self.checkpoint.clone(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "resume" => self.resume.clone(),
            "metrics" => self.metrics.clone(),
            "feature_kind" => self.feature_kind.name().to_string(),
            "window" => DEFAULT_FEATURE_WINDOW.to_string(),
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        })
    }

    /// Parse the flat text format: one `key=value` per line, `#` comments
    /// and blank lines ignored, later assignments overriding earlier ones.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    /// Like [`RunConfig::from_text`], but layered on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {} is not key=value: {line:?}",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("config line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Serialize every key in [`CONFIG_KEYS`] order. The output parses back
    /// to an equal config and is byte-stable across runs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = self.get(key).expect("CONFIG_KEYS entries are all known");
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }

    /// Check every field against the preconditions of the modules that
    /// consume it. Path keys are existence-checked lazily by their consumers,
    /// not here.
    pub fn validate(&self) -> Result<()> {
        fn positive(what: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be positive")));
            }
            Ok(())
        }
        positive("hidden_dim", self.hidden_dim)?;
        positive("embed_dim", self.embed_dim)?;
        positive("seq_len", self.seq_len)?;
        positive("batch_size", self.batch_size)?;
        positive("n_workers", self.n_workers)?;
        positive("eval_batch", self.eval_batch)?;
        if self.batch_size % self.n_workers != 0 {
            return Err(Error::Config(format!(
                "batch_size {} is not divisible by n_workers {}",
                self.batch_size, self.n_workers
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if self.growth_interval == 0 {
            return Err(Error::Config("growth_interval must be positive".into()));
        }
        Ok(())
    }
}
