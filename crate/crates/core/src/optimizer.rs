//! Adam on FP32 master parameters, plus the learning-rate policy: batch-size
//! scaling rules and the linear decay schedule.
//!
//! The optimizer never sees half precision. Master parameters, moments, and
//! the (already unscaled) gradients handed to [`AdamState::apply`] are all
//! FP32; the training loop re-quantizes masters into the working copies after
//! each applied update. Skipped iterations leave the moments and the update
//! count untouched, so an overflow costs a data batch but never corrupts the
//! optimizer trajectory.
//!
//! Learning-rate policy math runs in f64: the scaling rules are exact
//! power-of-two ratios at the batch sizes of interest, and the schedule is a
//! straight line, so there is no reason to let f32 rounding show up in logged
//! rates.

use crate::error::{Error, Result};

/// How the initial learning rate scales with global batch size, relative to a
/// reference rate at batch 128.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrRule {
    /// Use the base rate as-is.
    None,
    /// ε ∝ B: multiply the base rate by B/128.
    Linear,
    /// ε ∝ √B: multiply the base rate by √(B/128).
    Sqrt,
}

impl LrRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LrRule::None),
            "linear" => Ok(LrRule::Linear),
            "sqrt" => Ok(LrRule::Sqrt),
            other => Err(Error::Config(format!(
                "unknown lr rule {other:?} (expected none, linear, or sqrt)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LrRule::None => "none",
            LrRule::Linear => "linear",
            LrRule::Sqrt => "sqrt",
        }
    }
}

/// Batch size at which `base_lr` applies directly.
pub const REFERENCE_BATCH: f64 = 128.0;

/// Learning-rate policy: base rate, scaling rule, and decay schedule.
#[derive(Debug, Clone)]
pub struct LrPolicy {
    /// Reference rate at batch 128.
    pub base_lr: f64,
    pub rule: LrRule,
    /// Global batch size the rule scales to.
    pub batch_size: usize,
    /// Iterations over which the rate decays linearly to zero.
    pub decay_iters: u64,
    /// Epoch bound; training stops at this many epochs even if the decay
    /// schedule has iterations left.
    pub max_epochs: u32,
}

impl LrPolicy {
    /// Initial learning rate after applying the scaling rule.
    pub fn initial_lr(&self) -> f64 {
        let ratio = self.batch_size as f64 / REFERENCE_BATCH;
        match self.rule {
            LrRule::None => self.base_lr,
            LrRule::Linear => self.base_lr * ratio,
            LrRule::Sqrt => self.base_lr * ratio.sqrt(),
        }
    }
}

/// Linearly decayed rate at `iter`: `initial_lr · max(0, 1 − iter/decay_iters)`.
/// Reaches exactly zero at `decay_iters` and stays there.
pub fn lr_at(initial_lr: f64, decay_iters: u64, iter: u64) -> f64 {
    debug_assert!(decay_iters > 0);
    if iter >= decay_iters {
        return 0.0;
    }
    initial_lr * (1.0 - iter as f64 / decay_iters as f64)
}

/// Advisory check that the run is still in the stochastic regime the scaling
/// rules assume (B ≪ N). Warns — never blocks — when the dataset provides
/// fewer than `min_iters_per_epoch` iterations per epoch at this batch size.
pub fn check_large_batch_regime(
    batch_size: usize,
    dataset_windows: u64,
    min_iters_per_epoch: u64,
) -> bool {
    let b = batch_size.max(1) as u64;
    let warn = dataset_windows < min_iters_per_epoch.saturating_mul(b);
    if warn {
        log::warn!(
            "batch size {batch_size} is large for this dataset: {dataset_windows} training \
             windows yield fewer than {min_iters_per_epoch} iterations per epoch, so the \
             B \u{226a} N assumption behind learning-rate scaling is weak here"
        );
    }
    warn
}

/// Default iterations-per-epoch floor for [`check_large_batch_regime`].
pub const DEFAULT_MIN_ITERS_PER_EPOCH: u64 = 1000;

/// Adam moment estimates over one flat FP32 parameter vector, with bias
/// correction. `t` counts applied updates only.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
}

impl AdamState {
    /// Fresh state with standard hyperparameters (β₁=0.9, β₂=0.999, ε=1e-8).
    pub fn new(len: usize) -> Self {
        Self::with_hyperparams(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(len: usize, beta1: f32, beta2: f32, eps: f32) -> Self {
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0);
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1,
            beta2,
            eps,
            t: 0,
        }
    }

    /// Applied-update count.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// First and second moment vectors, for checkpointing.
    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }

    /// Rebuild state from checkpointed moments and update count.
    pub fn from_parts(
        m: Vec<f32>,
        v: Vec<f32>,
        t: u64,
        beta1: f32,
        beta2: f32,
        eps: f32,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_from_parts",
                detail: format!("moment lengths differ: m={} v={}", m.len(), v.len()),
            });
        }
        if v.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Contract {
                op: "adam_from_parts",
                detail: "second moment contains negative or non-finite entries".into(),
            });
        }
        Ok(AdamState { m, v, beta1, beta2, eps, t })
    }

    /// One bias-corrected Adam update on the masters, in place. Gradients must
    /// already be unscaled and finite — overflow handling happens upstream, so
    /// a non-finite gradient here is a caller bug, not a recoverable event.
    pub fn apply(&mut self, masters: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
        if masters.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_apply",
                detail: format!(
                    "masters={} grads={} state={}",
                    masters.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Contract {
                op: "adam_apply",
                detail: "non-finite gradient; overflow must be skipped before the optimizer".into(),
            });
        }
        self.t += 1;
        // Bias corrections in f64: β₂^t is tiny at large t and the subtraction
        // from 1 deserves the extra headroom.
        let bc1 = 1.0 - (self.beta1 as f64).powf(self.t as f64);
        let bc2 = 1.0 - (self.beta2 as f64).powf(self.t as f64);
        let inv_bc1 = (1.0 / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for i in 0..masters.len() {
            let g = grads[i];
            let m = b1 * self.m[i] + (1.0 - b1) * g;
            let v = b2 * self.v[i] + (1.0 - b2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let mhat = m * inv_bc1;
            let vhat = v * inv_bc2;
            masters[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}
