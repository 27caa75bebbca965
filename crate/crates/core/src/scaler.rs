//! Automatic loss scaling: dynamic α with skip-and-halve on overflow and
//! growth after sustained stability.
//!
//! Half-precision gradients underflow long before FP32 does, so the loss is
//! multiplied by a large scale factor α before backpropagation and the master
//! gradients are divided by α afterwards. The scale is adjusted online: an
//! overflow (any non-finite weight gradient) skips the update and halves α; a
//! long enough run of clean updates doubles it. α therefore hovers just below
//! the overflow threshold, which maximizes the dynamic range preserved through
//! the half-precision storage format.
//!
//! α stays a power of two so scaling and unscaling are exact in binary
//! floating point — the scale never perturbs mantissas, only exponents.

use crate::error::{Error, Result};
use crate::numerics::Precision;

/// What the training loop should do with the update that was just computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDecision {
    /// Gradients are finite: unscale them and apply the optimizer step.
    ApplyUpdate,
    /// Overflow detected: discard the gradients, leave parameters untouched.
    SkipUpdate,
}

/// The loss-scaling state machine. One instance per training run; under data
/// parallelism the coordinator owns it and folds the workers' overflow flags
/// together (logical OR) before stepping it.
#[derive(Debug, Clone)]
pub struct LossScaleState {
    alpha: f32,
    clean_steps: u32,
    growth_interval: u32,
    backoff_factor: f32,
    growth_factor: f32,
    alpha_min: f32,
    alpha_max: f32,
}

/// Clean updates required before α is doubled.
pub const DEFAULT_GROWTH_INTERVAL: u32 = 2000;

const DEFAULT_ALPHA_INIT: f32 = 65536.0; // 2^16
const DEFAULT_ALPHA_MIN: f32 = 1.0;
const DEFAULT_ALPHA_MAX: f32 = 16_777_216.0; // 2^24

impl LossScaleState {
    /// State machine for the given precision mode. Mixed precision starts at
    /// α = 2¹⁶ with clamps [1, 2²⁴]; pure-FP32 runs pin α = 1 so the loop
    /// logic is identical but scaling is a no-op and overflow never triggers
    /// a backoff below 1.
    pub fn for_precision(precision: Precision, growth_interval: u32) -> Self {
        match precision {
            Precision::Mixed => LossScaleState {
                alpha: DEFAULT_ALPHA_INIT,
                clean_steps: 0,
                growth_interval: growth_interval.max(1),
                backoff_factor: 2.0,
                growth_factor: 2.0,
                alpha_min: DEFAULT_ALPHA_MIN,
                alpha_max: DEFAULT_ALPHA_MAX,
            },
            Precision::Fp32 => LossScaleState {
                alpha: 1.0,
                clean_steps: 0,
                growth_interval: growth_interval.max(1),
                backoff_factor: 2.0,
                growth_factor: 2.0,
                alpha_min: 1.0,
                alpha_max: 1.0,
            },
        }
    }

    /// Mixed-precision state with the default growth interval.
    pub fn new_mixed() -> Self {
        Self::for_precision(Precision::Mixed, DEFAULT_GROWTH_INTERVAL)
    }

    /// Current scale factor.
    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    /// Clean updates since the last overflow or growth event.
    pub fn clean_steps(&self) -> u32 {
        self.clean_steps
    }

    /// True when a further overflow can no longer reduce α. Repeated skips in
    /// this state mean scaling is not the problem; the run is diverging.
    pub fn at_floor(&self) -> bool {
        self.alpha <= self.alpha_min
    }

    /// Restore (α, clean_steps) from a checkpoint. α is clamped into the
    /// configured range so a checkpoint written under different clamps cannot
    /// produce an out-of-range state.
    pub fn restore(&mut self, alpha: f32, clean_steps: u32) {
        self.alpha = alpha.clamp(self.alpha_min, self.alpha_max);
        self.clean_steps = clean_steps;
    }

    /// Advance the state machine by one iteration.
    ///
    /// Overflow skips the update, halves α (clamped at the floor) and resets
    /// the clean-step counter. A clean iteration applies the update; after
    /// `growth_interval` consecutive clean updates α doubles (clamped at the
    /// ceiling) and the counter resets. Growth that immediately re-overflows
    /// is corrected by the ordinary halve path on the next iteration.
    pub fn step(&mut self, overflow: bool) -> ScaleDecision {
        if overflow {
            self.alpha = (self.alpha / self.backoff_factor).max(self.alpha_min);
            self.clean_steps = 0;
            ScaleDecision::SkipUpdate
        } else {
            self.clean_steps += 1;
            if self.clean_steps >= self.growth_interval {
                self.alpha = (self.alpha * self.growth_factor).min(self.alpha_max);
                self.clean_steps = 0;
            }
            ScaleDecision::ApplyUpdate
        }
    }
}

/// Divide master gradients by α in place. Call only after the overflow check
/// decided the update is applied; non-finite values here mean the caller
/// skipped that gate.
pub fn unscale_master_grads(grads: &mut [f32], alpha: f32) -> Result<()> {
    debug_assert!(alpha > 0.0);
    if alpha == 1.0 {
        // Exact identity; skip the pass entirely.
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Contract {
                op: "unscale_master_grads",
                detail: "non-finite gradient reached unscaling; overflow must skip the update".into(),
            });
        }
        return Ok(());
    }
    let inv = 1.0 / alpha;
    for g in grads.iter_mut() {
        if !g.is_finite() {
            return Err(Error::Contract {
                op: "unscale_master_grads",
                detail: "non-finite gradient reached unscaling; overflow must skip the update".into(),
            });
        }
        *g *= inv;
    }
    Ok(())
}
