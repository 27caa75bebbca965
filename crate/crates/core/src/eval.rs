//! Held-out evaluation in bits per character, and featurization of text
//! through the frozen model for downstream transfer.
//!
//! Evaluation mirrors training's data discipline: the held-out records are
//! dealt into one shard per evaluation batch row, each shard is streamed
//! sequentially through fixed windows, and the recurrent state persists
//! across windows within a shard, zero-initialized where a shard begins.
//! No parameters move.
//!
//! Per-position loss is computed in the log₂ domain with full-precision
//! arithmetic over the FP32 logits: `bits = log₂(Σⱼ exp(xⱼ−m)) + (m−x_t)·log₂e`.
//! Beyond being the unit the report is in, this makes the canonical sanity
//! case exact: a model emitting identical logits for every byte scores
//! log₂ 256 = 8 bits per character to the last bit of an f64.

use crate::data::{make_shards, MinibatchIter, ShardKind};
use crate::error::{Error, Result};
use crate::model::{HiddenState, Mlstm};

/// Default evaluation batch: one shard per row.
pub const EVAL_BATCH: usize = 16;

/// Cross-entropy in nats → bits per character.
pub fn bpc_from_nats(loss_nats: f64) -> f64 {
    debug_assert!(loss_nats >= 0.0, "cross-entropy cannot be negative");
    loss_nats * std::f64::consts::LOG2_E
}

/// Token-weighted BPC over the evaluation shards.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_bpc: f64,
    pub shard_bpc: Vec<f64>,
    pub shard_tokens: Vec<usize>,
    /// Total positions scored.
    pub tokens: usize,
}

/// Stream `records` through the frozen model and report bits per character.
/// The records are dealt into `batch` shards (each scored by one batch row,
/// state persisted across windows, zeroed at the shard start) and the mean
/// is token-weighted, so shards of unequal length average correctly.
pub fn evaluate(
    model: &Mlstm<f32>,
    records: &[String],
    batch: usize,
    seq_len: usize,
    seed: u64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InsufficientData(
            "evaluation needs a non-empty held-out split".into(),
        ));
    }
    let shards = make_shards(records, batch, ShardKind::Eval, seed)?;
    let mut iter = MinibatchIter::new(shards, batch, seq_len)?;
    let h = model.cfg().hidden_dim;
    let vocab = model.cfg().vocab_size;

    let mut state = HiddenState::<f32>::zeros(batch, h);
    let mut bits = vec![0.0f64; batch];
    let mut toks = vec![0usize; batch];

    while let Some(mb) = iter.next_batch() {
        state.apply_resets(&mb.reset);
        let fwd = model.forward_sequence(&mb.inputs, batch, &state)?;
        let logits = fwd.logits.data();
        for t in 0..mb.seq_len {
            for r in 0..batch {
                if !mb.active[r] {
                    continue;
                }
                let p = t * batch + r;
                let row = &logits[p * vocab..(p + 1) * vocab];
                let target = mb.target_row(r)[t] as usize;
                let mut max = f32::NEG_INFINITY;
                for &x in row {
                    max = max.max(x);
                }
                let m = max as f64;
                let mut sum = 0.0f64;
                for &x in row {
                    sum += (x as f64 - m).exp();
                }
                bits[r] += sum.log2() + (m - row[target] as f64) * std::f64::consts::LOG2_E;
                toks[r] += 1;
            }
        }
        state = fwd.state;
    }

    if let Some(r) = toks.iter().position(|&t| t == 0) {
        return Err(Error::InsufficientData(format!(
            "evaluation shard {r} is shorter than one window plus its target; \
             use more held-out data or a shorter seq_len"
        )));
    }
    let total_bits: f64 = bits.iter().sum();
    let tokens: usize = toks.iter().sum();
    Ok(EvalReport {
        mean_bpc: total_bits / tokens as f64,
        shard_bpc: bits.iter().zip(&toks).map(|(b, &t)| b / t as f64).collect(),
        shard_tokens: toks,
        tokens,
    })
}

/// Which recurrent tensor serves as the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureKind {
    /// Final FP32 cell state — the default transfer representation.
    #[default]
    CellState,
    /// Final hidden output, for comparison.
    HiddenState,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cell" => Ok(FeatureKind::CellState),
            "hidden" => Ok(FeatureKind::HiddenState),
            other => Err(Error::Config(format!(
                "unknown feature kind '{other}' (expected 'cell' or 'hidden')"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::CellState => "cell",
            FeatureKind::HiddenState => "hidden",
        }
    }
}

/// Run the frozen model over `text` from zero state and return the final
/// recurrent state as an FP32 feature vector of length `hidden_dim`. The
/// text streams through bounded windows; state carry is exact, so the
/// window size cannot affect the result.
pub fn featurize(
    model: &Mlstm<f32>,
    text: &str,
    window: usize,
    kind: FeatureKind,
) -> Result<Vec<f32>> {
    if text.is_empty() {
        return Err(Error::InsufficientData(
            "cannot featurize an empty text".into(),
        ));
    }
    if window == 0 {
        return Err(Error::Config("featurize window must be positive".into()));
    }
    let h = model.cfg().hidden_dim;
    let mut state = HiddenState::<f32>::zeros(1, h);
    for chunk in text.as_bytes().chunks(window) {
        let fwd = model.forward_sequence(chunk, 1, &state)?;
        state = fwd.state;
    }
    let out = match kind {
        FeatureKind::CellState => state.c.into_data(),
        FeatureKind::HiddenState => state.h.into_data(),
    };
    Ok(out)
}
