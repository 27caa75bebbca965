//! Corpus splitting, sharding, and the contiguity-preserving minibatch
//! iterator.
//!
//! Training operates on shards: each shard is a concatenation of whole
//! records, and every minibatch row reads a contiguous window of exactly one
//! shard. Row `j` of batch `i+1` continues where row `j` of batch `i` left
//! off, which is what makes carrying hidden state across truncated-BPTT
//! windows meaningful. When a row finishes its shard it pulls the next
//! unassigned shard from a queue and raises a reset flag so the model zeroes
//! that row's recurrent state.
//!
//! Tokens are bytes (vocabulary 256). Records keep their text as-is and are
//! joined with a newline inside a shard; a window may split a multi-byte
//! UTF-8 character, which is fine for byte-level modeling.
//!
//! A window consumes `seq_len` input bytes plus one lookahead byte for the
//! final target, so a shard of length L yields ⌊(L−1)/seq_len⌋ windows and
//! any shorter tail is dropped — padding the tail would poison the persisted
//! state with bytes the shard never contained.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default TBTT window length in bytes.
pub const DEFAULT_SEQ_LEN: usize = 256;

// Distinct shuffle streams per pipeline stage, all derived from one user seed.
const TRAIN_SHARD_SALT: u64 = 0xA5A5_0001;
const EVAL_SHARD_SALT: u64 = 0xA5A5_0002;

/// An ordered collection of records plus the seed that fixes every downstream
/// shuffle.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<String>,
    rng_seed: u64,
}

impl Corpus {
    pub fn from_records(records: Vec<String>, rng_seed: u64) -> Self {
        Corpus { records, rng_seed }
    }

    /// Load newline-delimited records from a single file. Blank lines are
    /// separators, not records.
    pub fn load_lines(path: &Path, rng_seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        Ok(Corpus { records, rng_seed })
    }

    /// Load one record per file from a directory, in filename order so the
    /// corpus is identical across filesystems.
    pub fn load_dir(path: &Path, rng_seed: u64) -> Result<Self> {
        let mut names: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?
            .into_iter()
            .map(|ent| ent.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut records = Vec::with_capacity(names.len());
        for p in names {
            records.push(std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?);
        }
        Ok(Corpus { records, rng_seed })
    }

    pub fn records(&self) -> &[String] {
        &self.records
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }
}

/// The three record partitions produced by [`split_corpus`].
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Seed carried forward for shard shuffling.
    pub rng_seed: u64,
}

/// Shuffle the corpus and split it 1000:1:1 into train/validation/test.
///
/// Validation and test each get `max(1, round(R/1002))` records so small
/// corpora still produce non-empty held-out splits; at R = 1002 the split is
/// exactly 1000/1/1. Fewer than 3 records cannot be partitioned at all.
pub fn split_corpus(corpus: &Corpus) -> Result<SplitSet> {
    let r = corpus.records.len();
    if r < 3 {
        return Err(Error::InsufficientData(format!(
            "corpus has {r} records; need at least 3 to form train/val/test splits"
        )));
    }
    let held = ((r as f64 / 1002.0).round() as usize).max(1);
    let mut shuffled = corpus.records.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.rng_seed);
    shuffled.shuffle(&mut rng);
    let test = shuffled.split_off(r - held);
    let val = shuffled.split_off(r - 2 * held);
    Ok(SplitSet {
        train: shuffled,
        val,
        test,
        rng_seed: corpus.rng_seed,
    })
}

/// Whether shards feed training or evaluation; the two use different shard
/// counts and independent shuffle streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardKind {
    Train,
    Eval,
}

/// One contiguous byte stream assembled from whole records, consumed
/// front-to-back by a single minibatch row at a time.
#[derive(Debug, Clone)]
pub struct Shard {
    text: String,
    cursor: usize,
}

impl Shard {
    pub fn new(text: impl Into<String>) -> Self {
        Shard {
            text: text.into(),
            cursor: 0,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    fn remaining(&self) -> usize {
        self.text.len() - self.cursor
    }
}

/// Deal a split's records into shards: `batch_size` shards for evaluation,
/// `max(1000, batch_size)` for training. Records are shuffled once (seeded)
/// and distributed round-robin; the resulting shards serve every epoch with
/// no further shuffling.
pub fn make_shards(
    records: &[String],
    batch_size: usize,
    kind: ShardKind,
    rng_seed: u64,
) -> Result<Vec<Shard>> {
    let count = match kind {
        ShardKind::Train => batch_size.max(1000),
        ShardKind::Eval => batch_size,
    };
    if count == 0 {
        return Err(Error::Config("shard count must be positive".into()));
    }
    if records.len() < count {
        return Err(Error::InsufficientData(format!(
            "{} records cannot fill {count} shards; lower the batch size or provide more data",
            records.len()
        )));
    }
    let salt = match kind {
        ShardKind::Train => TRAIN_SHARD_SALT,
        ShardKind::Eval => EVAL_SHARD_SALT,
    };
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ salt);
    order.shuffle(&mut rng);

    let mut texts = vec![String::new(); count];
    for (i, &rec) in order.iter().enumerate() {
        let t = &mut texts[i % count];
        if !t.is_empty() {
            t.push('\n');
        }
        t.push_str(&records[rec]);
    }
    Ok(texts.into_iter().map(Shard::new).collect())
}

/// One step of input for every batch row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub rows: usize,
    pub seq_len: usize,
    /// Row-major `rows × seq_len` byte ids.
    pub inputs: Vec<u8>,
    /// `targets[r][t]` is the byte following `inputs[r][t]` in the shard.
    pub targets: Vec<u8>,
    /// Row starts a new shard: zero its recurrent state before this window.
    pub reset: Vec<bool>,
    /// Row has data this step. Inactive rows appear near the end of an epoch
    /// once the shard queue runs dry; their inputs are zero-filled and must
    /// not contribute to the loss.
    pub active: Vec<bool>,
}

impl Minibatch {
    fn empty(rows: usize, seq_len: usize) -> Self {
        Minibatch {
            rows,
            seq_len,
            inputs: vec![0; rows * seq_len],
            targets: vec![0; rows * seq_len],
            reset: vec![false; rows],
            active: vec![false; rows],
        }
    }

    pub fn active_rows(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Input bytes of one row.
    pub fn input_row(&self, r: usize) -> &[u8] {
        &self.inputs[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn target_row(&self, r: usize) -> &[u8] {
        &self.targets[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// Copy of rows `lo..hi`, for dealing worker-local slices of a global
    /// batch.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Minibatch {
        assert!(lo <= hi && hi <= self.rows);
        Minibatch {
            rows: hi - lo,
            seq_len: self.seq_len,
            inputs: self.inputs[lo * self.seq_len..hi * self.seq_len].to_vec(),
            targets: self.targets[lo * self.seq_len..hi * self.seq_len].to_vec(),
            reset: self.reset[lo..hi].to_vec(),
            active: self.active[lo..hi].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RowState {
    shard: Option<usize>,
    fresh: bool,
}

/// Resumable iterator position: the queue head plus each row's shard
/// assignment and read offset. Shard texts are not part of the state — they
/// are rebuilt deterministically from the corpus and seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterState {
    pub queue_next: usize,
    pub rows: Vec<RowSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowSnapshot {
    pub shard: Option<usize>,
    pub cursor: usize,
    pub fresh: bool,
}

/// Draws fixed-length windows from a set of shards, one shard per batch row
/// at a time, preserving within-row contiguity across calls.
#[derive(Debug, Clone)]
pub struct MinibatchIter {
    shards: Vec<Shard>,
    queue_next: usize,
    rows: Vec<RowState>,
    batch_rows: usize,
    seq_len: usize,
}

impl MinibatchIter {
    pub fn new(shards: Vec<Shard>, batch_rows: usize, seq_len: usize) -> Result<Self> {
        if batch_rows == 0 || seq_len == 0 {
            return Err(Error::Config(
                "batch rows and sequence length must be positive".into(),
            ));
        }
        if shards.len() < batch_rows {
            return Err(Error::InsufficientData(format!(
                "{} shards cannot feed {batch_rows} batch rows; lower the batch size",
                shards.len()
            )));
        }
        Ok(MinibatchIter {
            shards,
            queue_next: 0,
            rows: vec![
                RowState {
                    shard: None,
                    fresh: false
                };
                batch_rows
            ],
            batch_rows,
            seq_len,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn batch_rows(&self) -> usize {
        self.batch_rows
    }

    /// Total windows one epoch yields, summed over shards.
    pub fn windows_per_epoch(&self) -> u64 {
        self.shards
            .iter()
            .map(|s| {
                if s.text.len() > self.seq_len {
                    ((s.text.len() - 1) / self.seq_len) as u64
                } else {
                    0
                }
            })
            .sum()
    }

    /// Rewind to the start of an epoch: same shards, same order, fresh
    /// cursors.
    pub fn reset(&mut self) {
        for s in &mut self.shards {
            s.cursor = 0;
        }
        self.queue_next = 0;
        for r in &mut self.rows {
            *r = RowState {
                shard: None,
                fresh: false,
            };
        }
    }

    fn pull(&mut self) -> Option<usize> {
        if self.queue_next < self.shards.len() {
            let i = self.queue_next;
            self.queue_next += 1;
            Some(i)
        } else {
            None
        }
    }

    /// Produce the next minibatch, or `None` when every shard is consumed
    /// (end of epoch).
    pub fn next_batch(&mut self) -> Option<Minibatch> {
        let w = self.seq_len;
        let mut mb = Minibatch::empty(self.batch_rows, w);
        let mut any = false;
        for r in 0..self.batch_rows {
            // Advance this row past exhausted shards. A pulled shard shorter
            // than one full window is dropped the same way a tail is.
            loop {
                match self.rows[r].shard {
                    Some(s) if self.shards[s].remaining() >= w + 1 => break,
                    _ => match self.pull() {
                        Some(next) => {
                            self.rows[r].shard = Some(next);
                            self.rows[r].fresh = true;
                        }
                        None => {
                            self.rows[r].shard = None;
                            break;
                        }
                    },
                }
            }
            if let Some(s) = self.rows[r].shard {
                let sh = &mut self.shards[s];
                let bytes = &sh.text.as_bytes()[sh.cursor..sh.cursor + w + 1];
                mb.inputs[r * w..(r + 1) * w].copy_from_slice(&bytes[..w]);
                mb.targets[r * w..(r + 1) * w].copy_from_slice(&bytes[1..]);
                mb.reset[r] = self.rows[r].fresh;
                mb.active[r] = true;
                self.rows[r].fresh = false;
                sh.cursor += w;
                any = true;
            }
        }
        if any {
            Some(mb)
        } else {
            None
        }
    }

    /// Snapshot the iterator position for checkpointing.
    pub fn state(&self) -> IterState {
        IterState {
            queue_next: self.queue_next,
            rows: self
                .rows
                .iter()
                .map(|r| RowSnapshot {
                    shard: r.shard,
                    cursor: r.shard.map_or(0, |s| self.shards[s].cursor),
                    fresh: r.fresh,
                })
                .collect(),
        }
    }

    /// Restore a snapshot taken from an iterator built over the same shards.
    pub fn restore(&mut self, state: &IterState) -> Result<()> {
        if state.rows.len() != self.batch_rows || state.queue_next > self.shards.len() {
            return Err(Error::Checkpoint(format!(
                "iterator state has {} rows / queue head {}, expected {} rows over {} shards",
                state.rows.len(),
                state.queue_next,
                self.batch_rows,
                self.shards.len()
            )));
        }
        self.reset();
        self.queue_next = state.queue_next;
        for (r, snap) in state.rows.iter().enumerate() {
            if let Some(s) = snap.shard {
                let sh = self
                    .shards
                    .get_mut(s)
                    .ok_or_else(|| Error::Checkpoint(format!("row {r} references shard {s}")))?;
                if snap.cursor > sh.text.len() {
                    return Err(Error::Checkpoint(format!(
                        "row {r} cursor {} exceeds shard {s} length {}",
                        snap.cursor,
                        sh.text.len()
                    )));
                }
                sh.cursor = snap.cursor;
            }
            self.rows[r] = RowState {
                shard: snap.shard,
                fresh: snap.fresh,
            };
        }
        Ok(())
    }
}

impl Iterator for MinibatchIter {
    type Item = Minibatch;

    fn next(&mut self) -> Option<Minibatch> {
        self.next_batch()
    }
}
