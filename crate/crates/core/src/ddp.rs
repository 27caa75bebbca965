//! Simulated synchronous data parallelism: N in-process worker replicas, a
//! ring all-reduce of gradients, and identical independent updates.
//!
//! Workers are execution contexts inside one process, not network peers —
//! what matters here is the synchronization semantics: a large batch dealt
//! evenly across workers, gradients exchanged through a logical ring whose
//! wire format is binary16 (full precision in fp32 mode) while accumulation
//! stays FP32, every worker applying the same update so replicas remain
//! bit-identical at every barrier. There is no parameter server. Real
//! interconnect performance is reported separately from user-supplied timing
//! tables via [`speedup_report`].
//!
//! # The ring
//!
//! The buffer is split into N chunks. Gradients enter the ring in the wire
//! format — in mixed mode each worker's buffer is rounded to binary16 up
//! front, which is also where a saturating loss scale shows up as ±∞. In
//! the scatter-reduce phase, each of the N−1 steps sends one chunk to the
//! next rank; the receiver adds its own contribution in full precision, so
//! chunk `c` accumulates contributions in ring order starting at rank `c`,
//! FP32 from first add to last — the same multiply-in-half, accumulate-in-
//! full rule every other reduction in the engine follows. The worker that
//! completes a chunk divides it by N and rounds the mean to the wire format
//! once; the all-gather phase then circulates those bytes unchanged for
//! another N−1 steps. Every worker — the chunk's owner included — ends up
//! holding exactly the transmitted bytes, which is what makes the replica-
//! identity invariant bitwise rather than approximate. Each worker
//! transmits 2·(N−1)/N of the buffer per all-reduce at wire width, the
//! usual bandwidth-optimal figure, and the simulation meters it.

use rayon::prelude::*;

use crate::data::Minibatch;
use crate::error::{Error, Result};
use crate::hashing::Fnv1a64;
use crate::model::{HiddenState, Mlstm, ParamSet};
use crate::numerics::{Precision, Scalar};
use crate::optimizer::AdamState;
use crate::scaler::{unscale_master_grads, LossScaleState, ScaleDecision};

/// Bytes each scalar occupies on the simulated wire.
fn wire_bytes(precision: Precision) -> usize {
    match precision {
        Precision::Mixed => 2,
        Precision::Fp32 => 4,
    }
}

/// Round a value to what the wire carries.
fn to_wire(v: f32, precision: Precision) -> f32 {
    match precision {
        Precision::Mixed => v.quantize_f16(),
        Precision::Fp32 => v,
    }
}

/// Chunk boundaries: N contiguous ranges, sizes differing by at most one.
fn chunk_ranges(len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / n;
    let rem = len % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < rem);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// What one all-reduce moved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllReduceStats {
    pub n_workers: usize,
    pub elements: usize,
    /// Bytes transmitted by each worker across both phases.
    pub bytes_sent_per_worker: Vec<usize>,
}

/// The bandwidth-optimal payload a ring all-reduce moves per worker:
/// 2·(N−1)/N of the buffer. Exact when N divides the element count.
pub fn ring_payload_bytes(elements: usize, n_workers: usize, precision: Precision) -> f64 {
    let n = n_workers as f64;
    2.0 * (n - 1.0) / n * elements as f64 * wire_bytes(precision) as f64
}

/// Average the per-worker buffers through a simulated ring all-reduce,
/// leaving every buffer holding the identical mean. In mixed mode the
/// contributions are rounded to binary16 on entry and the per-chunk mean is
/// rounded to binary16 once on exit; the running partial stays FP32 around
/// the ring, and the gather phase copies the finished bytes verbatim, so
/// every worker adopts the identical wire-format mean.
pub fn ring_allreduce(
    buffers: &mut [Vec<f32>],
    precision: Precision,
) -> Result<AllReduceStats> {
    let n = buffers.len();
    if n == 0 {
        return Err(Error::Contract {
            op: "ring_allreduce",
            detail: "no worker buffers".into(),
        });
    }
    let len = buffers[0].len();
    if buffers.iter().any(|b| b.len() != len) {
        return Err(Error::ShapeMismatch {
            op: "ring_allreduce",
            detail: format!(
                "buffer lengths {:?} differ",
                buffers.iter().map(|b| b.len()).collect::<Vec<_>>()
            ),
        });
    }
    let mut bytes_sent = vec![0usize; n];
    if n == 1 {
        // A single worker already holds the mean.
        return Ok(AllReduceStats {
            n_workers: 1,
            elements: len,
            bytes_sent_per_worker: bytes_sent,
        });
    }
    let chunks = chunk_ranges(len, n);
    let bpe = wire_bytes(precision);

    // Contributions enter the ring in the wire format.
    if precision == Precision::Mixed {
        for b in buffers.iter_mut() {
            crate::numerics::quantize_slice(b);
        }
    }

    // Scatter-reduce: after step s, rank w holds the partial sum of chunk
    // (w−s−1 mod N) over s+2 ranks. All sends of a step are captured before
    // any receive lands, as they would be on real synchronous hardware.
    for s in 0..n - 1 {
        let payloads: Vec<Vec<f32>> = (0..n)
            .map(|w| {
                let c = (w + n - s) % n;
                buffers[w][chunks[c].clone()].to_vec()
            })
            .collect();
        for w in 0..n {
            let c = (w + n - s) % n;
            bytes_sent[w] += chunks[c].len() * bpe;
        }
        for w in 0..n {
            let from = (w + n - 1) % n;
            let c = (from + n - s) % n;
            for (dst, &p) in buffers[w][chunks[c].clone()].iter_mut().zip(&payloads[from]) {
                *dst = p + *dst;
            }
        }
    }

    // Each completed chunk becomes the mean, rounded to the wire once.
    let inv_n = 1.0f32 / n as f32;
    for w in 0..n {
        let c = (w + 1) % n;
        for v in buffers[w][chunks[c].clone()].iter_mut() {
            *v = to_wire(*v * inv_n, precision);
        }
    }

    // All-gather: circulate the finished chunks; receivers copy bytes.
    for s in 0..n - 1 {
        let payloads: Vec<Vec<f32>> = (0..n)
            .map(|w| {
                let c = (w + 1 + n - s) % n;
                buffers[w][chunks[c].clone()].to_vec()
            })
            .collect();
        for w in 0..n {
            let c = (w + 1 + n - s) % n;
            bytes_sent[w] += chunks[c].len() * bpe;
        }
        for w in 0..n {
            let from = (w + n - 1) % n;
            let c = (from + 1 + n - s) % n;
            buffers[w][chunks[c].clone()].copy_from_slice(&payloads[from]);
        }
    }

    Ok(AllReduceStats {
        n_workers: n,
        elements: len,
        bytes_sent_per_worker: bytes_sent,
    })
}

fn hash_params(p: &ParamSet<f32>) -> u64 {
    let mut h = Fnv1a64::new();
    let mut buf: Vec<u8> = Vec::new();
    for (_, d) in p.tensors() {
        buf.clear();
        buf.reserve(d.len() * 4);
        for &v in d {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        h.update(&buf);
    }
    h.finish()
}

fn hash_flat(flat: &[f32]) -> u64 {
    let mut h = Fnv1a64::new();
    let mut buf: Vec<u8> = Vec::with_capacity(flat.len() * 4);
    for &v in flat {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    h.update(&buf);
    h.finish()
}

struct Worker {
    model: Mlstm<f32>,
    state: HiddenState<f32>,
}

struct WorkerPass {
    loss_nats: f64,
    grads_flat: Vec<f32>,
    overflow: bool,
}

/// What one synchronized training step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Mean cross-entropy over the active positions, in nats.
    pub loss_nats: f64,
    /// False when the scaler skipped the update (gradient overflow).
    pub applied: bool,
    pub overflow: bool,
    /// Loss scale the step ran with.
    pub alpha_used: f32,
    /// Loss scale after the scaler reacted to the step.
    pub alpha_after: f32,
    pub active_rows: usize,
    pub comm: AllReduceStats,
}

/// N synchronized replicas of one model plus the coordinator-owned optimizer
/// and loss-scale state. `n_workers = 1` degrades to serial training, bit
/// for bit — the single code path both modes share.
pub struct WorkerGroup {
    precision: Precision,
    rows_per_worker: usize,
    workers: Vec<Worker>,
    masters_flat: Vec<f32>,
    adam: AdamState,
    scaler: LossScaleState,
}

impl WorkerGroup {
    /// Deal `global_rows` batch rows evenly across `n_workers` replicas of
    /// `model`. Every replica starts from the same bytes.
    pub fn new(
        model: Mlstm<f32>,
        n_workers: usize,
        global_rows: usize,
        scaler: LossScaleState,
    ) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        if global_rows == 0 || global_rows % n_workers != 0 {
            return Err(Error::Config(format!(
                "global batch of {global_rows} rows does not split evenly across {n_workers} workers"
            )));
        }
        let rows_per_worker = global_rows / n_workers;
        let h = model.cfg().hidden_dim;
        let masters_flat = model.masters().to_flat();
        let adam = AdamState::new(masters_flat.len());
        let workers = (0..n_workers)
            .map(|_| Worker {
                model: model.clone(),
                state: HiddenState::zeros(rows_per_worker, h),
            })
            .collect();
        Ok(WorkerGroup {
            precision: model.precision(),
            rows_per_worker,
            workers,
            masters_flat,
            adam,
            scaler,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn global_rows(&self) -> usize {
        self.rows_per_worker * self.workers.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// One replica — they are all bit-identical — for evaluation and
    /// serialization.
    pub fn model(&self) -> &Mlstm<f32> {
        &self.workers[0].model
    }

    pub fn masters_flat(&self) -> &[f32] {
        &self.masters_flat
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn scaler(&self) -> &LossScaleState {
        &self.scaler
    }

    pub fn scaler_mut(&mut self) -> &mut LossScaleState {
        &mut self.scaler
    }

    /// Digest of the coordinator's master bytes; replicas must match it.
    pub fn replica_hash(&self) -> u64 {
        hash_flat(&self.masters_flat)
    }

    /// The barrier precondition: every replica's parameters hash to the
    /// coordinator's bytes.
    pub fn verify_replicas(&self) -> Result<()> {
        let want = self.replica_hash();
        for (i, w) in self.workers.iter().enumerate() {
            let got = hash_params(w.model.masters());
            if got != want {
                return Err(Error::Contract {
                    op: "verify_replicas",
                    detail: format!(
                        "replica {i} hash {got:#018x} != coordinator {want:#018x}; \
                         replicas must stay bit-identical between barriers"
                    ),
                });
            }
        }
        Ok(())
    }

    /// Concatenated recurrent state of all rows, worker-major — the layout
    /// checkpoints store.
    pub fn hidden_state_snapshot(&self) -> (Vec<f32>, Vec<f32>) {
        let mut h = Vec::with_capacity(self.global_rows() * self.hidden_dim());
        let mut c = Vec::with_capacity(h.capacity());
        for w in &self.workers {
            h.extend_from_slice(w.state.h.data());
            c.extend_from_slice(w.state.c.data());
        }
        (h, c)
    }

    pub fn restore_hidden_state(&mut self, h: &[f32], c: &[f32]) -> Result<()> {
        let hd = self.hidden_dim();
        let want = self.global_rows() * hd;
        if h.len() != want || c.len() != want {
            return Err(Error::ShapeMismatch {
                op: "restore_hidden_state",
                detail: format!("{}/{} values for {want}", h.len(), c.len()),
            });
        }
        let per = self.rows_per_worker * hd;
        for (i, w) in self.workers.iter_mut().enumerate() {
            w.state.h.data_mut().copy_from_slice(&h[i * per..(i + 1) * per]);
            w.state.c.data_mut().copy_from_slice(&c[i * per..(i + 1) * per]);
        }
        Ok(())
    }

    /// Replace the master parameters on the coordinator and every replica.
    pub fn set_masters_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.masters_flat.len() {
            return Err(Error::ShapeMismatch {
                op: "set_masters_flat",
                detail: format!("{} values for {}", flat.len(), self.masters_flat.len()),
            });
        }
        self.masters_flat.copy_from_slice(flat);
        for w in &mut self.workers {
            w.model.masters_mut().set_from_flat(flat)?;
            w.model.rebuild_working()?;
        }
        Ok(())
    }

    /// Replace the optimizer state (checkpoint restore).
    pub fn set_adam(&mut self, adam: AdamState) -> Result<()> {
        if adam.moments().0.len() != self.masters_flat.len() {
            return Err(Error::ShapeMismatch {
                op: "set_adam",
                detail: format!(
                    "optimizer holds {} moments for {} parameters",
                    adam.moments().0.len(),
                    self.masters_flat.len()
                ),
            });
        }
        self.adam = adam;
        Ok(())
    }

    fn hidden_dim(&self) -> usize {
        self.workers[0].model.cfg().hidden_dim
    }

    /// One synchronized iteration over a global minibatch: deal row slices,
    /// run forward/backward on every worker with the shared loss scale,
    /// all-reduce the scaled gradients, OR the overflow flags into the
    /// scaler's verdict, and on ApplyUpdate have every replica adopt the
    /// identical Adam step. The all-reduce is the only barrier.
    pub fn train_step(&mut self, batch: &Minibatch, lr: f64) -> Result<StepOutcome> {
        let n = self.workers.len();
        let rows = self.rows_per_worker;
        if batch.rows != self.global_rows() {
            return Err(Error::ShapeMismatch {
                op: "train_step",
                detail: format!(
                    "minibatch has {} rows, group expects {}",
                    batch.rows,
                    self.global_rows()
                ),
            });
        }
        self.verify_replicas()?;

        let active_rows = batch.active_rows();
        if active_rows == 0 {
            return Err(Error::Contract {
                op: "train_step",
                detail: "minibatch has no active rows".into(),
            });
        }
        // Each worker divides by its share of the global active positions so
        // the all-reduce mean of worker gradients equals the serial mean.
        let denom = (active_rows * batch.seq_len) as f64 / n as f64;
        let alpha_used = self.scaler.alpha();
        let w_len = batch.seq_len;

        let passes: Vec<WorkerPass> = self
            .workers
            .par_iter_mut()
            .enumerate()
            .map(|(i, worker)| -> Result<WorkerPass> {
                let lo = i * rows;
                let hi = lo + rows;
                worker.state.apply_resets(&batch.reset[lo..hi]);
                let fwd = worker.model.forward_sequence(
                    &batch.inputs[lo * w_len..hi * w_len],
                    rows,
                    &worker.state,
                )?;
                let out = worker.model.loss_and_backward(
                    &fwd,
                    &batch.targets[lo * w_len..hi * w_len],
                    &batch.active[lo..hi],
                    denom,
                    alpha_used,
                )?;
                worker.state = fwd.state;
                Ok(WorkerPass {
                    loss_nats: out.loss_nats,
                    grads_flat: out.grads.to_flat(),
                    overflow: out.overflow,
                })
            })
            .collect::<Result<_>>()?;

        let mut local_overflow = false;
        let mut loss_sum = 0.0f64;
        let mut buffers: Vec<Vec<f32>> = Vec::with_capacity(n);
        for pass in passes {
            local_overflow |= pass.overflow;
            loss_sum += pass.loss_nats;
            buffers.push(pass.grads_flat);
        }
        let loss_nats = loss_sum / n as f64;

        let comm = ring_allreduce(&mut buffers, self.precision)?;
        // Partial sums can saturate the binary16 wire even when every local
        // gradient was finite; that is an overflow like any other.
        let reduced_finite = buffers[0].iter().all(|v| v.is_finite());
        let overflow = local_overflow || !reduced_finite;

        let decision = self.scaler.step(overflow);
        let applied = decision == ScaleDecision::ApplyUpdate;
        if applied {
            let mut grads = buffers.swap_remove(0);
            unscale_master_grads(&mut grads, alpha_used)?;
            self.adam.apply(&mut self.masters_flat, &grads, lr as f32)?;
            for w in &mut self.workers {
                w.model.masters_mut().set_from_flat(&self.masters_flat)?;
                w.model.rebuild_working()?;
            }
        }

        Ok(StepOutcome {
            loss_nats,
            applied,
            overflow,
            alpha_used,
            alpha_after: self.scaler.alpha(),
            active_rows,
            comm,
        })
    }
}

/// One row of a measured scaling table.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTiming {
    pub label: String,
    pub n_gpus: u32,
    pub seconds_per_iter: f64,
}

impl IterationTiming {
    pub fn validate(&self) -> Result<()> {
        if self.n_gpus == 0 || !(self.seconds_per_iter > 0.0) {
            return Err(Error::Config(format!(
                "timing row '{}': n_gpus and seconds_per_iter must be positive",
                self.label
            )));
        }
        Ok(())
    }
}

/// One computed row: relative speedup n·t₁/t_n and parallel efficiency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub label: String,
    pub n_gpus: u32,
    pub seconds_per_iter: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

/// Compute relative speedups against each label's single-device row:
/// speedup = n·t₁/t_n, efficiency = speedup/n. Labels group independently
/// (different model sizes or interconnects have their own baselines); rows
/// come back sorted by device count within each label, labels in first-seen
/// order. A label without an n=1 baseline is an error.
pub fn speedup_report(timings: &[IterationTiming]) -> Result<Vec<SpeedupRow>> {
    for t in timings {
        t.validate()?;
    }
    let mut labels: Vec<&str> = Vec::new();
    for t in timings {
        if !labels.contains(&t.label.as_str()) {
            labels.push(&t.label);
        }
    }
    let mut out = Vec::with_capacity(timings.len());
    for label in labels {
        let mut group: Vec<&IterationTiming> =
            timings.iter().filter(|t| t.label == label).collect();
        group.sort_by_key(|t| t.n_gpus);
        let t1 = match group.iter().find(|t| t.n_gpus == 1) {
            Some(t) => t.seconds_per_iter,
            None => {
                return Err(Error::Contract {
                    op: "speedup_report",
                    detail: format!("label '{label}' has no single-device baseline row"),
                })
            }
        };
        for t in group {
            let speedup = t.n_gpus as f64 * t1 / t.seconds_per_iter;
            out.push(SpeedupRow {
                label: t.label.clone(),
                n_gpus: t.n_gpus,
                seconds_per_iter: t.seconds_per_iter,
                speedup,
                efficiency: speedup / t.n_gpus as f64,
            });
        }
    }
    Ok(out)
}

/// Parse a timing table: header `n_gpus,seconds_per_iter,label`, one row per
/// line, blank lines ignored.
pub fn parse_timings_csv(text: &str) -> Result<Vec<IterationTiming>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "n_gpus,seconds_per_iter,label" => {}
        other => {
            return Err(Error::Config(format!(
                "timing CSV must start with 'n_gpus,seconds_per_iter,label', got {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "timing CSV row {}: expected 3 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let n_gpus: u32 = fields[0].parse().map_err(|_| {
            Error::Config(format!("timing CSV row {}: bad n_gpus '{}'", i + 2, fields[0]))
        })?;
        let seconds_per_iter: f64 = fields[1].parse().map_err(|_| {
            Error::Config(format!(
                "timing CSV row {}: bad seconds_per_iter '{}'",
                i + 2,
                fields[1]
            ))
        })?;
        let row = IterationTiming {
            label: fields[2].to_string(),
            n_gpus,
            seconds_per_iter,
        };
        row.validate()?;
        out.push(row);
    }
    Ok(out)
}

/// Emit the computed report as CSV.
pub fn speedup_report_csv(rows: &[SpeedupRow]) -> String {
    let mut out = String::from("label,n_gpus,seconds_per_iter,speedup,efficiency\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.1},{:.3}\n",
            r.label, r.n_gpus, r.seconds_per_iter, r.speedup, r.efficiency
        ));
    }
    out
}
