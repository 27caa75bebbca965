//! The training loop: shard dealing → distributed step → metrics row →
//! periodic checkpoints, with a divergence detector standing guard.
//!
//! The loop is deliberately boring. All numerical policy lives in the
//! modules it drives (scaling in `scaler`, the update in `optimizer`, the
//! reduction in `ddp`); what this file owns is sequencing, stop conditions,
//! and the guarantee that a run can be stopped, checkpointed, and continued
//! bit-for-bit as though it never stopped.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::TrainCheckpoint;
use crate::config::RunConfig;
use crate::data::{make_shards, split_corpus, Corpus, MinibatchIter, ShardKind, SplitSet};
use crate::ddp::WorkerGroup;
use crate::error::{Error, Result};
use crate::eval::{bpc_from_nats, evaluate, EvalReport};
use crate::model::{Mlstm, MlstmConfig};
use crate::optimizer::{
    check_large_batch_regime, lr_at, AdamState, LrPolicy, DEFAULT_MIN_ITERS_PER_EPOCH,
};
use crate::scaler::LossScaleState;

/// Consecutive bad iterations before the run is declared divergent. A bad
/// iteration is one whose loss is non-finite, or whose update was skipped
/// with the loss scale already at its floor — at that point the scaler has
/// no remaining downshift and the gradients themselves are unrepresentable.
pub const DIVERGENCE_PATIENCE: u32 = 50;

/// Fixed metrics CSV header. One row per iteration follows.
pub const METRICS_HEADER: &str = "iter,epoch,lr,alpha,skipped,loss_nats,bpc,wall_s";

/// What a completed (non-divergent) run reports back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Total iterations completed, including any before a resume.
    pub iters: u64,
    /// Epoch boundaries crossed.
    pub epochs: u32,
    /// Training loss of the last iteration, in nats.
    pub final_loss_nats: f64,
    /// Held-out evaluation after the final update.
    pub val: EvalReport,
}

/// Load the corpus named by the config and deal it into train/val/test.
pub fn load_split(cfg: &RunConfig) -> Result<SplitSet> {
    if cfg.data.is_empty() {
        return Err(Error::Config("no data path configured".into()));
    }
    let path = Path::new(&cfg.data);
    let corpus = if path.is_dir() {
        Corpus::load_dir(path, cfg.seed)?
    } else {
        Corpus::load_lines(path, cfg.seed)?
    };
    split_corpus(&corpus)
}

/// Evaluation rows are capped by how many held-out records exist; a tiny
/// corpus cannot fill the default 16 eval shards.
pub fn clamped_eval_batch(cfg: &RunConfig, records: usize) -> usize {
    cfg.eval_batch.min(records.max(1))
}

pub struct Trainer {
    cfg: RunConfig,
    group: WorkerGroup,
    batches: MinibatchIter,
    val: Vec<String>,
    initial_lr: f64,
    iters_done: u64,
    epochs_done: u32,
    bad_streak: u32,
}

impl Trainer {
    /// Fresh run from a validated config.
    pub fn new(cfg: RunConfig) -> Result<Trainer> {
        let split = load_split(&cfg)?;
        Trainer::from_split(cfg, split)
    }

    /// Fresh run over an already-split corpus (tests and embedders hand
    /// records in directly; the CLI goes through [`Trainer::new`]).
    pub fn from_split(cfg: RunConfig, split: SplitSet) -> Result<Trainer> {
        Trainer::build(cfg, split, None)
    }

    /// Continue a checkpointed run. The checkpoint's config governs the run;
    /// only output plumbing (checkpoint/metrics paths, cadence) follows
    /// `plumbing`, so a continuation can write next to the original files
    /// instead of over them.
    pub fn resume(ckpt: &TrainCheckpoint, plumbing: &RunConfig) -> Result<Trainer> {
        let cfg = resume_config(&ckpt.config, plumbing);
        let split = load_split(&cfg)?;
        Trainer::resume_from_split(ckpt, plumbing, split)
    }

    /// [`Trainer::resume`] over an already-split corpus. The split must come
    /// from the same corpus and seed as the original run; iterator cursors
    /// are positions into those exact shards.
    pub fn resume_from_split(
        ckpt: &TrainCheckpoint,
        plumbing: &RunConfig,
        split: SplitSet,
    ) -> Result<Trainer> {
        let cfg = resume_config(&ckpt.config, plumbing);
        Trainer::build(cfg, split, Some(ckpt))
    }

    fn build(cfg: RunConfig, split: SplitSet, restore: Option<&TrainCheckpoint>) -> Result<Trainer> {
        cfg.validate()?;
        if cfg.decay_iters == 0 && cfg.max_epochs == 0 {
            return Err(Error::Config(
                "no stop condition: set decay_iters or max_epochs".into(),
            ));
        }
        let shards = make_shards(&split.train, cfg.batch_size, ShardKind::Train, split.rng_seed)?;
        let mut batches = MinibatchIter::new(shards, cfg.batch_size, cfg.seq_len)?;

        let mcfg = MlstmConfig::new(cfg.embed_dim, cfg.hidden_dim, cfg.seq_len);
        let model = Mlstm::<f32>::init(mcfg, cfg.precision, cfg.seed)?;
        let scaler = LossScaleState::for_precision(cfg.precision, cfg.growth_interval);
        let mut group = WorkerGroup::new(model, cfg.n_workers, cfg.batch_size, scaler)?;

        let (iters_done, epochs_done) = match restore {
            Some(ck) => {
                group.set_masters_flat(&ck.masters)?;
                group.set_adam(AdamState::from_parts(
                    ck.adam_m.clone(),
                    ck.adam_v.clone(),
                    ck.adam_t,
                    0.9,
                    0.999,
                    1e-8,
                )?)?;
                group.scaler_mut().restore(ck.alpha, ck.clean_steps);
                group.restore_hidden_state(&ck.state_h, &ck.state_c)?;
                batches.restore(&ck.iter_state)?;
                (ck.iter, ck.epoch)
            }
            None => (0, 0),
        };

        let policy = LrPolicy {
            base_lr: cfg.base_lr,
            rule: cfg.lr_rule,
            batch_size: cfg.batch_size,
            decay_iters: cfg.decay_iters,
            max_epochs: cfg.max_epochs,
        };
        let initial_lr = policy.initial_lr();
        check_large_batch_regime(
            cfg.batch_size,
            batches.windows_per_epoch(),
            DEFAULT_MIN_ITERS_PER_EPOCH,
        );
        log::info!(
            "model: {} parameters, precision {}, initial lr {initial_lr:.3e}, \
             {} training windows per epoch",
            group.model().param_count(),
            cfg.precision.name(),
            batches.windows_per_epoch(),
        );

        Ok(Trainer {
            cfg,
            group,
            batches,
            val: split.val,
            initial_lr,
            iters_done,
            epochs_done,
            bad_streak: 0,
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn iters_done(&self) -> u64 {
        self.iters_done
    }

    pub fn model(&self) -> &Mlstm<f32> {
        self.group.model()
    }

    /// Snapshot everything a continuation needs.
    pub fn snapshot(&self) -> TrainCheckpoint {
        let (state_h, state_c) = self.group.hidden_state_snapshot();
        let (m, v) = self.group.adam().moments();
        TrainCheckpoint {
            config: self.cfg.clone(),
            iter: self.iters_done,
            epoch: self.epochs_done,
            alpha: self.group.scaler().alpha(),
            clean_steps: self.group.scaler().clean_steps(),
            adam_t: self.group.adam().t(),
            masters: self.group.masters_flat().to_vec(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            state_h,
            state_c,
            iter_state: self.batches.state(),
        }
    }

    fn sink_err(&self, e: std::io::Error) -> Error {
        Error::io(self.cfg.metrics.clone(), e)
    }

    /// Run to the configured stop condition, writing one metrics row per
    /// iteration, then save the final checkpoint and evaluate held-out BPC.
    ///
    /// Everything written to `metrics` except the wall-seconds column is a
    /// pure function of the config, so reruns and checkpoint continuations
    /// reproduce it byte for byte.
    pub fn run(&mut self, metrics: &mut dyn Write) -> Result<TrainOutcome> {
        if self.iters_done == 0 {
            writeln!(metrics, "{METRICS_HEADER}").map_err(|e| self.sink_err(e))?;
        }
        let clock = Instant::now();
        let mut last_loss = f64::NAN;

        loop {
            if self.cfg.decay_iters > 0 && self.iters_done >= self.cfg.decay_iters {
                break;
            }
            let batch = match self.batches.next_batch() {
                Some(b) => b,
                None => {
                    self.epochs_done += 1;
                    if self.cfg.max_epochs > 0 && self.epochs_done >= self.cfg.max_epochs {
                        break;
                    }
                    self.batches.reset();
                    self.batches.next_batch().ok_or_else(|| {
                        Error::InsufficientData("training shards yield no windows".into())
                    })?
                }
            };

            let lr = if self.cfg.decay_iters > 0 {
                lr_at(self.initial_lr, self.cfg.decay_iters, self.iters_done)
            } else {
                self.initial_lr
            };

            let (loss, alpha, skipped) = match self.group.train_step(&batch, lr) {
                Ok(out) => (out.loss_nats, out.alpha_used, !out.applied),
                // A blown-up recurrent state or a parameter row collapsing to
                // zero norm is divergence in progress, not a caller mistake:
                // count it against the patience budget and keep going so the
                // detector, not a panic, ends the run.
                Err(Error::NonFiniteState(_)) | Err(Error::SingularParameter(_)) => {
                    (f64::NAN, self.group.scaler().alpha(), true)
                }
                Err(other) => return Err(other),
            };

            let bad = !loss.is_finite() || (skipped && self.group.scaler().at_floor());
            self.bad_streak = if bad { self.bad_streak + 1 } else { 0 };
            self.iters_done += 1;
            last_loss = loss;

            let bpc = if loss.is_finite() {
                bpc_from_nats(loss)
            } else {
                f64::NAN
            };
            writeln!(
                metrics,
                "{},{},{},{},{},{},{},{:.3}",
                self.iters_done,
                self.epochs_done,
                lr,
                alpha,
                u8::from(skipped),
                loss,
                bpc,
                clock.elapsed().as_secs_f64(),
            )
            .map_err(|e| self.sink_err(e))?;

            if self.bad_streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged(format!(
                    "{DIVERGENCE_PATIENCE} consecutive unusable iterations ending at \
                     iteration {}: loss {loss}, loss scale {alpha} (floor {})",
                    self.iters_done,
                    self.group.scaler().at_floor(),
                )));
            }

            if self.cfg.checkpoint_every > 0
                && self.iters_done % self.cfg.checkpoint_every == 0
                && !self.cfg.checkpoint.is_empty()
            {
                let path = format!("{}.{}", self.cfg.checkpoint, self.iters_done);
                self.snapshot().save(Path::new(&path))?;
                log::info!("checkpoint at iteration {} -> {path}", self.iters_done);
            }
        }

        if !self.cfg.checkpoint.is_empty() {
            self.snapshot().save(Path::new(&self.cfg.checkpoint))?;
        }
        let eval_rows = clamped_eval_batch(&self.cfg, self.val.len());
        let val = evaluate(
            self.group.model(),
            &self.val,
            eval_rows,
            self.cfg.seq_len,
            self.cfg.seed,
        )?;
        log::info!(
            "finished: {} iterations, {} epochs, final loss {last_loss:.4} nats, \
             held-out {:.4} bpc",
            self.iters_done,
            self.epochs_done,
            val.mean_bpc,
        );
        Ok(TrainOutcome {
            iters: self.iters_done,
            epochs: self.epochs_done,
            final_loss_nats: last_loss,
            val,
        })
    }
}

/// Merge a checkpoint's run identity with the caller's output plumbing.
pub fn resume_config(from_checkpoint: &RunConfig, plumbing: &RunConfig) -> RunConfig {
    let mut cfg = from_checkpoint.clone();
    cfg.checkpoint = plumbing.checkpoint.clone();
    cfg.checkpoint_every = plumbing.checkpoint_every;
    cfg.metrics = plumbing.metrics.clone();
    cfg.resume = plumbing.resume.clone();
    cfg
}
