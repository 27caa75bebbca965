//! Python extension over the training engine. Exposes the binary16
//! conversions, learning-rate scaling, speedup arithmetic, full training
//! runs, and frozen-model featurization/scoring — the same code paths the
//! CLI drives, importable as `charlm`.
//!
//! Build with `cargo build -p charlm-py`; python/smoke_test.py shows how to
//! import the resulting cdylib and exercises the whole surface.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use charlm_core::checkpoint::TrainCheckpoint;
use charlm_core::config::{RunConfig, DEFAULT_FEATURE_WINDOW};
use charlm_core::ddp::IterationTiming;
use charlm_core::eval::{evaluate, FeatureKind};
use charlm_core::half;
use charlm_core::model::Mlstm;
use charlm_core::optimizer::{LrPolicy, LrRule};
use charlm_core::trainer::Trainer;
use charlm_core::Error;

/// Mistakes in caller-supplied values — config keys, malformed tables —
/// become ValueError; everything else (I/O trouble, divergence, numeric
/// failures) becomes RuntimeError.
fn pyerr(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Round an FP32 value to IEEE 754 binary16 and return the raw bits.
#[pyfunction]
fn f32_to_f16_bits(x: f32) -> u16 {
    half::f32_to_f16_bits(x)
}

/// Widen binary16 bits back to FP32. Exact — every binary16 value is
/// representable in FP32.
#[pyfunction]
fn f16_bits_to_f32(bits: u16) -> f32 {
    half::f16_bits_to_f32(bits)
}

/// FP32 → binary16 → FP32: the storage rounding applied to every working
/// copy the engine keeps in half precision.
#[pyfunction]
fn round_through_f16(x: f32) -> f32 {
    half::round_through_f16(x)
}

/// Initial learning rate for `batch_size` under a scaling rule — "none",
/// "linear", or "sqrt" — with `base_lr` referenced to batch 128.
#[pyfunction]
fn scale_lr(base_lr: f64, rule: &str, batch_size: usize) -> PyResult<f64> {
    let policy = LrPolicy {
        base_lr,
        rule: LrRule::parse(rule).map_err(pyerr)?,
        batch_size,
        // Schedule fields don't enter the initial rate.
        decay_iters: 0,
        max_epochs: 0,
    };
    Ok(policy.initial_lr())
}

fn parse_timings(timings: Vec<(String, u32, f64)>) -> Vec<IterationTiming> {
    timings
        .into_iter()
        .map(|(label, n_gpus, seconds_per_iter)| IterationTiming {
            label,
            n_gpus,
            seconds_per_iter,
        })
        .collect()
}

/// Relative speedups n·t₁/t_n and parallel efficiencies from measured
/// `(label, n_devices, seconds_per_iter)` rows. Labels group independently
/// and each needs an n=1 baseline; returns
/// `(label, n_devices, seconds_per_iter, speedup, efficiency)` rows.
#[pyfunction]
fn speedup_report(
    timings: Vec<(String, u32, f64)>,
) -> PyResult<Vec<(String, u32, f64, f64, f64)>> {
    let rows = charlm_core::ddp::speedup_report(&parse_timings(timings)).map_err(pyerr)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.label, r.n_gpus, r.seconds_per_iter, r.speedup, r.efficiency))
        .collect())
}

/// The same report rendered as CSV, matching the CLI's output.
#[pyfunction]
fn speedup_report_csv(timings: Vec<(String, u32, f64)>) -> PyResult<String> {
    let rows = charlm_core::ddp::speedup_report(&parse_timings(timings)).map_err(pyerr)?;
    Ok(charlm_core::ddp::speedup_report_csv(&rows))
}

/// Run a training job on the corpus at `data`. Every other config key —
/// "hidden_dim", "seq_len", "base_lr", "precision", "checkpoint",
/// "metrics", "resume", ... — can be overridden by keyword argument, using
/// the same key=value vocabulary as config files and CLI flags. Returns a
/// dict with iters, epochs, final_loss_nats, heldout_bpc, and checkpoint.
#[pyfunction]
#[pyo3(signature = (data, **overrides))]
fn train(py: Python<'_>, data: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyDict>> {
    let mut cfg = RunConfig::default();
    cfg.data = data.to_string();
    if let Some(kw) = overrides {
        for (key, value) in kw.iter() {
            let key: String = key.extract()?;
            // Stringify and hand to the config parser so one validated path
            // owns key names and value syntax for every frontend.
            let value: String = value.str()?.extract()?;
            cfg.set(&key, &value).map_err(pyerr)?;
        }
    }

    let resuming = !cfg.resume.is_empty();
    let mut trainer = if resuming {
        let ckpt = TrainCheckpoint::load(Path::new(&cfg.resume)).map_err(pyerr)?;
        Trainer::resume(&ckpt, &cfg).map_err(pyerr)?
    } else {
        Trainer::new(cfg).map_err(pyerr)?
    };

    let metrics_path = trainer.cfg().metrics.clone();
    let outcome = py
        .allow_threads(|| {
            if metrics_path.is_empty() {
                trainer.run(&mut std::io::sink())
            } else {
                // Fresh runs truncate the metrics log, resumed runs append —
                // the CLI's contract, kept here so logs stitch identically.
                let file = OpenOptions::new()
                    .create(true)
                    .append(resuming)
                    .truncate(!resuming)
                    .write(true)
                    .open(&metrics_path)
                    .map_err(|e| Error::io(&metrics_path, e))?;
                let mut sink = BufWriter::new(file);
                let out = trainer.run(&mut sink)?;
                sink.flush().map_err(|e| Error::io(&metrics_path, e))?;
                Ok(out)
            }
        })
        .map_err(pyerr)?;

    let out = PyDict::new(py);
    out.set_item("iters", outcome.iters)?;
    out.set_item("epochs", outcome.epochs)?;
    out.set_item("final_loss_nats", outcome.final_loss_nats)?;
    out.set_item("heldout_bpc", outcome.val.mean_bpc)?;
    out.set_item("checkpoint", trainer.cfg().checkpoint.clone())?;
    Ok(out.unbind())
}

/// A frozen model loaded from a checkpoint, for featurization and scoring.
#[pyclass]
struct Model {
    model: Mlstm<f32>,
    cfg: RunConfig,
    iter: u64,
}

#[pymethods]
impl Model {
    /// Reconstruct the model from a checkpoint's FP32 master parameters.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let ckpt = TrainCheckpoint::load(Path::new(path)).map_err(pyerr)?;
        let model = ckpt.model().map_err(pyerr)?;
        Ok(Model {
            model,
            cfg: ckpt.config,
            iter: ckpt.iter,
        })
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.cfg.seq_len
    }

    /// Training iteration the checkpoint was written at.
    #[getter]
    fn iteration(&self) -> u64 {
        self.iter
    }

    /// Stream `text` through the frozen model from zero state and return
    /// the final recurrent state as a list of `hidden_dim` floats — the
    /// transfer feature vector. `kind` is "cell" or "hidden"; the default
    /// comes from the checkpoint. `window` only bounds memory on long
    /// texts; it cannot change the result.
    #[pyo3(signature = (text, kind=None, window=None))]
    fn featurize(&self, text: &str, kind: Option<&str>, window: Option<usize>) -> PyResult<Vec<f32>> {
        let kind = match kind {
            Some(s) => FeatureKind::parse(s).map_err(pyerr)?,
            None => self.cfg.feature_kind,
        };
        let window = window.unwrap_or(DEFAULT_FEATURE_WINDOW);
        charlm_core::eval::featurize(&self.model, text, window, kind).map_err(pyerr)
    }

    /// Mean held-out bits per character over `records`, each scored as its
    /// own shard. Rows above `len(records)` would be idle, so `batch` is
    /// clamped to it.
    #[pyo3(signature = (records, batch=None, seed=None))]
    fn bpc(&self, records: Vec<String>, batch: Option<usize>, seed: Option<u64>) -> PyResult<f64> {
        let rows = batch.unwrap_or(self.cfg.eval_batch).min(records.len()).max(1);
        let seed = seed.unwrap_or(self.cfg.seed);
        let report = evaluate(&self.model, &records, rows, self.cfg.seq_len, seed).map_err(pyerr)?;
        Ok(report.mean_bpc)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(hidden_dim={}, embed_dim={}, seq_len={}, iteration={})",
            self.cfg.hidden_dim, self.cfg.embed_dim, self.cfg.seq_len, self.iter
        )
    }
}

#[pymodule]
fn charlm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(f32_to_f16_bits, m)?)?;
    m.add_function(wrap_pyfunction!(f16_bits_to_f32, m)?)?;
    m.add_function(wrap_pyfunction!(round_through_f16, m)?)?;
    m.add_function(wrap_pyfunction!(scale_lr, m)?)?;
    m.add_function(wrap_pyfunction!(speedup_report, m)?)?;
    m.add_function(wrap_pyfunction!(speedup_report_csv, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
