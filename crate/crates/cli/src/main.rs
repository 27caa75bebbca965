//! `charlm` — train, evaluate, and transfer character-level mLSTM language
//! models from the terminal.
//!
//! Subcommands map onto the library's orchestration layer; this binary only
//! parses flags, wires files, and turns errors into exit codes: 0 success,
//! 1 usage/config, 2 data, 3 divergence. Log verbosity follows `RUST_LOG`
//! (default `info`).

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use charlm_core::checkpoint::TrainCheckpoint;
use charlm_core::config::{RunConfig, DEFAULT_FEATURE_WINDOW};
use charlm_core::ddp::{parse_timings_csv, speedup_report, speedup_report_csv};
use charlm_core::error::Error;
use charlm_core::eval::{evaluate, featurize, FeatureKind};
use charlm_core::logreg::{
    logreg_accuracy, logreg_fit, logreg_fit_with_grid, LabeledTextSet, LogisticRegression,
};
use charlm_core::trainer::{clamped_eval_batch, load_split, Trainer};

#[derive(Parser)]
#[command(name = "charlm", version, about = "Character-level mLSTM language model trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Report held-out bits-per-character for a checkpoint.
    Eval(EvalArgs),
    /// Frozen-feature transfer to binary text classification.
    Transfer(TransferArgs),
    /// Turn measured iteration timings into a speedup/efficiency table.
    SpeedupReport(SpeedupArgs),
}

/// Every run-config key, mirrored one-to-one as a flag. A flag set here
/// overrides the same key from `--config`; both override the defaults.
#[derive(Args, Default)]
struct KeyOverrides {
    #[arg(long, value_name = "N")]
    hidden_dim: Option<String>,
    #[arg(long, value_name = "N")]
    embed_dim: Option<String>,
    #[arg(long, value_name = "N")]
    seq_len: Option<String>,
    #[arg(long, value_name = "N")]
    batch_size: Option<String>,
    #[arg(long, value_name = "N")]
    n_workers: Option<String>,
    #[arg(long, value_name = "RATE")]
    base_lr: Option<String>,
    #[arg(long, value_name = "none|linear|sqrt")]
    lr_rule: Option<String>,
    #[arg(long, value_name = "N")]
    decay_iters: Option<String>,
    #[arg(long, value_name = "N")]
    max_epochs: Option<String>,
    #[arg(long, value_name = "N")]
    growth_interval: Option<String>,
    #[arg(long, value_name = "mixed|fp32")]
    precision: Option<String>,
    #[arg(long, value_name = "N")]
    seed: Option<String>,
    #[arg(long, value_name = "PATH")]
    data: Option<String>,
    #[arg(long, value_name = "N")]
    eval_batch: Option<String>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<String>,
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<String>,
    #[arg(long, value_name = "PATH")]
    resume: Option<String>,
    #[arg(long, value_name = "PATH")]
    metrics: Option<String>,
    #[arg(long, value_name = "cell|hidden")]
    feature_kind: Option<String>,
    #[arg(long, value_name = "BYTES")]
    window: Option<String>,
}

impl KeyOverrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        let pairs: [(&str, &Option<String>); 20] = [
            ("hidden_dim", &self.hidden_dim),
            ("embed_dim", &self.embed_dim),
            ("seq_len", &self.seq_len),
            ("batch_size", &self.batch_size),
            ("n_workers", &self.n_workers),
            ("base_lr", &self.base_lr),
            ("lr_rule", &self.lr_rule),
            ("decay_iters", &self.decay_iters),
            ("max_epochs", &self.max_epochs),
            ("growth_interval", &self.growth_interval),
            ("precision", &self.precision),
            ("seed", &self.seed),
            ("data", &self.data),
            ("eval_batch", &self.eval_batch),
            ("checkpoint", &self.checkpoint),
            ("checkpoint_every", &self.checkpoint_every),
            ("resume", &self.resume),
            ("metrics", &self.metrics),
            ("feature_kind", &self.feature_kind),
            ("window", &self.window),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: KeyOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Corpus override; defaults to the path recorded in the checkpoint.
    #[arg(long, value_name = "PATH")]
    data: Option<String>,
    /// Eval batch override.
    #[arg(long, value_name = "N")]
    eval_batch: Option<usize>,
}

#[derive(Args)]
struct TransferArgs {
    /// Checkpoint providing the frozen feature extractor.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Labeled training set: one `label<TAB>text` per line, labels 0/1.
    #[arg(long, value_name = "PATH")]
    train_set: PathBuf,
    /// Labeled held-out set in the same format.
    #[arg(long, value_name = "PATH")]
    test_set: PathBuf,
    /// Fixed L2 strength; when absent a 10-point log grid is selected on a
    /// validation fold carved from the training set.
    #[arg(long, value_name = "LAMBDA")]
    l2: Option<f64>,
    /// Feature override: cell or hidden; defaults to the checkpoint config.
    #[arg(long, value_name = "cell|hidden")]
    feature_kind: Option<String>,
    /// Streaming window for featurization (memory knob; results identical).
    #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_FEATURE_WINDOW)]
    window: usize,
}

#[derive(Args)]
struct SpeedupArgs {
    /// Measured timings CSV: `n_gpus,seconds_per_iter,label`.
    #[arg(long, value_name = "PATH")]
    timings: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::SpeedupReport(args) => cmd_speedup(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// 1 usage/config, 2 data, 3 divergence.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) => 3,
        Error::Io { .. } | Error::InsufficientData(_) | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn build_config(file: Option<&Path>, overrides: &KeyOverrides) -> Result<RunConfig, Error> {
    let mut cfg = match file {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = build_config(args.config.as_deref(), &args.overrides)?;

    let (mut trainer, resuming) = if cfg.resume.is_empty() {
        (Trainer::new(cfg.clone())?, false)
    } else {
        let ckpt = TrainCheckpoint::load(Path::new(&cfg.resume))?;
        log::info!(
            "resuming from {} at iteration {}",
            cfg.resume,
            ckpt.iter
        );
        (Trainer::resume(&ckpt, &cfg)?, true)
    };

    // A fresh run truncates the metrics file; a resumed run appends so that
    // continuing in place yields one seamless log.
    let metrics_path = trainer.cfg().metrics.clone();
    let file = OpenOptions::new()
        .create(true)
        .append(resuming)
        .truncate(!resuming)
        .write(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut sink = BufWriter::new(file);

    let outcome = trainer.run(&mut sink)?;
    sink.flush().map_err(|e| Error::io(&metrics_path, e))?;
    println!(
        "iters={} epochs={} final_loss_nats={:.6} heldout_bpc={:.6}",
        outcome.iters, outcome.epochs, outcome.final_loss_nats, outcome.val.mean_bpc
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ckpt = TrainCheckpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(data) = args.data {
        cfg.data = data;
    }
    if let Some(b) = args.eval_batch {
        cfg.eval_batch = b;
    }
    let model = ckpt.model()?;
    let split = load_split(&cfg)?;
    let rows = clamped_eval_batch(&cfg, split.test.len());
    let report = evaluate(&model, &split.test, rows, cfg.seq_len, cfg.seed)?;

    let out = std::io::stdout();
    let mut out = out.lock();
    writeln!(out, "shard,bpc,tokens").ok();
    for (i, (bpc, tokens)) in report
        .shard_bpc
        .iter()
        .zip(&report.shard_tokens)
        .enumerate()
    {
        writeln!(out, "{i},{bpc:.6},{tokens}").ok();
    }
    writeln!(out, "mean,{:.6},{}", report.mean_bpc, report.tokens).ok();
    Ok(())
}

fn read_labeled(path: &Path) -> Result<LabeledTextSet, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabeledTextSet::from_tsv(&text)
}

fn feature_matrix(
    model: &charlm_core::model::Mlstm<f32>,
    set: &LabeledTextSet,
    window: usize,
    kind: FeatureKind,
) -> Result<Vec<Vec<f32>>, Error> {
    set.items
        .iter()
        .map(|(text, _)| featurize(model, text, window, kind))
        .collect()
}

fn cmd_transfer(args: TransferArgs) -> Result<(), Error> {
    let ckpt = TrainCheckpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let kind = match &args.feature_kind {
        Some(s) => FeatureKind::parse(s)?,
        None => ckpt.config.feature_kind,
    };

    let train = read_labeled(&args.train_set)?;
    let test = read_labeled(&args.test_set)?;
    log::info!(
        "featurizing {} train + {} test texts ({} features)",
        train.len(),
        test.len(),
        kind.name()
    );
    let train_x = feature_matrix(&model, &train, args.window, kind)?;
    let test_x = feature_matrix(&model, &test, args.window, kind)?;
    let train_y = train.labels();
    let test_y = test.labels();

    let (l2, clf): (f64, LogisticRegression) = match args.l2 {
        Some(l2) => (l2, logreg_fit(&train_x, &train_y, l2)?),
        None => {
            // Deterministic 1-in-5 stride carves the validation fold; a
            // stride keeps both classes represented for any label order.
            let is_val = |i: usize| i % 5 == 0;
            let pick = |xs: &[Vec<f32>], ys: &[u8], val: bool| {
                let x: Vec<Vec<f32>> = xs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| is_val(*i) == val)
                    .map(|(_, v)| v.clone())
                    .collect();
                let y: Vec<u8> = ys
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| is_val(*i) == val)
                    .map(|(_, v)| *v)
                    .collect();
                (x, y)
            };
            let (fit_x, fit_y) = pick(&train_x, &train_y, false);
            let (val_x, val_y) = pick(&train_x, &train_y, true);
            logreg_fit_with_grid(&fit_x, &fit_y, &val_x, &val_y)?
        }
    };

    let train_acc = logreg_accuracy(&clf, &train_x, &train_y);
    let test_acc = logreg_accuracy(&clf, &test_x, &test_y);
    log::info!(
        "l2={l2:e}, majority baseline {:.4}",
        test.majority_baseline()
    );
    println!("split,items,accuracy");
    println!("train,{},{train_acc:.6}", train.len());
    println!("test,{},{test_acc:.6}", test.len());
    Ok(())
}

fn cmd_speedup(args: SpeedupArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.timings).map_err(|e| Error::io(&args.timings, e))?;
    let timings = parse_timings_csv(&text)?;
    let rows = speedup_report(&timings)?;
    let csv = speedup_report_csv(&rows);
    match args.out {
        Some(path) => std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}
