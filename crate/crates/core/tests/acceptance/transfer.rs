//! Frozen-feature transfer: overfit a tiny language model on text whose
//! sentiment is carried by explicit marker words, then check that a linear
//! probe over its recurrent state separates the classes — and that the
//! probe's optimum agrees with an independent convex solver.

use crate::support;
use charlm_core::config::RunConfig;
use charlm_core::eval::{featurize, FeatureKind};
use charlm_core::logreg::logreg_fit;
use charlm_core::trainer::Trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POS_MARKERS: &[&str] = &["marvelous", "delightful", "splendid", "wonderful", "gleaming"];
const NEG_MARKERS: &[&str] = &["dreadful", "wretched", "dismal", "gloomy", "rotten"];

/// A synthetic review: filler prose with 4–7 class markers spliced in at
/// random word boundaries, closed by a verdict sentence naming two more.
/// The marker vocabularies are disjoint from the filler vocabulary, so
/// class is perfectly lexically determined, and the closing verdict keeps
/// class evidence inside the recurrent state's effective memory horizon —
/// the featurizer reads out the state after the final character.
fn sentiment_doc(rng: &mut ChaCha8Rng, positive: bool) -> String {
    let markers = if positive { POS_MARKERS } else { NEG_MARKERS };
    let pick = |rng: &mut ChaCha8Rng| markers[rng.gen_range(0..markers.len())];
    let base = support::record(rng, 90);
    let mut words: Vec<String> = base.split(' ').map(str::to_string).collect();
    for _ in 0..rng.gen_range(4..=7) {
        let m = pick(rng);
        let at = rng.gen_range(0..=words.len());
        words.insert(at, m.to_string());
    }
    let (a, b) = (pick(rng), pick(rng));
    format!("{} Overall it was {a} and {b}.", words.join(" "))
}

/// Standardize every feature column to zero mean and unit variance, with
/// the statistics taken from the training rows only. Raw cell states have
/// per-coordinate scales tens apart, which conditions the probe's Hessian
/// badly; both solvers get the standardized view.
fn standardize(train: &mut [Vec<f32>], test: &mut [Vec<f32>]) {
    let d = train[0].len();
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.iter().map(|x| x[j] as f64).sum::<f64>() / n;
        let var = train
            .iter()
            .map(|x| (x[j] as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let scale = 1.0 / var.sqrt().max(1e-6);
        for x in train.iter_mut().chain(test.iter_mut()) {
            x[j] = ((x[j] as f64 - mean) * scale) as f32;
        }
    }
}

fn feature_set(
    model: &charlm_core::model::Mlstm<f32>,
    rng: &mut ChaCha8Rng,
    per_class: usize,
) -> Result<(Vec<Vec<f32>>, Vec<u8>), String> {
    let mut x = Vec::with_capacity(2 * per_class);
    let mut y = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let positive = i % 2 == 0;
        let doc = sentiment_doc(rng, positive);
        x.push(
            featurize(model, &doc, 4096, FeatureKind::CellState)
                .map_err(|e| format!("featurize failed: {e}"))?,
        );
        y.push(u8::from(positive));
    }
    Ok((x, y))
}

/// Criterion: ≥ 90% held-out accuracy from frozen features against the 50%
/// majority baseline of a balanced test set, and the fitted probe matching
/// the Newton-solver optimum to 1e-4 per coordinate.
pub fn transfer_pipeline() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E27);

    // Language-model corpus: 1200 balanced documents, trained well past the
    // point of memorizing the marker words.
    let docs: Vec<String> = (0..1200).map(|i| sentiment_doc(&mut rng, i % 2 == 0)).collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_path = dir.path().join("sentiment.txt");
    support::write_lines(&corpus_path, &docs);

    let mut cfg = RunConfig::default();
    cfg.hidden_dim = 32;
    cfg.embed_dim = 16;
    cfg.seq_len = 64;
    cfg.batch_size = 8;
    cfg.base_lr = 2e-3;
    cfg.decay_iters = 1200;
    cfg.data = corpus_path.display().to_string();
    cfg.checkpoint = String::new();
    cfg.metrics = String::new();
    let mut trainer = Trainer::new(cfg).map_err(|e| format!("trainer init: {e}"))?;
    let mut sink = Vec::new();
    let outcome = trainer.run(&mut sink).map_err(|e| format!("training: {e}"))?;
    let model = trainer.model();

    // Fresh draws from the same generator stream: unseen by the language
    // model and by each other.
    let (mut train_x, train_y) = feature_set(model, &mut rng, 120)?;
    let (mut test_x, test_y) = feature_set(model, &mut rng, 60)?;
    standardize(&mut train_x, &mut test_x);
    let positives = test_y.iter().filter(|&&l| l == 1).count();
    check!(
        positives * 2 == test_y.len(),
        "test set is not balanced; majority baseline would not be 50%"
    );

    let l2 = 0.1;
    let clf = logreg_fit(&train_x, &train_y, l2).map_err(|e| format!("logreg: {e}"))?;
    let correct = test_x
        .iter()
        .zip(&test_y)
        .filter(|(x, &y)| clf.predict(x) == y)
        .count();
    let acc = correct as f64 / test_y.len() as f64;
    check!(
        acc >= 0.9,
        "held-out accuracy {acc:.3} ({correct}/{}) below 0.9",
        test_y.len()
    );

    // Same objective, solved independently by Newton iteration with an
    // explicit Hessian: the two optimizers must land on the same optimum.
    let (w_star, b_star) = support::newton_logreg(&train_x, &train_y, l2);
    let mut worst = (clf.bias - b_star).abs();
    for (w, ws) in clf.weights.iter().zip(&w_star) {
        worst = worst.max((w - ws).abs());
    }
    check!(
        worst <= 1e-4,
        "probe disagrees with the Newton oracle by {worst:.2e}"
    );

    Ok(format!(
        "lm bpc {:.3}, held-out accuracy {acc:.3} vs 0.500 baseline, oracle gap {worst:.1e}",
        outcome.val.mean_bpc
    ))
}
