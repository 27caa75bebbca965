//! Binary logistic regression on frozen features, in-repo and oracle-
//! checkable: the L2-regularized objective is convex, so any two competent
//! optimizers must land on the same optimum — which is exactly how the
//! tests pin this implementation down against an independent Newton solver.
//!
//! The fit is full-batch gradient descent with a Barzilai–Borwein initial
//! step and a monotone Armijo backtracking line search, run in f64 until
//! the gradient norm drops below tolerance. The penalty applies to the
//! weights only, never the bias, and the data term is averaged over
//! examples:
//!
//! ```text
//! J(w, b) = (1/n)·Σᵢ [softplus(zᵢ) − yᵢ·zᵢ] + (λ/2)·‖w‖²,   zᵢ = w·xᵢ + b
//! ```

use crate::error::{Error, Result};

/// Labeled corpus for transfer: `(text, label ∈ {0, 1})` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTextSet {
    pub items: Vec<(String, u8)>,
}

impl LabeledTextSet {
    /// Parse tab-separated lines `label TAB text`; blank lines are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, body) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("labeled line {} has no tab separator", i + 1))
            })?;
            let label: u8 = match label.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Config(format!(
                        "labeled line {}: label must be 0 or 1, got '{other}'",
                        i + 1
                    )))
                }
            };
            items.push((body.to_string(), label));
        }
        Ok(LabeledTextSet { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|(_, l)| *l).collect()
    }

    /// Fraction of the majority class — the no-information baseline.
    pub fn majority_baseline(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        let ones = self.items.iter().filter(|(_, l)| *l == 1).count();
        let n = self.items.len();
        ones.max(n - ones) as f64 / n as f64
    }
}

/// Fitted classifier: f64 weights over the feature vector plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
}

impl LogisticRegression {
    pub fn decision(&self, features: &[f32]) -> f64 {
        debug_assert_eq!(features.len(), self.weights.len());
        let mut z = self.bias;
        for (w, &x) in self.weights.iter().zip(features) {
            z += w * x as f64;
        }
        z
    }

    /// P(label = 1 | features).
    pub fn predict_proba(&self, features: &[f32]) -> f64 {
        let z = self.decision(features);
        1.0 / (1.0 + (-z).exp())
    }

    pub fn predict(&self, features: &[f32]) -> u8 {
        u8::from(self.decision(features) >= 0.0)
    }
}

/// ln(1 + eˣ) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Objective<'a> {
    x: &'a [Vec<f32>],
    y: &'a [u8],
    l2: f64,
    dim: usize,
}

impl Objective<'_> {
    /// theta = weights ++ [bias].
    fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.x.len() as f64;
        let (w, b) = theta.split_at(self.dim);
        let mut acc = 0.0;
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let mut z = b[0];
            for (wj, &xj) in w.iter().zip(xi) {
                z += wj * xj as f64;
            }
            acc += softplus(z) - yi as f64 * z;
        }
        acc / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, theta: &[f64], out: &mut [f64]) {
        let n = self.x.len() as f64;
        let (w, b) = theta.split_at(self.dim);
        out.fill(0.0);
        let (gw, gb) = out.split_at_mut(self.dim);
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let mut z = b[0];
            for (wj, &xj) in w.iter().zip(xi) {
                z += wj * xj as f64;
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let r = p - yi as f64;
            for (g, &xj) in gw.iter_mut().zip(xi) {
                *g += r * xj as f64;
            }
            gb[0] += r;
        }
        for (g, wj) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wj;
        }
        gb[0] /= n;
    }
}

/// Gradient-norm tolerance the fit runs to.
pub const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 10_000;
const ARMIJO_C: f64 = 1e-4;

/// Fit by full-batch descent from zero. Errors when a class is missing, a
/// feature is non-finite, or shapes disagree. The returned optimum is
/// tolerance-tight: ‖∇J‖₂ ≤ 1e-6 unless the iteration cap lands first.
pub fn logreg_fit(features: &[Vec<f32>], labels: &[u8], l2: f64) -> Result<LogisticRegression> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "logreg_fit",
            detail: format!("{} feature rows, {} labels", features.len(), labels.len()),
        });
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "logreg_fit",
            detail: "feature rows must share one positive length".into(),
        });
    }
    if features.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Contract {
            op: "logreg_fit",
            detail: "non-finite feature value".into(),
        });
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::Config(format!("l2 must be finite and ≥ 0, got {l2}")));
    }
    let has0 = labels.iter().any(|&l| l == 0);
    let has1 = labels.iter().any(|&l| l == 1);
    if !has0 || !has1 {
        return Err(Error::Contract {
            op: "logreg_fit",
            detail: "fitting needs both classes present; got a single-class set".into(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract {
            op: "logreg_fit",
            detail: "labels must be 0 or 1".into(),
        });
    }

    let obj = Objective { x: features, y: labels, l2, dim };
    let mut theta = vec![0.0f64; dim + 1];
    let mut grad = vec![0.0f64; dim + 1];
    let mut prev_theta = vec![0.0f64; dim + 1];
    let mut prev_grad = vec![0.0f64; dim + 1];
    let mut loss = obj.loss(&theta);
    obj.grad(&theta, &mut grad);

    for iter in 0..MAX_ITERS {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() <= GRAD_TOL {
            break;
        }
        // Barzilai–Borwein step as the first trial, safeguarded by a
        // monotone Armijo backtrack so the loss never increases.
        let mut step = if iter == 0 {
            1.0
        } else {
            let mut sy = 0.0;
            let mut yy = 0.0;
            for i in 0..theta.len() {
                let s = theta[i] - prev_theta[i];
                let y = grad[i] - prev_grad[i];
                sy += s * y;
                yy += y * y;
            }
            if sy > 0.0 && yy > 0.0 {
                (sy / yy).clamp(1e-10, 1e6)
            } else {
                1.0
            }
        };
        prev_theta.copy_from_slice(&theta);
        prev_grad.copy_from_slice(&grad);
        let mut accepted = false;
        while step >= 1e-14 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t - step * g)
                .collect();
            let trial_loss = obj.loss(&trial);
            if trial_loss <= loss - ARMIJO_C * step * gnorm2 {
                theta = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // The line search collapsed: we are at numerical stationarity.
            break;
        }
        obj.grad(&theta, &mut grad);
    }

    let bias = theta[dim];
    theta.truncate(dim);
    Ok(LogisticRegression { weights: theta, bias, l2 })
}

/// Fraction of `labels` the classifier reproduces.
pub fn logreg_accuracy(clf: &LogisticRegression, features: &[Vec<f32>], labels: &[u8]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let hits = features
        .iter()
        .zip(labels)
        .filter(|(f, &l)| clf.predict(f) == l)
        .count();
    hits as f64 / features.len() as f64
}

/// The regularization grid: ten logarithmic points centered on the default
/// of 1.0.
pub const L2_GRID: [f64; 10] = [
    1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4,
];

/// Fit once per grid point and keep the classifier with the best accuracy
/// on the validation fold; the first (smallest-λ) fit wins ties, so the
/// selection is deterministic.
pub fn logreg_fit_with_grid(
    train_x: &[Vec<f32>],
    train_y: &[u8],
    val_x: &[Vec<f32>],
    val_y: &[u8],
) -> Result<(f64, LogisticRegression)> {
    let mut best: Option<(f64, f64, LogisticRegression)> = None;
    for &l2 in &L2_GRID {
        let clf = logreg_fit(train_x, train_y, l2)?;
        let acc = logreg_accuracy(&clf, val_x, val_y);
        let better = match &best {
            None => true,
            Some((best_acc, _, _)) => acc > *best_acc,
        };
        if better {
            best = Some((acc, l2, clf));
        }
    }
    let (_, l2, clf) = best.expect("grid is non-empty");
    Ok((l2, clf))
}
