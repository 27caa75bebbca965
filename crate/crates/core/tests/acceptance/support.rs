//! Shared fixtures: deterministic text generation, entropy, metric helpers,
//! and the independent logistic-regression solver the transfer check
//! compares against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use tempfile::TempDir;

/// Filler vocabulary for synthetic English-like text. Function words and
/// ordinary nouns only — the sentiment markers used by the transfer check
/// are deliberately absent from this list.
const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "was",
    "on", "are", "as", "with", "his", "they", "at", "be", "this", "have",
    "from", "or", "one", "had", "by", "word", "but", "not", "what", "all",
    "were", "we", "when", "your", "can", "said", "there", "use", "an",
    "each", "which", "she", "do", "how", "their", "if", "will", "up",
    "other", "about", "out", "many", "then", "them", "these", "so", "some",
    "her", "would", "make", "like", "him", "into", "time", "has", "look",
    "two", "more", "write", "go", "see", "number", "no", "way", "could",
    "people", "my", "than", "first", "water", "been", "call", "who", "oil",
    "its", "now", "find", "long", "down", "day", "did", "get", "come",
    "made", "may", "part", "over", "new", "sound", "take", "only", "little",
    "work", "know", "place", "year", "live", "me", "back", "give", "most",
    "very", "after", "thing", "our", "just", "name", "good", "sentence",
    "man", "think", "say", "great", "where", "help", "through", "much",
    "before", "line", "right", "too", "mean", "old", "any", "same", "tell",
    "boy", "follow", "came", "want", "show", "also", "around", "form",
    "three", "small", "set", "put", "end", "does", "another", "well",
    "large", "must", "big", "even", "such", "because", "turn", "here",
    "why", "ask", "went", "men", "read", "need", "land", "different",
    "home", "us", "move", "try", "kind", "hand", "picture", "again",
    "change", "off", "play", "spell", "air", "away", "animal", "house",
    "point", "page", "letter", "mother", "answer", "found", "study",
    "still", "learn", "should", "america", "world", "high", "every",
    "near", "add", "food", "between", "own", "below", "country", "plant",
    "last", "school", "father", "keep", "tree", "never", "start", "city",
    "earth", "eye", "light", "thought", "head", "under", "story", "saw",
    "left", "few", "while", "along", "might", "close", "something", "seem",
    "next", "hard", "open", "example", "begin", "life", "always", "those",
    "both", "paper", "together", "got", "group", "often", "run",
    "important", "until", "children", "side", "feet", "car", "mile",
    "night", "walk", "white", "sea", "began", "grow", "took", "river",
    "four", "carry", "state", "once", "book", "hear", "stop", "without",
    "second", "later", "miss", "idea", "enough", "eat", "face", "watch",
    "far", "indian", "really", "almost", "let", "above", "girl",
    "sometimes", "mountain", "cut", "young", "talk", "soon", "list",
    "song", "being", "leave", "family", "music", "body", "color", "stand",
    "sun", "question", "fish", "area", "mark", "dog", "horse", "birds",
    "problem", "complete", "room", "knew", "since", "ever", "piece",
    "told", "usually", "friends", "easy", "heard", "order", "red", "door",
    "sure", "become", "top", "ship", "across", "today", "during", "short",
    "better", "best", "however", "low", "hours", "black", "products",
    "happened", "whole", "measure", "remember", "early", "waves",
    "reached",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(7..=15);
    let mut words: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
    let mut s = String::new();
    let comma_at = if n >= 7 && rng.gen_bool(0.35) {
        Some(rng.gen_range(3..n - 2))
    } else {
        None
    };
    for (i, w) in words.drain(..).enumerate() {
        if i == 0 {
            let mut chars = w.chars();
            let head = chars.next().unwrap().to_ascii_uppercase();
            s.push(head);
            s.push_str(chars.as_str());
        } else {
            s.push(' ');
            s.push_str(w);
        }
        if comma_at == Some(i) {
            s.push(',');
        }
    }
    s.push(if rng.gen_bool(0.12) { '?' } else { '.' });
    s
}

/// One record: sentences appended until the length clears `min_len`. Records
/// hold no newlines, so a shard's records can be recovered by splitting its
/// text on `\n`.
pub fn record(rng: &mut ChaCha8Rng, min_len: usize) -> String {
    let mut r = sentence(rng);
    while r.len() < min_len {
        r.push(' ');
        r.push_str(&sentence(rng));
    }
    r
}

/// Deterministic corpus of at least `target_bytes` of synthetic prose,
/// as newline-free records of roughly 90–250 characters.
pub fn english_records(target_bytes: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut total = 0usize;
    while total < target_bytes {
        let r = record(&mut rng, 90);
        total += r.len() + 1;
        out.push(r);
    }
    out
}

pub fn write_lines(path: &Path, records: &[String]) {
    let mut f = std::fs::File::create(path).expect("create corpus file");
    for r in records {
        writeln!(f, "{r}").expect("write corpus record");
    }
}

/// Shannon entropy of the byte unigram distribution, in bits per byte.
pub fn order0_entropy_bits(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// The ~4 MB corpus shared by the training-based checks. Generated once,
/// written next to a tempdir that lives until the process exits.
pub struct BigCorpus {
    _dir: TempDir,
    pub path: PathBuf,
    pub bytes: usize,
    pub entropy_bits: f64,
}

pub fn big_corpus() -> &'static BigCorpus {
    static CORPUS: OnceLock<BigCorpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir for corpus");
        let records = english_records(4 << 20, 0x0C0A_9E55);
        let path = dir.path().join("corpus.txt");
        write_lines(&path, &records);
        let raw = std::fs::read(&path).expect("reread corpus");
        BigCorpus {
            entropy_bits: order0_entropy_bits(&raw),
            bytes: raw.len(),
            path,
            _dir: dir,
        }
    })
}

/// Resolution of the second significant figure of `p`: 1e-4 for 5.8e-3,
/// 1e-2 for 1.3e-1, and so on.
pub fn ulp_2sf(p: f64) -> f64 {
    10f64.powf(p.abs().log10().floor()) / 10.0
}

/// `x` rounded to two significant figures.
pub fn round_2sf(x: f64) -> f64 {
    let u = ulp_2sf(x);
    (x / u).round() * u
}

/// Largest elementwise deviation between two parameter vectors, relative to
/// the vector's own ∞-norm. An elementwise relative error would explode on
/// parameters that happen to sit near zero no matter how closely the runs
/// agree, so the comparison is at the scale of the vector.
pub fn max_dev_at_vector_scale(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()))
        .max(1e-30);
    let worst = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()));
    worst / scale
}

/// Replace the wall-clock column of a metrics CSV with a constant so two
/// runs of the same training can be compared byte for byte. Wall time is the
/// one column that legitimately differs between bit-identical runs.
pub fn mask_wall(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len());
    for line in csv.lines() {
        match line.rsplit_once(',') {
            Some((rest, _)) if !line.starts_with("iter,") => {
                out.push_str(rest);
                out.push_str(",WALL\n");
            }
            _ => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

/// Independent logistic-regression solver: full Newton steps with an
/// explicit Hessian and a Cholesky solve, all in f64. Minimizes the mean
/// log-loss plus l2/2·‖w‖² (bias unregularized) — the same objective the
/// library fits with Barzilai–Borwein gradient descent, reached by a
/// completely different route.
pub fn newton_logreg(x: &[Vec<f32>], y: &[u8], l2: f64) -> (Vec<f64>, f64) {
    let n = x.len();
    let d = x[0].len();
    let dim = d + 1;
    let mut theta = vec![0.0f64; dim];
    for _ in 0..200 {
        let mut g = vec![0.0f64; dim];
        let mut hess = vec![0.0f64; dim * dim];
        for (xi, &yi) in x.iter().zip(y) {
            let mut z = theta[d];
            for j in 0..d {
                z += theta[j] * xi[j] as f64;
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let r = p - yi as f64;
            let s = p * (1.0 - p);
            for j in 0..dim {
                let xj = if j < d { xi[j] as f64 } else { 1.0 };
                g[j] += r * xj;
                for k in 0..=j {
                    let xk = if k < d { xi[k] as f64 } else { 1.0 };
                    hess[j * dim + k] += s * xj * xk;
                }
            }
        }
        for j in 0..dim {
            g[j] /= n as f64;
            for k in 0..=j {
                hess[j * dim + k] /= n as f64;
                hess[k * dim + j] = hess[j * dim + k];
            }
        }
        for j in 0..d {
            g[j] += l2 * theta[j];
            hess[j * dim + j] += l2;
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12 {
            break;
        }

        // Cholesky: hess = L·Lᵀ, then two triangular solves for the step.
        let mut l = vec![0.0f64; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = hess[i * dim + j];
                for k in 0..j {
                    s -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    assert!(s > 0.0, "Hessian lost positive definiteness");
                    l[i * dim + i] = s.sqrt();
                } else {
                    l[i * dim + j] = s / l[j * dim + j];
                }
            }
        }
        let mut fwd = vec![0.0f64; dim];
        for i in 0..dim {
            let mut s = g[i];
            for k in 0..i {
                s -= l[i * dim + k] * fwd[k];
            }
            fwd[i] = s / l[i * dim + i];
        }
        let mut step = vec![0.0f64; dim];
        for i in (0..dim).rev() {
            let mut s = fwd[i];
            for k in i + 1..dim {
                s -= l[k * dim + i] * step[k];
            }
            step[i] = s / l[i * dim + i];
        }
        for j in 0..dim {
            theta[j] -= step[j];
        }
    }
    let bias = theta[d];
    theta.truncate(d);
    (theta, bias)
}
