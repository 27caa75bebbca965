//! The multiplicative LSTM character language model: weight-normalized
//! parameters, half-precision working copies, and truncated backpropagation
//! through time over fixed-length byte windows.
//!
//! # Cell
//!
//! With embedded input `x` and previous state `(h, c)`:
//!
//! ```text
//! m = (W_mx·x) ⊙ (W_mh·h)                  multiplicative intermediate
//! z = W_ih·x + W_hm·m + b                  fused gate preactivations
//! (i, f, o, u) = split(z)                  row blocks, in that order
//! c' = σ(f)⊙c + σ(i)⊙tanh(u)
//! h' = σ(o)⊙tanh(c')
//! ```
//!
//! The four matrices W_mx, W_mh, W_ih, W_hm are weight-normalized per output
//! row (w_i = g_i·v_i/‖v_i‖₂); the bias, embedding, and decoder are not.
//!
//! # Precision
//!
//! Masters are full precision. In mixed mode the working copies and the
//! activation boundaries x, mx, mh, m, and h are rounded through binary16,
//! while gate preactivations, the cell state c, logits, and the softmax stay
//! FP32 — matching the rule that accumulations live in FP32 and storage
//! boundaries in FP16. Every matrix product accumulates in full precision
//! over ascending k, so results are bit-reproducible regardless of threading.
//! The backward pass mirrors the same boundaries: dlogits, dh, dz, dm, dmx,
//! dmh, and dx are rounded through binary16; weight-gradient accumulations
//! and the master-shaped results are FP32.
//!
//! The whole engine is generic over [`Scalar`]. The f32 instantiation is the
//! production path; the f64 instantiation (necessarily unquantized) exists so
//! tests can check the analytic gradients against finite differences without
//! half-precision noise drowning the comparison.
//!
//! # Layout
//!
//! Activations are position-major: position `p = t·B + b` holds step `t` of
//! batch row `b`. Everything that does not depend on the recurrence — the
//! embedding gather, the two input-side products, the decoder — runs as one
//! batched matrix product over all `T·B` positions; only the h- and m-side
//! products run per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    colsum_acc_into, dot, gemm_acc_into, gemm_into, quantize_slice, Precision, Scalar,
};
use crate::tensor::Tensor;

/// Byte-level token count; fixed.
pub const VOCAB: usize = 256;

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Default TBTT window; the engine accepts any positive length per call.
    pub seq_len: usize,
}

impl MlstmConfig {
    pub fn new(embed_dim: usize, hidden_dim: usize, seq_len: usize) -> Self {
        MlstmConfig {
            vocab_size: VOCAB,
            embed_dim,
            hidden_dim,
            seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB {
            return Err(Error::Config(format!(
                "vocab_size is fixed at {VOCAB} byte tokens, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "embed_dim, hidden_dim, and seq_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Master-shaped parameter collection. Also the shape of gradients — the two
/// always travel together through the optimizer and gradient exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    pub e_emb: Tensor<S>, // [V×e]
    pub v_mx: Tensor<S>,  // [h×e]
    pub g_mx: Vec<S>,     // [h]
    pub v_mh: Tensor<S>,  // [h×h]
    pub g_mh: Vec<S>,
    pub v_ih: Tensor<S>, // [4h×e]
    pub g_ih: Vec<S>,
    pub v_hm: Tensor<S>, // [4h×h]
    pub g_hm: Vec<S>,
    pub b: Vec<S>,        // [4h]
    pub w_dec: Tensor<S>, // [V×h]
    pub b_dec: Vec<S>,    // [V]
}

/// Per-parameter gradients, FP32 master shapes.
pub type SequenceGrads<S> = ParamSet<S>;

impl<S: Scalar> ParamSet<S> {
    pub fn zeros(cfg: &MlstmConfig) -> Self {
        let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
        ParamSet {
            e_emb: Tensor::zeros(&[v, e]),
            v_mx: Tensor::zeros(&[h, e]),
            g_mx: vec![S::ZERO; h],
            v_mh: Tensor::zeros(&[h, h]),
            g_mh: vec![S::ZERO; h],
            v_ih: Tensor::zeros(&[4 * h, e]),
            g_ih: vec![S::ZERO; 4 * h],
            v_hm: Tensor::zeros(&[4 * h, h]),
            g_hm: vec![S::ZERO; 4 * h],
            b: vec![S::ZERO; 4 * h],
            w_dec: Tensor::zeros(&[v, h]),
            b_dec: vec![S::ZERO; v],
        }
    }

    /// The canonical tensor order. Initialization, flattening, gradient
    /// exchange, and checkpoints all follow it.
    pub fn tensors(&self) -> [(&'static str, &[S]); 12] {
        [
            ("embedding", self.e_emb.data()),
            ("v_mx", self.v_mx.data()),
            ("g_mx", &self.g_mx),
            ("v_mh", self.v_mh.data()),
            ("g_mh", &self.g_mh),
            ("v_ih", self.v_ih.data()),
            ("g_ih", &self.g_ih),
            ("v_hm", self.v_hm.data()),
            ("g_hm", &self.g_hm),
            ("bias", &self.b),
            ("decoder_w", self.w_dec.data()),
            ("decoder_b", &self.b_dec),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [S]); 12] {
        [
            ("embedding", self.e_emb.data_mut()),
            ("v_mx", self.v_mx.data_mut()),
            ("g_mx", &mut self.g_mx),
            ("v_mh", self.v_mh.data_mut()),
            ("g_mh", &mut self.g_mh),
            ("v_ih", self.v_ih.data_mut()),
            ("g_ih", &mut self.g_ih),
            ("v_hm", self.v_hm.data_mut()),
            ("g_hm", &mut self.g_hm),
            ("bias", &mut self.b),
            ("decoder_w", self.w_dec.data_mut()),
            ("decoder_b", &mut self.b_dec),
        ]
    }

    /// Tensor dims in canonical order, for serialization.
    pub fn tensor_dims(&self) -> [(&'static str, Vec<usize>); 12] {
        [
            ("embedding", self.e_emb.dims().to_vec()),
            ("v_mx", self.v_mx.dims().to_vec()),
            ("g_mx", vec![self.g_mx.len()]),
            ("v_mh", self.v_mh.dims().to_vec()),
            ("g_mh", vec![self.g_mh.len()]),
            ("v_ih", self.v_ih.dims().to_vec()),
            ("g_ih", vec![self.g_ih.len()]),
            ("v_hm", self.v_hm.dims().to_vec()),
            ("g_hm", vec![self.g_hm.len()]),
            ("bias", vec![self.b.len()]),
            ("decoder_w", self.w_dec.dims().to_vec()),
            ("decoder_b", vec![self.b_dec.len()]),
        ]
    }

    pub fn flat_len(&self) -> usize {
        self.tensors().iter().map(|(_, d)| d.len()).sum()
    }

    /// Concatenate all tensors in canonical order.
    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, d) in self.tensors() {
            out.extend_from_slice(d);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::ShapeMismatch {
                op: "set_from_flat",
                detail: format!("flat length {} != parameter count {}", flat.len(), self.flat_len()),
            });
        }
        let mut off = 0;
        for (_, d) in self.tensors_mut() {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, d)| d.iter().all(|x| x.is_finite_s()))
    }
}

/// Build the effective weight w_i = g_i·v_i/‖v_i‖₂ row by row. The squared
/// sum accumulates in full precision left to right; the norm itself is then
/// rounded to binary16 when `quantize` is set (the norm is an FP16 output by
/// rule), as is each produced element. Returns the working matrix and the
/// per-row norms actually used, which the backward chain rule must reuse.
pub fn weight_norm_build<S: Scalar>(
    v: &Tensor<S>,
    g: &[S],
    quantize: bool,
) -> Result<(Tensor<S>, Vec<S>)> {
    let rows = v.rows();
    let cols = v.cols();
    if g.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "weight_norm_build",
            detail: format!("{} gains for {} rows", g.len(), rows),
        });
    }
    let mut w = vec![S::ZERO; rows * cols];
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let vrow = &v.data()[r * cols..(r + 1) * cols];
        let mut n = crate::numerics::sum_squares(vrow).sqrt();
        if quantize {
            n = n.quantize_f16();
        }
        if !(n.is_finite_s() && n > S::ZERO) {
            return Err(Error::SingularParameter(format!(
                "row {r} has norm {:?}; weight-normalized rows must have a positive finite norm",
                n
            )));
        }
        let scale = g[r] / n;
        let wrow = &mut w[r * cols..(r + 1) * cols];
        for (wv, &vv) in wrow.iter_mut().zip(vrow) {
            let val = scale * vv;
            *wv = if quantize { val.quantize_f16() } else { val };
        }
        norms.push(n);
    }
    Ok((Tensor::from_vec(&[rows, cols], w)?, norms))
}

/// Convert a gradient on the effective weight w = g·v/‖v‖ into gradients on
/// (v, g), using the norms the forward build actually used.
fn weight_norm_chain<S: Scalar>(
    dw: &Tensor<S>,
    v: &Tensor<S>,
    g: &[S],
    norms: &[S],
) -> (Tensor<S>, Vec<S>) {
    let rows = v.rows();
    let cols = v.cols();
    let mut dv = vec![S::ZERO; rows * cols];
    let mut dg = Vec::with_capacity(rows);
    for r in 0..rows {
        let vrow = &v.data()[r * cols..(r + 1) * cols];
        let dwrow = &dw.data()[r * cols..(r + 1) * cols];
        let n = norms[r];
        let d = dot(dwrow, vrow);
        dg.push(d / n);
        let coef = g[r] / n;
        let c2 = coef * d / (n * n);
        let dvrow = &mut dv[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dvrow[j] = coef * dwrow[j] - c2 * vrow[j];
        }
    }
    (Tensor::from_vec(&[rows, cols], dv).expect("shape fixed above"), dg)
}

/// Working copies derived from the masters: weight-normalized, quantized in
/// mixed mode, and kept in both row layouts so forward and backward products
/// both stream rows.
#[derive(Debug, Clone)]
struct WorkingSet<S> {
    e_emb: Tensor<S>,
    w_mx: Tensor<S>,
    w_mx_t: Tensor<S>,
    n_mx: Vec<S>,
    w_mh: Tensor<S>,
    w_mh_t: Tensor<S>,
    n_mh: Vec<S>,
    w_ih: Tensor<S>,
    w_ih_t: Tensor<S>,
    n_ih: Vec<S>,
    w_hm: Tensor<S>,
    w_hm_t: Tensor<S>,
    n_hm: Vec<S>,
    b: Vec<S>,
    w_dec: Tensor<S>,
    w_dec_t: Tensor<S>,
    b_dec: Vec<S>,
}

fn transpose<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (t.rows(), t.cols());
    let src = t.data();
    let mut out = vec![S::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out).expect("transpose preserves element count")
}

/// Recurrent state: half-boundary hidden vector and full-precision cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<S> {
    pub h: Tensor<S>, // [B×h]
    pub c: Tensor<S>, // [B×h]
}

impl<S: Scalar> HiddenState<S> {
    pub fn zeros(batch: usize, hidden_dim: usize) -> Self {
        HiddenState {
            h: Tensor::zeros(&[batch, hidden_dim]),
            c: Tensor::zeros(&[batch, hidden_dim]),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    /// Zero the rows whose shard just began.
    pub fn apply_resets(&mut self, reset: &[bool]) {
        let hd = self.h.cols();
        for (r, &flag) in reset.iter().enumerate() {
            if flag {
                self.h.data_mut()[r * hd..(r + 1) * hd].fill(S::ZERO);
                self.c.data_mut()[r * hd..(r + 1) * hd].fill(S::ZERO);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.data().iter().all(|x| x.is_finite_s())
            && self.c.data().iter().all(|x| x.is_finite_s())
    }
}

/// Everything the forward pass produces: FP32 logits, the detached state
/// after the window, and the cached activations the backward pass reads.
pub struct Forward<S: Scalar> {
    pub batch: usize,
    pub steps: usize,
    /// Position-major [steps·batch × vocab], full precision.
    pub logits: Tensor<S>,
    /// State after the last step; hand it to the next window.
    pub state: HiddenState<S>,
    cache: FwdCache<S>,
}

impl<S: Scalar> Forward<S> {
    /// Row index into position-major buffers for (batch row, step).
    pub fn position(&self, b: usize, t: usize) -> usize {
        t * self.batch + b
    }

    pub fn logits_at(&self, b: usize, t: usize) -> &[S] {
        let v = self.logits.cols();
        let p = self.position(b, t);
        &self.logits.data()[p * v..(p + 1) * v]
    }
}

struct FwdCache<S> {
    tokens_tm: Vec<u8>,
    x: Tensor<S>,  // [T·B × e]
    mx: Tensor<S>, // [T·B × h]
    mh: Tensor<S>,
    m: Tensor<S>,
    z: Tensor<S>, // [T·B × 4h], bias included
    c: Tensor<S>, // [T·B × h]
    h: Tensor<S>, // [T·B × h]
    h0: Tensor<S>,
    c0: Tensor<S>,
}

/// Result of the fused loss + backward pass.
pub struct LossBackward<S: Scalar> {
    /// This worker's share of the mean cross-entropy, in nats.
    pub loss_nats: f64,
    pub grads: SequenceGrads<S>,
    /// Some produced gradient is non-finite; skip the update and rescale.
    pub overflow: bool,
}

/// The model: configuration, masters, and the derived working set.
#[derive(Debug, Clone)]
pub struct Mlstm<S: Scalar> {
    cfg: MlstmConfig,
    precision: Precision,
    masters: ParamSet<S>,
    work: WorkingSet<S>,
}

impl<S: Scalar> Mlstm<S> {
    /// Seeded initialization. Directions and dense matrices draw from
    /// U(−1/√fan_in, 1/√fan_in); gains start at their row norms so effective
    /// weights equal the directions at step zero; biases start at zero.
    /// Tensors are filled in canonical order, so a seed pins every bit.
    pub fn init(cfg: MlstmConfig, precision: Precision, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if precision == Precision::Mixed && !S::HALF_CAPABLE {
            return Err(Error::Config(
                "mixed precision requires the f32 instantiation".into(),
            ));
        }
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |data: &mut [S], fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            for v in data.iter_mut() {
                *v = S::from_f32((rng.gen::<f32>() * 2.0 - 1.0) * bound);
            }
        };
        let mut p = ParamSet::zeros(&cfg);
        fill(p.e_emb.data_mut(), e);
        fill(p.v_mx.data_mut(), e);
        fill(p.v_mh.data_mut(), h);
        fill(p.v_ih.data_mut(), e);
        fill(p.v_hm.data_mut(), h);
        fill(p.w_dec.data_mut(), h);
        for (v, g) in [(&p.v_mx, &mut p.g_mx), (&p.v_mh, &mut p.g_mh)] {
            Self::gains_from_norms(v, g);
        }
        for (v, g) in [(&p.v_ih, &mut p.g_ih), (&p.v_hm, &mut p.g_hm)] {
            Self::gains_from_norms(v, g);
        }
        Self::from_masters(cfg, precision, p)
    }

    fn gains_from_norms(v: &Tensor<S>, g: &mut [S]) {
        let cols = v.cols();
        for (r, gv) in g.iter_mut().enumerate() {
            *gv = crate::numerics::sum_squares(&v.data()[r * cols..(r + 1) * cols]).sqrt();
        }
    }

    /// Assemble a model around existing masters (checkpoint load, tests).
    pub fn from_masters(
        cfg: MlstmConfig,
        precision: Precision,
        masters: ParamSet<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        if precision == Precision::Mixed && !S::HALF_CAPABLE {
            return Err(Error::Config(
                "mixed precision requires the f32 instantiation".into(),
            ));
        }
        let work = Self::build_working(&cfg, precision, &masters)?;
        Ok(Mlstm {
            cfg,
            precision,
            masters,
            work,
        })
    }

    pub fn cfg(&self) -> &MlstmConfig {
        &self.cfg
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn masters(&self) -> &ParamSet<S> {
        &self.masters
    }

    /// Mutate masters directly; call [`Mlstm::rebuild_working`] afterwards —
    /// the working set is only valid for the masters it was built from.
    pub fn masters_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.masters
    }

    pub fn param_count(&self) -> usize {
        self.masters.flat_len()
    }

    fn build_working(
        cfg: &MlstmConfig,
        precision: Precision,
        p: &ParamSet<S>,
    ) -> Result<WorkingSet<S>> {
        let _ = cfg;
        let quant = precision == Precision::Mixed;
        let (w_mx, n_mx) = weight_norm_build(&p.v_mx, &p.g_mx, quant)?;
        let (w_mh, n_mh) = weight_norm_build(&p.v_mh, &p.g_mh, quant)?;
        let (w_ih, n_ih) = weight_norm_build(&p.v_ih, &p.g_ih, quant)?;
        let (w_hm, n_hm) = weight_norm_build(&p.v_hm, &p.g_hm, quant)?;
        let mut e_emb = p.e_emb.clone();
        let mut b = p.b.clone();
        let mut w_dec = p.w_dec.clone();
        let mut b_dec = p.b_dec.clone();
        if quant {
            quantize_slice(e_emb.data_mut());
            quantize_slice(&mut b);
            quantize_slice(w_dec.data_mut());
            quantize_slice(&mut b_dec);
        }
        Ok(WorkingSet {
            w_mx_t: transpose(&w_mx),
            w_mh_t: transpose(&w_mh),
            w_ih_t: transpose(&w_ih),
            w_hm_t: transpose(&w_hm),
            w_dec_t: transpose(&w_dec),
            e_emb,
            w_mx,
            n_mx,
            w_mh,
            n_mh,
            w_ih,
            n_ih,
            w_hm,
            n_hm,
            b,
            w_dec,
            b_dec,
        })
    }

    /// Re-derive the working set after a master update.
    pub fn rebuild_working(&mut self) -> Result<()> {
        self.work = Self::build_working(&self.cfg, self.precision, &self.masters)?;
        Ok(())
    }

    /// Effective (working) weight of one normed matrix, for inspection.
    pub fn effective_weights(&self) -> [(&'static str, &Tensor<S>); 4] {
        [
            ("w_mx", &self.work.w_mx),
            ("w_mh", &self.work.w_mh),
            ("w_ih", &self.work.w_ih),
            ("w_hm", &self.work.w_hm),
        ]
    }

    /// Run the cell over `tokens` (row-major `[batch][t]`, any positive
    /// length) starting from `state`. The returned state is detached: the
    /// next window's backward pass treats it as a constant.
    pub fn forward_sequence(
        &self,
        tokens: &[u8],
        batch: usize,
        state: &HiddenState<S>,
    ) -> Result<Forward<S>> {
        let (e, h, v) = (self.cfg.embed_dim, self.cfg.hidden_dim, self.cfg.vocab_size);
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward_sequence",
                detail: format!("{} tokens do not tile batch {batch}", tokens.len()),
            });
        }
        let steps = tokens.len() / batch;
        if state.h.dims() != [batch, h] || state.c.dims() != [batch, h] {
            return Err(Error::ShapeMismatch {
                op: "forward_sequence",
                detail: format!(
                    "state dims {:?}/{:?} do not match batch {batch} × hidden {h}",
                    state.h.dims(),
                    state.c.dims()
                ),
            });
        }
        if !state.is_finite() {
            return Err(Error::NonFiniteState("forward_sequence".into()));
        }
        let quant = self.precision == Precision::Mixed;
        let positions = steps * batch;

        // Position-major token layout.
        let mut tokens_tm = vec![0u8; positions];
        for b in 0..batch {
            for t in 0..steps {
                tokens_tm[t * batch + b] = tokens[b * steps + t];
            }
        }

        // Embedding gather; rows are already quantized working values.
        let mut x = vec![S::ZERO; positions * e];
        for (p, &tok) in tokens_tm.iter().enumerate() {
            let row = &self.work.e_emb.data()[tok as usize * e..(tok as usize + 1) * e];
            x[p * e..(p + 1) * e].copy_from_slice(row);
        }

        // Input-side products for every position at once.
        let mut mx = vec![S::ZERO; positions * h];
        gemm_into(&mut mx, &x, self.work.w_mx_t.data(), positions, e, h);
        if quant {
            quantize_slice(&mut mx);
        }
        let mut z = vec![S::ZERO; positions * 4 * h];
        gemm_into(&mut z, &x, self.work.w_ih_t.data(), positions, e, 4 * h);

        let mut mh = vec![S::ZERO; positions * h];
        let mut m = vec![S::ZERO; positions * h];
        let mut c = vec![S::ZERO; positions * h];
        let mut hbuf = vec![S::ZERO; positions * h];

        for t in 0..steps {
            let row0 = t * batch;
            let (h_done, h_now) = hbuf.split_at_mut(row0 * h);
            let h_prev: &[S] = if t == 0 {
                state.h.data()
            } else {
                &h_done[(t - 1) * batch * h..]
            };

            // Recurrent products for this step.
            let mh_t = &mut mh[row0 * h..(row0 + batch) * h];
            gemm_into(mh_t, h_prev, self.work.w_mh_t.data(), batch, h, h);
            if quant {
                quantize_slice(mh_t);
            }
            let m_t = &mut m[row0 * h..(row0 + batch) * h];
            let mx_t = &mx[row0 * h..(row0 + batch) * h];
            for j in 0..batch * h {
                let val = mx_t[j] * mh_t[j];
                m_t[j] = if quant { val.quantize_f16() } else { val };
            }
            let z_t = &mut z[row0 * 4 * h..(row0 + batch) * 4 * h];
            gemm_acc_into(z_t, m_t, self.work.w_hm_t.data(), batch, h, 4 * h);
            for bi in 0..batch {
                let zrow = &mut z_t[bi * 4 * h..(bi + 1) * 4 * h];
                for (zv, &bv) in zrow.iter_mut().zip(&self.work.b) {
                    *zv = *zv + bv;
                }
            }

            // Gates and state update, elementwise.
            let (c_done, c_now) = c.split_at_mut(row0 * h);
            let c_prev: &[S] = if t == 0 {
                state.c.data()
            } else {
                &c_done[(t - 1) * batch * h..]
            };
            for bi in 0..batch {
                for j in 0..h {
                    let zi = z_t[bi * 4 * h + j];
                    let zf = z_t[bi * 4 * h + h + j];
                    let zo = z_t[bi * 4 * h + 2 * h + j];
                    let zu = z_t[bi * 4 * h + 3 * h + j];
                    let cv = zf.sigmoid() * c_prev[bi * h + j] + zi.sigmoid() * zu.tanh();
                    c_now[bi * h + j] = cv;
                    let hv = zo.sigmoid() * cv.tanh();
                    h_now[bi * h + j] = if quant { hv.quantize_f16() } else { hv };
                }
            }
        }

        // Decoder over every position; logits stay full precision.
        let mut logits = vec![S::ZERO; positions * v];
        gemm_into(&mut logits, &hbuf, self.work.w_dec_t.data(), positions, h, v);
        for p in 0..positions {
            let row = &mut logits[p * v..(p + 1) * v];
            for (lv, &bv) in row.iter_mut().zip(&self.work.b_dec) {
                *lv = *lv + bv;
            }
        }

        let last = (steps - 1) * batch;
        let state_out = HiddenState {
            h: Tensor::from_vec(&[batch, h], hbuf[last * h..(last + batch) * h].to_vec())?,
            c: Tensor::from_vec(&[batch, h], c[last * h..(last + batch) * h].to_vec())?,
        };
        Ok(Forward {
            batch,
            steps,
            logits: Tensor::from_vec(&[positions, v], logits)?,
            state: state_out,
            cache: FwdCache {
                tokens_tm,
                x: Tensor::from_vec(&[positions, e], x)?,
                mx: Tensor::from_vec(&[positions, h], mx)?,
                mh: Tensor::from_vec(&[positions, h], mh)?,
                m: Tensor::from_vec(&[positions, h], m)?,
                z: Tensor::from_vec(&[positions, 4 * h], z)?,
                c: Tensor::from_vec(&[positions, h], c)?,
                h: Tensor::from_vec(&[positions, h], hbuf)?,
                h0: state.h.clone(),
                c0: state.c.clone(),
            },
        })
    }

    /// Softmax cross-entropy plus the full backward pass through the window.
    ///
    /// `targets` is row-major `[batch][t]` like the forward tokens; rows with
    /// `active` false contribute nothing. `denom_positions` is the position
    /// count the mean is taken over — the caller supplies it so a worker
    /// seeing a slice of the global batch produces gradients that average
    /// (not sum) to the serial result. The loss is scaled by `alpha` before
    /// backpropagation and the returned gradients are still scaled; divide by
    /// `alpha` after the overflow check.
    pub fn loss_and_backward(
        &self,
        fwd: &Forward<S>,
        targets: &[u8],
        active: &[bool],
        denom_positions: f64,
        alpha: f32,
    ) -> Result<LossBackward<S>> {
        let (e, h, v) = (self.cfg.embed_dim, self.cfg.hidden_dim, self.cfg.vocab_size);
        let (batch, steps) = (fwd.batch, fwd.steps);
        let positions = steps * batch;
        if targets.len() != positions || active.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "loss_and_backward",
                detail: format!(
                    "targets {} / active {} for batch {batch} × steps {steps}",
                    targets.len(),
                    active.len()
                ),
            });
        }
        if !(denom_positions > 0.0) {
            return Err(Error::Contract {
                op: "loss_and_backward",
                detail: format!("denominator {denom_positions} must be positive"),
            });
        }
        if alpha < 1.0 {
            return Err(Error::Contract {
                op: "loss_and_backward",
                detail: format!("loss scale {alpha} must be at least 1"),
            });
        }
        let quant = self.precision == Precision::Mixed;
        let cache = &fwd.cache;
        let logits = fwd.logits.data();

        // Loss and (scaled, quantized) logit gradients in one pass over
        // positions, ascending so the accumulation order is fixed.
        let coef = S::from_f64(alpha as f64 / denom_positions);
        let mut dlogits = vec![S::ZERO; positions * v];
        let mut exp_row = vec![S::ZERO; v];
        let mut loss_acc = S::ZERO;
        for p in 0..positions {
            let b = p % batch;
            if !active[b] {
                continue;
            }
            let t = p / batch;
            let tgt = targets[b * steps + t] as usize;
            let row = &logits[p * v..(p + 1) * v];
            let mut max = row[0];
            for &x in &row[1..] {
                max = max.maximum(x);
            }
            if !max.is_finite_s() {
                // A diverging model can push logits to ±inf or NaN; feeding
                // that into exp/ln would trip their domain contracts. Poison
                // the row instead: the NaN loss and NaN gradients flow into
                // the overflow gate, which skips the update, and the
                // divergence detector takes it from there.
                let nan = S::from_f32(f32::NAN);
                loss_acc += nan;
                for d in &mut dlogits[p * v..(p + 1) * v] {
                    *d = nan;
                }
                continue;
            }
            let mut sum = S::ZERO;
            for (j, &x) in row.iter().enumerate() {
                let ex = (x - max).exp();
                exp_row[j] = ex;
                sum += ex;
            }
            loss_acc += max + sum.ln() - row[tgt];
            let inv = S::ONE / sum;
            let drow = &mut dlogits[p * v..(p + 1) * v];
            for j in 0..v {
                let mut d = exp_row[j] * inv;
                if j == tgt {
                    d = d - S::ONE;
                }
                let val = coef * d;
                drow[j] = if quant { val.quantize_f16() } else { val };
            }
        }
        let loss_nats = loss_acc.to_f64() / denom_positions;

        let mut grads = SequenceGrads::zeros(&self.cfg);

        // Decoder gradients and the per-position dh contribution, batched.
        crate::numerics::gemm_at_acc_into(
            grads.w_dec.data_mut(),
            &dlogits,
            cache.h.data(),
            positions,
            v,
            h,
        );
        colsum_acc_into(&mut grads.b_dec, &dlogits, positions, v);
        let mut dh_dec = vec![S::ZERO; positions * h];
        gemm_into(&mut dh_dec, &dlogits, self.work.w_dec.data(), positions, v, h);

        // Reverse sweep. dz/dmx/dmh/dx land in position-major buffers so the
        // weight gradients can run as batched transposed products afterwards.
        let mut dz = vec![S::ZERO; positions * 4 * h];
        let mut dmx = vec![S::ZERO; positions * h];
        let mut dmh = vec![S::ZERO; positions * h];
        let mut dx = vec![S::ZERO; positions * e];
        let mut dc_carry = vec![S::ZERO; batch * h];
        let mut dh_rec = vec![S::ZERO; batch * h];
        let mut dm = vec![S::ZERO; batch * h];

        for t in (0..steps).rev() {
            let row0 = t * batch;
            let z_t = &cache.z.data()[row0 * 4 * h..(row0 + batch) * 4 * h];
            let c_t = &cache.c.data()[row0 * h..(row0 + batch) * h];
            let c_prev: &[S] = if t == 0 {
                cache.c0.data()
            } else {
                &cache.c.data()[(row0 - batch) * h..row0 * h]
            };
            let dz_t = &mut dz[row0 * 4 * h..(row0 + batch) * 4 * h];
            for bi in 0..batch {
                for j in 0..h {
                    let idx = bi * h + j;
                    let zi = z_t[bi * 4 * h + j];
                    let zf = z_t[bi * 4 * h + h + j];
                    let zo = z_t[bi * 4 * h + 2 * h + j];
                    let zu = z_t[bi * 4 * h + 3 * h + j];
                    let gi = zi.sigmoid();
                    let gf = zf.sigmoid();
                    let go = zo.sigmoid();
                    let tu = zu.tanh();
                    let tc = c_t[idx].tanh();

                    let mut dh = dh_dec[row0 * h + idx] + dh_rec[idx];
                    if quant {
                        dh = dh.quantize_f16();
                    }
                    let dc = dh * go * (S::ONE - tc * tc) + dc_carry[idx];
                    let dzo = dh * tc * go * (S::ONE - go);
                    let dzi = dc * tu * gi * (S::ONE - gi);
                    let dzu = dc * gi * (S::ONE - tu * tu);
                    let dzf = dc * c_prev[idx] * gf * (S::ONE - gf);
                    dc_carry[idx] = dc * gf;
                    if quant {
                        dz_t[bi * 4 * h + j] = dzi.quantize_f16();
                        dz_t[bi * 4 * h + h + j] = dzf.quantize_f16();
                        dz_t[bi * 4 * h + 2 * h + j] = dzo.quantize_f16();
                        dz_t[bi * 4 * h + 3 * h + j] = dzu.quantize_f16();
                    } else {
                        dz_t[bi * 4 * h + j] = dzi;
                        dz_t[bi * 4 * h + h + j] = dzf;
                        dz_t[bi * 4 * h + 2 * h + j] = dzo;
                        dz_t[bi * 4 * h + 3 * h + j] = dzu;
                    }
                }
            }

            // dm = dz·W_hm, then split into the two multiplicative factors.
            gemm_into(&mut dm, dz_t, self.work.w_hm.data(), batch, 4 * h, h);
            if quant {
                quantize_slice(&mut dm);
            }
            let mx_t = &cache.mx.data()[row0 * h..(row0 + batch) * h];
            let mh_t = &cache.mh.data()[row0 * h..(row0 + batch) * h];
            let dmx_t = &mut dmx[row0 * h..(row0 + batch) * h];
            let dmh_t = &mut dmh[row0 * h..(row0 + batch) * h];
            for j in 0..batch * h {
                let a = dm[j] * mh_t[j];
                let b = dm[j] * mx_t[j];
                dmx_t[j] = if quant { a.quantize_f16() } else { a };
                dmh_t[j] = if quant { b.quantize_f16() } else { b };
            }

            // Hidden-state gradient for step t−1 (dropped at the window edge:
            // truncated BPTT detaches the incoming state).
            gemm_into(&mut dh_rec, dmh_t, self.work.w_mh.data(), batch, h, h);

            // Input gradient for this step.
            let dx_t = &mut dx[row0 * e..(row0 + batch) * e];
            gemm_into(dx_t, dz_t, self.work.w_ih.data(), batch, 4 * h, e);
            gemm_acc_into(dx_t, dmx_t, self.work.w_mx.data(), batch, h, e);
            if quant {
                quantize_slice(dx_t);
            }
        }

        // Batched weight gradients, ascending position order throughout.
        crate::numerics::gemm_at_acc_into(grads.v_ih.data_mut(), &dz, cache.x.data(), positions, 4 * h, e);
        crate::numerics::gemm_at_acc_into(grads.v_hm.data_mut(), &dz, cache.m.data(), positions, 4 * h, h);
        crate::numerics::gemm_at_acc_into(grads.v_mx.data_mut(), &dmx, cache.x.data(), positions, h, e);
        // W_mh multiplies h_{t−1}: step 0 pairs with the incoming state, the
        // rest pair with the h buffer shifted by one step.
        crate::numerics::gemm_at_acc_into(
            grads.v_mh.data_mut(),
            &dmh[..batch * h],
            cache.h0.data(),
            batch,
            h,
            h,
        );
        if steps > 1 {
            crate::numerics::gemm_at_acc_into(
                grads.v_mh.data_mut(),
                &dmh[batch * h..],
                &cache.h.data()[..(positions - batch) * h],
                positions - batch,
                h,
                h,
            );
        }
        colsum_acc_into(&mut grads.b, &dz, positions, 4 * h);
        for (p, &tok) in cache.tokens_tm.iter().enumerate() {
            let row = &mut grads.e_emb.data_mut()[tok as usize * e..(tok as usize + 1) * e];
            for (gv, &dv) in row.iter_mut().zip(&dx[p * e..(p + 1) * e]) {
                *gv += dv;
            }
        }

        // The accumulated dW of each normed matrix is a gradient on the
        // effective weight; convert to direction/gain gradients with the same
        // norms the forward build used.
        let (dv, dg) = weight_norm_chain(&grads.v_mx, &self.masters.v_mx, &self.masters.g_mx, &self.work.n_mx);
        grads.v_mx = dv;
        grads.g_mx = dg;
        let (dv, dg) = weight_norm_chain(&grads.v_mh, &self.masters.v_mh, &self.masters.g_mh, &self.work.n_mh);
        grads.v_mh = dv;
        grads.g_mh = dg;
        let (dv, dg) = weight_norm_chain(&grads.v_ih, &self.masters.v_ih, &self.masters.g_ih, &self.work.n_ih);
        grads.v_ih = dv;
        grads.g_ih = dg;
        let (dv, dg) = weight_norm_chain(&grads.v_hm, &self.masters.v_hm, &self.masters.g_hm, &self.work.n_hm);
        grads.v_hm = dv;
        grads.g_hm = dg;

        let overflow = !grads.all_finite();
        Ok(LossBackward {
            loss_nats,
            grads,
            overflow,
        })
    }
}
