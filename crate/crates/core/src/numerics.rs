//! Mixed-precision arithmetic contract: scalar abstraction, quantization,
//! and the fixed-order matrix kernels.
//!
//! Two rules make every result reproducible down to the bit:
//!
//! * every accumulation runs in the wide type (f32 here, f64 in the test
//!   instantiation) in a fixed documented order -- ascending inner index for
//!   the gemm kernels, left-to-right for [`reduce_f32`];
//! * binary16 storage is emulated by rounding values through [`Half`] at
//!   the documented boundaries, never by changing the accumulation type.
//!
//! Parallel variants split work by output row only; each output element is
//! still produced by one thread in the same order, so thread count never
//! changes a single bit of the result.

use crate::error::{Error, Result};
use crate::fastmath;
use crate::half::round_through_f16;
use crate::tensor::{TensorF16, TensorF32};
use rayon::prelude::*;

/// Arithmetic mode of a model instance.
///
/// `Mixed` stores weights and boundary activations in binary16 and
/// accumulates in f32; `Fp32` runs the identical code with quantization
/// disabled, which is the reference arm for parity experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Mixed,
    Fp32,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Precision> {
        match s {
            "mixed" => Ok(Precision::Mixed),
            "fp32" => Ok(Precision::Fp32),
            other => Err(Error::Config(format!(
                "unknown precision {other:?}; expected \"mixed\" or \"fp32\""
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Mixed => "mixed",
            Precision::Fp32 => "fp32",
        }
    }
}

/// Element type of the model math: f32 in production, f64 for oracle tests
/// (gradient checks need headroom far below f32 rounding noise).
pub trait Scalar:
    Copy
    + Default
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Whether binary16 emulation is available for this type.
    const HALF_CAPABLE: bool;

    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn log2(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite_s(self) -> bool;
    /// Round through binary16 storage. Panics for types without emulation.
    fn quantize_f16(self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const HALF_CAPABLE: bool = true;

    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn exp(self) -> Self {
        fastmath::exp_f32(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        fastmath::ln_f32(self)
    }
    #[inline(always)]
    fn log2(self) -> Self {
        fastmath::log2_f32(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        fastmath::tanh_f32(self)
    }
    #[inline(always)]
    fn sigmoid(self) -> Self {
        fastmath::sigmoid_f32(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline(always)]
    fn is_finite_s(self) -> bool {
        self.is_finite()
    }
    #[inline(always)]
    fn quantize_f16(self) -> Self {
        round_through_f16(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const HALF_CAPABLE: bool = false;

    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn log2(self) -> Self {
        f64::log2(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + f64::exp(-self))
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite_s(self) -> bool {
        self.is_finite()
    }
    fn quantize_f16(self) -> Self {
        panic!("binary16 emulation runs on the f32 instantiation only")
    }
}

/// Round every element through binary16 storage in place.
#[inline]
pub fn quantize_slice<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        *x = x.quantize_f16();
    }
}

/// Left-to-right f32 sum; the fixed order is part of the reproducibility
/// contract. Errors on empty input.
pub fn reduce_f32(xs: &[f32]) -> Result<f32> {
    if xs.is_empty() {
        return Err(Error::Contract {
            op: "reduce_f32",
            detail: "empty input".into(),
        });
    }
    Ok(xs.iter().fold(0.0f32, |acc, &x| acc + x))
}

/// Work size (in multiply-adds) above which the row-parallel kernels split
/// across threads. Small products in tests and the recurrent cell stay
/// serial; the batched sequence-level products go wide.
const PAR_GRAIN: usize = 1 << 18;

#[inline(always)]
fn gemm_row<T: Scalar>(crow: &mut [T], arow: &[T], b: &[T], n: usize, accumulate: bool) {
    if !accumulate {
        crow.fill(T::ZERO);
    }
    // c[i][j] = sum over k ascending of a[i][k] * b[k][j]: the per-element
    // order is the contract; the j-lanes are independent, which is what lets
    // the compiler vectorize the inner loop without reassociating anything.
    // Four k-steps are peeled per pass purely to cut load/store traffic on
    // the c row; the chain per element keeps the exact same add order, so
    // results are bit-identical to the one-step loop.
    let k4 = arow.len() & !3;
    let mut kk = 0;
    while kk < k4 {
        let a0 = arow[kk];
        let a1 = arow[kk + 1];
        let a2 = arow[kk + 2];
        let a3 = arow[kk + 3];
        let b0 = &b[kk * n..kk * n + n];
        let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
        let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
        let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
        for ((((cv, v0), v1), v2), v3) in
            crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
        {
            let mut t = *cv;
            t = t + a0 * *v0;
            t = t + a1 * *v1;
            t = t + a2 * *v2;
            t = t + a3 * *v3;
            *cv = t;
        }
        kk += 4;
    }
    for kk in k4..arow.len() {
        let av = arow[kk];
        let brow = &b[kk * n..kk * n + n];
        for (cv, bv) in crow.iter_mut().zip(brow) {
            *cv = *cv + av * *bv;
        }
    }
}

/// C = A * B with A of shape [m, k], B of shape [k, n], all row-major.
pub fn gemm_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_GRAIN && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| gemm_row(crow, arow, b, n, false));
    } else {
        for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            gemm_row(crow, arow, b, n, false);
        }
    }
}

/// C += A * B, same shapes as [`gemm_into`].
pub fn gemm_acc_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_GRAIN && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| gemm_row(crow, arow, b, n, true));
    } else {
        for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            gemm_row(crow, arow, b, n, true);
        }
    }
}

/// C += A^T * B where A is [r, p] and B is [r, q]; C is [p, q]. Row r is the
/// accumulation index and runs ascending for every output element. This is
/// the weight-gradient kernel: rows are sequence positions.
///
/// Rows are processed in tiles so the B tile stays cache-resident while all
/// of C sweeps over it. Tiles run in ascending row order and each output
/// element accumulates its rows ascending within and across tiles, so tiling
/// never changes a bit of the result.
pub fn gemm_at_acc_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], r: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), r * p);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(c.len(), p * q);
    const R_TILE: usize = 192;
    let mut r0 = 0;
    while r0 < r {
        let r1 = (r0 + R_TILE).min(r);
        let body = |(pi, crow): (usize, &mut [T])| {
            let tile = r1 - r0;
            let t4 = tile & !3;
            let mut ri = 0;
            while ri < t4 {
                let row = r0 + ri;
                let a0 = a[row * p + pi];
                let a1 = a[(row + 1) * p + pi];
                let a2 = a[(row + 2) * p + pi];
                let a3 = a[(row + 3) * p + pi];
                let b0 = &b[row * q..row * q + q];
                let b1 = &b[(row + 1) * q..(row + 1) * q + q];
                let b2 = &b[(row + 2) * q..(row + 2) * q + q];
                let b3 = &b[(row + 3) * q..(row + 3) * q + q];
                for ((((cv, v0), v1), v2), v3) in
                    crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
                {
                    let mut t = *cv;
                    t = t + a0 * *v0;
                    t = t + a1 * *v1;
                    t = t + a2 * *v2;
                    t = t + a3 * *v3;
                    *cv = t;
                }
                ri += 4;
            }
            for ri in t4..tile {
                let row = r0 + ri;
                let av = a[row * p + pi];
                let brow = &b[row * q..row * q + q];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * *bv;
                }
            }
        };
        if (r1 - r0) * p * q >= PAR_GRAIN && p > 1 {
            c.par_chunks_mut(q).enumerate().for_each(body);
        } else {
            c.chunks_exact_mut(q).enumerate().for_each(body);
        }
        r0 = r1;
    }
}

/// acc[j] += sum over rows (ascending) of a[row, j].
pub fn colsum_acc_into<T: Scalar>(acc: &mut [T], a: &[T], rows: usize, n: usize) {
    debug_assert_eq!(a.len(), rows * n);
    debug_assert_eq!(acc.len(), n);
    for row in a.chunks_exact(n) {
        for (av, bv) in acc.iter_mut().zip(row) {
            *av = *av + *bv;
        }
    }
}

/// Dot product with ascending-index f32-style accumulation in T.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Sum of squares with ascending-index accumulation.
pub fn sum_squares<T: Scalar>(a: &[T]) -> T {
    let mut acc = T::ZERO;
    for x in a {
        acc += *x * *x;
    }
    acc
}

/// Matrix product of two binary16 tensors with f32 accumulation.
///
/// Each product term multiplies the exact f32-widened operands; partial sums
/// stay in f32 throughout (ascending-k order). This is the software model of
/// a tensor-core style FP16-multiply / FP32-accumulate unit.
pub fn gemm_mixed(a: &TensorF16, b: &TensorF16) -> Result<TensorF32> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "gemm_mixed",
            detail: format!("need rank-2 inputs, got {:?} and {:?}", a.dims(), b.dims()),
        });
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "gemm_mixed",
            detail: format!("inner dims differ: [{m}, {k}] x [{k2}, {n}]"),
        });
    }
    let aw = a.widen();
    let bw = b.widen();
    let mut c = TensorF32::zeros(&[m, n]);
    gemm_into(c.data_mut(), aw.data(), bw.data(), m, k, n);
    Ok(c)
}
