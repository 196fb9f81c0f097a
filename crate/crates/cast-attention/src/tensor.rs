//! Minimal dense tensor substrate.
//!
//! Row-major contiguous buffers of f32 or f64, no strided views, batch
//! broadcasting only over leading dimensions of `matmul`. Every constructor
//! funnels through [`Tensor::from_vec`] so the allocation meter sees all
//! tensor memory. Primitives detect non-finite outputs instead of silently
//! propagating them.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{CastError, Result};
use crate::meter;

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps matmul worker threads; 0 or 1 means single-threaded (the default).
/// Benchmarks rely on the single-threaded default for fair comparisons.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Element type for tensors: f32 for forward/bench, f64 for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
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
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn abs(self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln_1p(self) -> Self {
        f32::ln_1p(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

/// Dense row-major tensor. Immutable after construction.
#[derive(Debug)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        // Goes through from_vec so the clone's buffer is metered too.
        Tensor::from_vec(self.shape.clone(), self.data.clone())
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        meter::release(self.data.len());
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64() == b.to_f64())
    }
}

impl<T: Scalar> Tensor<T> {
    /// Wraps a buffer; panics if the length does not match the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} vs buffer length {}", shape, data.len());
        meter::register(data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![T::ZERO; n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same buffer under a new shape with an equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CastError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor::from_vec(shape.to_vec(), self.data.clone()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_val())
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CastError::NonFinite(ctx.to_string()))
        }
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|v| v.to_f64()).collect())
    }

    pub fn from_f64_tensor(src: &Tensor<f64>) -> Self {
        Tensor::from_vec(
            src.shape.to_vec(),
            src.data().iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Indices produced by top-k / argsort; not differentiable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTensor {
    pub shape: Vec<usize>,
    pub data: Vec<usize>,
}

// ---------------------------------------------------------------------------
// shape helpers

/// Splits `[..., m, n]` into (batch product, m, n).
fn mat_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(CastError::Shape(format!("expected rank >= 2, got {:?}", shape)));
    }
    let n = shape[shape.len() - 1];
    let m = shape[shape.len() - 2];
    let batch = shape[..shape.len() - 2].iter().product();
    Ok((batch, m, n))
}

// ---------------------------------------------------------------------------
// primitive kernels (forward only; the tape wires adjoints on top of these)

/// Batched matrix product. Leading batch dims must be equal, or one operand
/// may be a plain matrix broadcast across the other's batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, ka) = mat_dims(a.shape())?;
    let (bb, kb, n) = mat_dims(b.shape())?;
    if ka != kb {
        return Err(CastError::Shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let a_batched = a.rank() > 2;
    let b_batched = b.rank() > 2;
    let (batch, out_lead) = match (a_batched, b_batched) {
        (true, true) => {
            if a.shape()[..a.rank() - 2] != b.shape()[..b.rank() - 2] {
                return Err(CastError::Shape(format!(
                    "matmul batch extents differ: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            (ba, a.shape()[..a.rank() - 2].to_vec())
        }
        (true, false) => (ba, a.shape()[..a.rank() - 2].to_vec()),
        (false, true) => (bb, b.shape()[..b.rank() - 2].to_vec()),
        (false, false) => (1, vec![]),
    };
    let k = ka;
    let mut out = vec![T::ZERO; batch * m * n];
    let nt = threads();
    let total_rows = batch * m;
    if nt > 1 && total_rows >= 2 * nt && total_rows * k * n >= 1 << 16 {
        let chunk = total_rows.div_ceil(nt);
        std::thread::scope(|s| {
            for (ci, od) in out.chunks_mut(chunk * n).enumerate() {
                let r0 = ci * chunk;
                s.spawn(move || {
                    for (ri, orow) in od.chunks_mut(n).enumerate() {
                        let r = r0 + ri;
                        let (p, i) = (r / m, r % m);
                        let a_off = if a_batched { p * m * k } else { 0 };
                        let b_off = if b_batched { p * k * n } else { 0 };
                        let arow = &a.data()[a_off + i * k..a_off + (i + 1) * k];
                        let bd = &b.data()[b_off..b_off + k * n];
                        for (kk, &av) in arow.iter().enumerate() {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                                *ov += av * bv;
                            }
                        }
                    }
                });
            }
        });
        let mut shape = out_lead;
        shape.push(m);
        shape.push(n);
        let t = Tensor::from_vec(shape, out);
        t.check_finite("matmul")?;
        return Ok(t);
    }
    for p in 0..batch {
        let ab = if a_batched || !b_batched { p } else { 0 };
        let bb_idx = if b_batched || !a_batched { p } else { 0 };
        let a_off = if a_batched { ab * m * k } else { 0 };
        let b_off = if b_batched { bb_idx * k * n } else { 0 };
        let o_off = p * m * n;
        let ad = &a.data()[a_off..a_off + m * k];
        let bd = &b.data()[b_off..b_off + k * n];
        let od = &mut out[o_off..o_off + m * n];
        // i-k-j order: the inner loop walks both b and out contiguously.
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut od[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *ov += av * bv;
                }
            }
        }
    }
    let mut shape = out_lead;
    shape.push(m);
    shape.push(n);
    let t = Tensor::from_vec(shape, out);
    t.check_finite("matmul")?;
    Ok(t)
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, n) = mat_dims(a.shape())?;
    let mut out = vec![T::ZERO; a.len()];
    for p in 0..batch {
        let src = &a.data()[p * m * n..(p + 1) * m * n];
        let dst = &mut out[p * m * n..(p + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_vec(shape, out))
}

/// Iterates a tensor as (outer, axis_len, inner) slices for axis-wise ops.
fn axis_dims(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(CastError::Shape(format!("axis {} out of range for {:?}", axis, shape)));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Numerically stable softmax along `axis` (max subtraction per slice).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    x.check_finite("softmax input")?;
    let (outer, len, inner) = axis_dims(x.shape(), axis)?;
    if len == 0 {
        return Err(CastError::Shape("softmax over empty axis".into()));
    }
    let mut out = vec![T::ZERO; x.len()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = data[base];
            for j in 1..len {
                let v = data[base + j * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::ZERO;
            for j in 0..len {
                let e = (data[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / sum;
            }
        }
    }
    let t = Tensor::from_vec(x.shape().to_vec(), out);
    t.check_finite("softmax")?;
    Ok(t)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn softplus_scalar<T: Scalar>(v: T) -> T {
    if v.to_f64() > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("sigmoid input")?;
    Ok(x.map(sigmoid_scalar))
}

/// phi(x) = softplus(x) + 1; >= 1 everywhere, 1 + ln 2 at zero.
pub fn softplus_plus_one<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("softplus_plus_one input")?;
    Ok(x.map(|v| softplus_scalar(v) + T::ONE))
}

pub const LAPLACE_MU: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// sigma = sqrt(1 / (4 pi)).
pub fn laplace_sigma() -> f64 {
    (1.0 / (4.0 * std::f64::consts::PI)).sqrt()
}

/// Laplace attention function: 0.5 (1 + erf((x - mu) / (sigma sqrt 2))).
pub fn laplace_attn<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("laplace input")?;
    let sigma = laplace_sigma();
    Ok(x.map(|v| {
        let u = (v.to_f64() - LAPLACE_MU) / (sigma * std::f64::consts::SQRT_2);
        T::from_f64(0.5 * (1.0 + statrs::function::erf::erf(u)))
    }))
}

/// Derivative of the Laplace attention function.
pub fn laplace_attn_grad<T: Scalar>(x: T) -> T {
    let sigma = laplace_sigma();
    let u = (x.to_f64() - LAPLACE_MU) / (sigma * std::f64::consts::SQRT_2);
    T::from_f64((-u * u).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
}

/// Normalization applied to attention scores: row-stochastic softmax or the
/// unnormalized Laplace function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionFn {
    Softmax,
    Laplace,
}

impl std::fmt::Display for AttentionFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionFn::Softmax => write!(f, "softmax"),
            AttentionFn::Laplace => write!(f, "laplace"),
        }
    }
}

/// Applies the chosen attention function along `axis` (the axis is ignored by
/// the elementwise Laplace function).
pub fn attn<T: Scalar>(x: &Tensor<T>, axis: usize, f: AttentionFn) -> Result<Tensor<T>> {
    match f {
        AttentionFn::Softmax => softmax(x, axis),
        AttentionFn::Laplace => laplace_attn(x),
    }
}

/// Orders `[i, j]` by descending value, ties broken toward the lower index.
pub fn desc_order<T: Scalar>(a: T, i: usize, b: T, j: usize) -> std::cmp::Ordering {
    b.partial_cmp(&a)
        .expect("non-finite value in ordering")
        .then(i.cmp(&j))
}

/// Indices of the k largest entries along `axis`, descending, ties to lowest
/// index. Deterministic on identical input. Uses partial selection, so this
/// is O(len + k log k) per slice rather than a full sort.
pub fn topk_indices<T: Scalar>(x: &Tensor<T>, k: usize, axis: usize) -> Result<IndexTensor> {
    x.check_finite("topk input")?;
    let (outer, len, inner) = axis_dims(x.shape(), axis)?;
    if k > len {
        return Err(CastError::Shape(format!("topk k={} exceeds axis extent {}", k, len)));
    }
    let data = x.data();
    let mut shape = x.shape().to_vec();
    shape[axis] = k;
    let mut out = vec![0usize; outer * k * inner];
    if k == 0 {
        return Ok(IndexTensor { shape, data: out });
    }
    let mut idx: Vec<usize> = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            idx.clear();
            idx.extend(0..len);
            let cmp =
                |&p: &usize, &q: &usize| desc_order(data[base + p * inner], p, data[base + q * inner], q);
            if k < len {
                idx.select_nth_unstable_by(k - 1, cmp);
            }
            idx[..k].sort_by(cmp);
            for (j, &p) in idx[..k].iter().enumerate() {
                out[(o * k + j) * inner + i] = p;
            }
        }
    }
    Ok(IndexTensor { shape, data: out })
}

/// Full descending argsort along `axis`, ties to lowest index.
pub fn argsort_desc<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<IndexTensor> {
    x.check_finite("argsort input")?;
    let (outer, len, inner) = axis_dims(x.shape(), axis)?;
    let data = x.data();
    let mut out = vec![0usize; x.len()];
    let mut idx: Vec<usize> = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            idx.clear();
            idx.extend(0..len);
            idx.sort_by(|&p, &q| desc_order(data[base + p * inner], p, data[base + q * inner], q));
            for (j, &p) in idx.iter().enumerate() {
                out[base + j * inner] = p;
            }
        }
    }
    Ok(IndexTensor { shape: x.shape().to_vec(), data: out })
}

/// Copies rows of `x` (axis 0) selected by `idx`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(CastError::Shape("gather_rows on rank-0 tensor".into()));
    }
    let n = x.shape()[0];
    let row: usize = x.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(CastError::Index(format!("gather row {} out of {}", i, n)));
        }
        out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&x.shape()[1..]);
    Ok(Tensor::from_vec(shape, out))
}

/// Sums rows of `src` into a fresh `[target_len, ...]` tensor at positions
/// `idx`; duplicate targets accumulate.
pub fn scatter_add_rows<T: Scalar>(
    src: &Tensor<T>,
    idx: &[usize],
    target_len: usize,
) -> Result<Tensor<T>> {
    if src.rank() == 0 || src.shape()[0] != idx.len() {
        return Err(CastError::Shape(format!(
            "scatter_add: {} indices vs source shape {:?}",
            idx.len(),
            src.shape()
        )));
    }
    let row: usize = src.shape()[1..].iter().product();
    let mut out = vec![T::ZERO; target_len * row];
    for (s, &i) in idx.iter().enumerate() {
        if i >= target_len {
            return Err(CastError::Index(format!("scatter row {} out of {}", i, target_len)));
        }
        let srow = &src.data()[s * row..(s + 1) * row];
        let drow = &mut out[i * row..(i + 1) * row];
        for (d, &v) in drow.iter_mut().zip(srow.iter()) {
            *d += v;
        }
    }
    let mut shape = vec![target_len];
    shape.extend_from_slice(&src.shape()[1..]);
    Ok(Tensor::from_vec(shape, out))
}

/// Elementwise binary op on identically shaped tensors.
pub fn zip_map<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(CastError::Shape(format!(
            "elementwise op on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let i = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let b = t64(&[2, 1], &[3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.gen::<f64>()).collect());
        let b = Tensor::from_vec(vec![4, 2], (0..8).map(|_| rng.gen::<f64>()).collect());
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                let got = c.data()[i * 2 + j];
                assert!((got - s).abs() <= 1e-6 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t64(&[2, 3], &[0.0; 6]);
        let b = t64(&[2, 2], &[0.0; 4]);
        assert!(matches!(matmul(&a, &b), Err(CastError::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let x = t64(&[3], &[0.0, 0.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = t64(&[2], &[1000.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!(y.data()[1] < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(vec![4, 3], (0..12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
        let y = softmax(&x, 1).unwrap();
        for r in 0..4 {
            let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let x = Tensor::<f64>::zeros(&[2, 0]);
        assert!(softmax(&x, 1).is_err());
    }

    #[test]
    fn sigmoid_and_softplus_identities() {
        let x = t64(&[1], &[0.0]);
        assert!((sigmoid(&x).unwrap().data()[0] - 0.5).abs() < 1e-12);
        let p = softplus_plus_one(&x).unwrap();
        assert!((p.data()[0] - (1.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        let hi = t64(&[1], &[30.0]);
        assert!((softplus_plus_one(&hi).unwrap().data()[0] - 31.0).abs() < 1e-6);
    }

    #[test]
    fn topk_basic_and_ties() {
        let x = t64(&[3], &[0.1, 0.9, 0.5]);
        assert_eq!(topk_indices(&x, 2, 0).unwrap().data, vec![1, 2]);
        let x = t64(&[3], &[0.5, 0.5, 0.5]);
        assert_eq!(topk_indices(&x, 2, 0).unwrap().data, vec![0, 1]);
        assert!(topk_indices(&x, 4, 0).is_err());
    }

    #[test]
    fn topk_matches_full_sort_prefix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(vec![100], (0..100).map(|_| rng.gen::<f64>()).collect());
        let top = topk_indices(&x, 10, 0).unwrap();
        let mut sorted: Vec<f64> = x.data().to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for j in 0..10 {
            assert_eq!(x.data()[top.data[j]], sorted[j]);
        }
        // determinism
        assert_eq!(top, topk_indices(&x, 10, 0).unwrap());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let x = t64(&[2, 1], &[10.0, 20.0]);
        let g = gather_rows(&x, &[1, 0]).unwrap();
        assert_eq!(g.data(), &[20.0, 10.0]);
        let s = scatter_add_rows(&t64(&[2, 1], &[1.0, 2.0]), &[0, 0], 2).unwrap();
        assert_eq!(s.data(), &[3.0, 0.0]);
        assert!(gather_rows(&x, &[2]).is_err());
    }

    #[test]
    fn gather_scatter_bijection_is_identity() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(vec![16, 3], (0..48).map(|_| rng.gen::<f64>()).collect());
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let g = gather_rows(&x, &perm).unwrap();
        let back = scatter_add_rows(&g, &perm, 16).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn laplace_is_half_at_mu() {
        let x = t64(&[1], &[LAPLACE_MU]);
        let y = laplace_attn(&x).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }
}
