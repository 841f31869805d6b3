//! Dense row-major kernels shared by every block of the network.
//!
//! Every kernel processes rows independently and accumulates in a fixed
//! order, so computing one row on its own gives bit-identical results to
//! computing it inside a larger batch. The incremental engine path relies on
//! this to match the full-prefix recomputation exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// A single-row tensor.
    pub fn row_vector(data: Vec<T>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::config(format!(
                    "ragged rows: expected {} columns, found {}",
                    cols,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<T> {
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Vertical concatenation.
    pub fn concat_rows(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.cols != b.cols {
            return Err(Error::config(format!(
                "cannot concatenate {}x{} with {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            rows: a.rows + b.rows,
            cols: a.cols,
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::config(format!(
                "broadcast vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        for r in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, &b) in r.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::ZERO, |m, v| m.max(v.abs()))
    }

    /// Column-wise mean over all rows.
    pub fn mean_rows(&self) -> Vec<T> {
        let mut out = vec![T::ZERO; self.cols];
        for r in self.data.chunks_exact(self.cols.max(1)) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let n = T::from_usize(self.rows.max(1));
        for o in &mut out {
            *o /= n;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    fn check_same(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::config(format!(
                "{op}: shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Adds `x[i..i + R] · weight` into `out`. Rows share each weight row;
/// every output still accumulates over k in order, so the result does not
/// depend on the blocking or on the vector width the loop compiles to.
fn accumulate_rows<T: Real, const R: usize>(
    x: &Tensor<T>,
    i: usize,
    weight: &Tensor<T>,
    out: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if x86::avx_available() {
        // SAFETY: the CPU and OS support AVX.
        return unsafe { x86::accumulate_rows_avx::<T, R>(x, i, weight, out) };
    }
    accumulate_rows_portable::<T, R>(x, i, weight, out)
}

#[inline(always)]
fn accumulate_rows_portable<T: Real, const R: usize>(
    x: &Tensor<T>,
    i: usize,
    weight: &Tensor<T>,
    out: &mut [T],
) {
    let n = weight.cols;
    let mut outs: [&mut [T]; R] = {
        let mut it = out.chunks_exact_mut(n);
        core::array::from_fn(|_| it.next().expect("block holds R rows"))
    };
    for k in 0..x.cols {
        let w = &weight.data[k * n..(k + 1) * n];
        let a: [T; R] = core::array::from_fn(|r| x.data[(i + r) * x.cols + k]);
        for (r, o) in outs.iter_mut().enumerate() {
            let ar = a[r];
            for (ov, &wv) in o[..n].iter_mut().zip(w) {
                *ov += ar * wv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use core::arch::x86_64::{__cpuid, _xgetbv};
    use core::sync::atomic::{AtomicU8, Ordering};

    use super::{accumulate_rows_portable, Real, Tensor};

    static AVX: AtomicU8 = AtomicU8::new(0);

    pub fn avx_available() -> bool {
        match AVX.load(Ordering::Relaxed) {
            1 => false,
            2 => true,
            _ => {
                let yes = detect();
                AVX.store(if yes { 2 } else { 1 }, Ordering::Relaxed);
                yes
            }
        }
    }

    fn detect() -> bool {
        #[allow(unused_unsafe)]
        let ecx = unsafe { __cpuid(1) }.ecx;
        let (osxsave, avx) = (ecx & (1 << 27) != 0, ecx & (1 << 28) != 0);
        // SAFETY: OSXSAVE means XGETBV is available.
        osxsave && avx && unsafe { xcr0() } & 0b110 == 0b110
    }

    #[target_feature(enable = "xsave")]
    unsafe fn xcr0() -> u64 {
        _xgetbv(0)
    }

    /// # Safety
    /// The CPU must support AVX.
    #[target_feature(enable = "avx")]
    pub unsafe fn accumulate_rows_avx<T: Real, const R: usize>(
        x: &Tensor<T>,
        i: usize,
        weight: &Tensor<T>,
        out: &mut [T],
    ) {
        accumulate_rows_portable::<T, R>(x, i, weight, out)
    }
}

/// `out[i,j] = Σ_k x[i,k]·weight[k,j] + bias[j]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    if x.cols != weight.rows || bias.len() != weight.cols {
        return Err(Error::config(format!(
            "linear: input {}x{} against weight {}x{} with bias {}",
            x.rows,
            x.cols,
            weight.rows,
            weight.cols,
            bias.len()
        )));
    }
    let n = weight.cols;
    let mut out = Vec::with_capacity(x.rows * n);
    for _ in 0..x.rows {
        out.extend_from_slice(bias);
    }
    let mut i = 0;
    let mut rest: &mut [T] = &mut out;
    while i < x.rows {
        let take = match x.rows - i {
            r if r >= 4 => 4,
            r if r >= 2 => 2,
            _ => 1,
        };
        let (block, tail) = rest.split_at_mut(take * n);
        match take {
            4 => accumulate_rows::<T, 4>(x, i, weight, block),
            2 => accumulate_rows::<T, 2>(x, i, weight, block),
            _ => accumulate_rows::<T, 1>(x, i, weight, block),
        }
        rest = tail;
        i += take;
    }
    Ok(Tensor {
        rows: x.rows,
        cols: n,
        data: out,
    })
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean and unit variance, then `gain`/`shift`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &[T], shift: &[T], eps: T) -> Result<Tensor<T>> {
    if gain.len() != x.cols || shift.len() != x.cols {
        return Err(Error::config(format!(
            "layer_norm: {} columns with gain {} / shift {}",
            x.cols,
            gain.len(),
            shift.len()
        )));
    }
    let mut out = normalize_rows(x, eps);
    for r in out.data.chunks_exact_mut(x.cols.max(1)) {
        for ((v, &g), &s) in r.iter_mut().zip(gain).zip(shift) {
            *v = *v * g + s;
        }
    }
    Ok(out)
}

/// Layer norm without the affine part, as used in front of adaLN modulation.
pub fn normalize_rows<T: Real>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut out = x.clone();
    if x.cols == 0 {
        return out;
    }
    let n = T::from_usize(x.cols);
    for r in out.data.chunks_exact_mut(x.cols) {
        let mut mean = T::ZERO;
        for &v in r.iter() {
            mean += v;
        }
        mean /= n;
        let mut var = T::ZERO;
        for &v in r.iter() {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv = T::ONE / (var + eps).sqrt();
        for v in r.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    if x.cols == 0 {
        return out;
    }
    for r in out.data.chunks_exact_mut(x.cols) {
        softmax_in_place(r);
    }
    out
}

pub fn softmax_in_place<T: Real>(r: &mut [T]) {
    let Some(&first) = r.first() else { return };
    let m = r.iter().fold(first, |m, &v| m.max(v));
    let mut sum = T::ZERO;
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in r.iter_mut() {
        *v /= sum;
    }
}

const GELU_COEFF: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_COEFF);
    let s = T::from_f64(GELU_SCALE);
    T::from_f64(0.5) * x * (T::ONE + (s * (x + c * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_COEFF);
    let s = T::from_f64(GELU_SCALE);
    let u = s * (x + c * x * x * x);
    let th = u.tanh();
    let du = s * (T::ONE + T::from_f64(3.0) * c * x * x);
    T::from_f64(0.5) * (T::ONE + th) + T::from_f64(0.5) * x * (T::ONE - th * th) * du
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x / (T::ONE + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = T::ONE / (T::ONE + (-x).exp());
    s * (T::ONE + x * (T::ONE - s))
}

/// Standard transformer sinusoidal encoding of a (possibly fractional)
/// position. The first half of the vector holds sines, the second cosines.
pub fn sinusoidal<T: Real>(position: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::ZERO; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half.max(1) as f64);
        let a = position * freq;
        out[i] = T::from_f64(libm::sin(a));
        out[half + i] = T::from_f64(libm::cos(a));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    None,
    /// Query `i` sees key `j` iff `j <= i + (keys - queries)`. Queries are
    /// aligned to the tail of the key sequence.
    Causal,
    /// Row-major `queries × keys`; `true` means the key is visible.
    Explicit {
        queries: usize,
        keys: usize,
        allowed: Vec<bool>,
    },
}

impl AttentionMask {
    fn check(&self, queries: usize, keys: usize) -> Result<()> {
        match self {
            AttentionMask::None => Ok(()),
            AttentionMask::Causal if queries > keys => Err(Error::config(format!(
                "causal mask needs a shared time axis: {queries} queries, {keys} keys"
            ))),
            AttentionMask::Causal => Ok(()),
            AttentionMask::Explicit {
                queries: q,
                keys: k,
                allowed,
            } => {
                if *q != queries || *k != keys || allowed.len() != q * k {
                    return Err(Error::config(format!(
                        "explicit mask {q}x{k} does not match attention {queries}x{keys}"
                    )));
                }
                Ok(())
            }
        }
    }

    #[inline]
    fn visible(&self, i: usize, j: usize, queries: usize, keys: usize) -> bool {
        match self {
            AttentionMask::None => true,
            AttentionMask::Causal => j + queries <= i + keys,
            AttentionMask::Explicit { allowed, .. } => allowed[i * keys + j],
        }
    }
}

/// Multi-head scaled dot-product attention on already projected tensors.
///
/// `q` is `n × heads·head_dim`, `k` and `v` are `m × heads·head_dim`. A query
/// row whose keys are all masked yields a zero output row.
pub fn attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor<T>> {
    attend_impl(q, k, v, mask, heads, None)
}

/// Same as [`attend`], also returning the per-head `n × m` weight matrices.
pub fn attend_with_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut weights = Vec::with_capacity(heads);
    let out = attend_impl(q, k, v, mask, heads, Some(&mut weights))?;
    Ok((out, weights))
}

fn attend_impl<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
    heads: usize,
    mut weights_out: Option<&mut Vec<Tensor<T>>>,
) -> Result<Tensor<T>> {
    let inner = q.cols;
    if heads == 0 || inner % heads != 0 || k.cols != inner || v.cols != inner || k.rows != v.rows {
        return Err(Error::config(format!(
            "attention: q {}x{}, k {}x{}, v {}x{}, heads {}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols, heads
        )));
    }
    let (n, m) = (q.rows, k.rows);
    mask.check(n, m)?;
    let head_dim = inner / heads;
    let scale = T::ONE / T::from_usize(head_dim).sqrt();
    let mut out = Tensor::zeros(n, inner);
    let mut scores = vec![T::ZERO; m];
    let mut visible = vec![false; m];
    for h in 0..heads {
        let off = h * head_dim;
        let mut wmat = weights_out.as_ref().map(|_| Tensor::zeros(n, m));
        for i in 0..n {
            let qi = &q.row(i)[off..off + head_dim];
            let mut max: Option<T> = None;
            for j in 0..m {
                visible[j] = mask.visible(i, j, n, m);
                if !visible[j] {
                    continue;
                }
                let kj = &k.row(j)[off..off + head_dim];
                let mut dot = T::ZERO;
                for (&a, &b) in qi.iter().zip(kj) {
                    dot += a * b;
                }
                let s = dot * scale;
                scores[j] = s;
                max = Some(max.map_or(s, |mx: T| mx.max(s)));
            }
            let Some(max) = max else { continue };
            let mut sum = T::ZERO;
            for j in 0..m {
                if visible[j] {
                    scores[j] = (scores[j] - max).exp();
                    sum += scores[j];
                }
            }
            let orow = &mut out.row_mut(i)[off..off + head_dim];
            for j in 0..m {
                if !visible[j] {
                    continue;
                }
                let w = scores[j] / sum;
                if let Some(wm) = wmat.as_mut() {
                    wm.set(i, j, w);
                }
                let vj = &v.row(j)[off..off + head_dim];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += w * vv;
                }
            }
        }
        if let (Some(ws), Some(wm)) = (weights_out.as_mut(), wmat) {
            ws.push(wm);
        }
    }
    Ok(out)
}

/// A dense layer `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::config(format!(
                "linear bias {} against weight {}x{}",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros(inputs, outputs),
            bias: vec![T::ZERO; outputs],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, &self.bias)
    }

    pub fn forward_vec(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(&Tensor::row_vector(x.to_vec()))?.into_data())
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T = f32> {
    pub gain: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: vec![T::ONE; dim],
            shift: vec![T::ZERO; dim],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gain, &self.shift, T::from_f64(LN_EPS))
    }
}

/// Linear → GELU → linear.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(x)?.map(gelu);
        self.fc2.forward(&h)
    }
}

/// Projection-wrapped multi-head attention: `heads` heads of `head_dim`
/// each, concatenated and projected back to the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

impl<T: Real> Attention<T> {
    pub fn forward(
        &self,
        q_in: &Tensor<T>,
        kv_in: &Tensor<T>,
        mask: &AttentionMask,
    ) -> Result<Tensor<T>> {
        let q = self.q.forward(q_in)?;
        let k = self.k.forward(kv_in)?;
        let v = self.v.forward(kv_in)?;
        self.o.forward(&attend(&q, &k, &v, mask, self.heads)?)
    }

    pub fn forward_with_weights(
        &self,
        q_in: &Tensor<T>,
        kv_in: &Tensor<T>,
        mask: &AttentionMask,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let q = self.q.forward(q_in)?;
        let k = self.k.forward(kv_in)?;
        let v = self.v.forward(kv_in)?;
        let (a, w) = attend_with_weights(&q, &k, &v, mask, self.heads)?;
        Ok((self.o.forward(&a)?, w))
    }
}

/// Splits a modulation row into `parts` equal slices.
pub fn split_chunks<T: Copy>(v: &[T], parts: usize) -> Vec<&[T]> {
    let n = v.len() / parts;
    (0..parts).map(|i| &v[i * n..(i + 1) * n]).collect()
}

/// `norm(x)·(1 + scale) + shift`, applied per row with broadcast vectors.
pub fn modulate<T: Real>(normed: &Tensor<T>, shift: &[T], scale: &[T]) -> Tensor<T> {
    let mut out = normed.clone();
    let cols = normed.cols().max(1);
    for r in out.data_mut().chunks_exact_mut(cols) {
        for ((v, &sh), &sc) in r.iter_mut().zip(shift).zip(scale) {
            *v = *v * (T::ONE + sc) + sh;
        }
    }
    out
}

/// `x += gate ⊙ y`, gate broadcast over rows.
pub fn gated_residual<T: Real>(x: &mut Tensor<T>, gate: &[T], y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() || gate.len() != x.cols() {
        return Err(Error::config(format!(
            "gated residual: {:?} vs {:?} with gate {}",
            x.shape(),
            y.shape(),
            gate.len()
        )));
    }
    let cols = x.cols().max(1);
    for (xr, yr) in x
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(y.data().chunks_exact(cols))
    {
        for ((a, &b), &g) in xr.iter_mut().zip(yr).zip(gate) {
            *a += g * b;
        }
    }
    Ok(())
}

/// adaLN-zero modulated residual: `x + gate ⊙ f(norm(x)·(1+scale) + shift)`,
/// with `(shift, scale, gate)` projected from a conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnModulation<T = f32> {
    /// `cond_dim → 3·dim`, laid out as shift, scale, gate.
    pub proj: Linear<T>,
}

impl<T: Real> AdaLnModulation<T> {
    pub fn forward(
        &self,
        x: &Tensor<T>,
        cond: &[T],
        f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if cond.len() != self.proj.inputs() {
            return Err(Error::config(format!(
                "adaLN condition of length {} for projection expecting {}",
                cond.len(),
                self.proj.inputs()
            )));
        }
        if self.proj.outputs() != 3 * x.cols() {
            return Err(Error::config(format!(
                "adaLN projection yields {} values for width {}",
                self.proj.outputs(),
                x.cols()
            )));
        }
        let act: Vec<T> = cond.iter().map(|&c| silu(c)).collect();
        let m = self.proj.forward_vec(&act)?;
        let p = split_chunks(&m, 3);
        let h = modulate(&normalize_rows(x, T::from_f64(LN_EPS)), p[0], p[1]);
        let y = f(&h)?;
        let mut out = x.clone();
        gated_residual(&mut out, p[2], &y)?;
        Ok(out)
    }
}
