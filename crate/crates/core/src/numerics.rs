//! Dense tensor primitives shared by every layer.
//!
//! Values are held widened to `f64` and rounded to the tensor's [`Precision`]
//! on every write, so an `F32` tensor only ever contains `f32`-representable
//! values and a `Bf16Emu` tensor only bfloat16-representable ones. Reductions
//! accumulate in `f64` before the final rounding.

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_RMS_EPS: f64 = 1e-5;

/// Element precision of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
    /// 32-bit storage with the mantissa rounded to bfloat16 width
    /// (round-to-nearest-even) after every write.
    Bf16Emu,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
            Precision::Bf16Emu => round_bf16(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
            Precision::Bf16Emu => "bf16emu",
        }
    }
}

/// Round to the nearest bfloat16 value (ties to even), going through `f32`.
pub fn round_bf16(x: f64) -> f64 {
    let f = x as f32;
    if f.is_nan() {
        return f as f64;
    }
    let bits = f.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
    f32::from_bits(rounded) as f64
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "dimension {pos} of shape {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| precision.round(v)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
            precision,
        })
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![precision.round(value); n],
            precision,
        })
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Result<Self> {
        Self::full(shape, 0.0, precision)
    }

    pub fn ones(shape: &[usize], precision: Precision) -> Result<Self> {
        Self::full(shape, 1.0, precision)
    }

    pub fn identity(n: usize, precision: Precision) -> Result<Self> {
        let mut t = Self::zeros(&[n, n], precision)?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn from_fn(
        shape: &[usize],
        precision: Precision,
        mut f: impl FnMut(usize) -> f64,
    ) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|i| precision.round(f(i))).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
            precision,
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        precision: Precision,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(shape, precision, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of last-dimension vectors.
    pub fn n_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.last_dim())
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for dimension of size {d}");
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = self.precision.round(value);
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| precision.round(v)).collect(),
            precision,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(Error::shape(format!(
                "outer slice {start}..{end} invalid for shape {:?}",
                self.shape
            )));
        }
        let stride = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
            precision: self.precision,
        })
    }

    /// Concatenate along the first axis.
    pub fn concat_outer(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let mut shape = first.shape.clone();
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] || p.precision != first.precision {
                return Err(Error::shape(format!(
                    "cannot concat {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape,
            data,
            precision: first.precision,
        })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose2 needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
            precision: self.precision,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| self.precision.round(f(v))).collect(),
            precision: self.precision,
        }
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        same_precision(self, other, what)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| self.precision.round(f(a, b)))
                .collect(),
            precision: self.precision,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; shapes must agree, precisions may differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "compare {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(max_abs_diff(&self.data, &other.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff length mismatch");
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn same_precision(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.precision != b.precision {
        return Err(Error::Precision(format!(
            "{what}: {} vs {}",
            a.precision.name(),
            b.precision.name()
        )));
    }
    Ok(())
}

/// `out[m×n] = a[m×k] · b[k×n]` over raw row-major slices, accumulating in f64
/// and rounding each output once.
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    precision: Precision,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        for o in orow.iter_mut() {
            *o = precision.round(*o);
        }
    }
    out
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    same_precision(a, b, "matmul")?;
    Ok(Tensor {
        shape: vec![m, n],
        data: gemm(&a.data, &b.data, m, k, n, a.precision),
        precision: a.precision,
    })
}

/// Treats every last-dim vector of `x[...×d_in]` as a row and multiplies by `w[d_in×d_out]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d_in = x.last_dim();
    let rows = x.n_rows();
    let flat = x.reshape(&[rows, d_in])?;
    let y = matmul(&flat, w)?;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = w.shape[1];
    y.reshape(&shape)
}

pub(crate) fn rmsnorm_row(x: &[f64], gain: &[f64], eps: f64, precision: Precision, out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = precision.round(v * inv * g);
    }
}

/// RMS normalization over the last dimension: `x / sqrt(mean(x²) + eps) ⊙ gain`.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("rmsnorm eps must be positive, got {eps}")));
    }
    let d = x.last_dim();
    if gain.shape != [d] {
        return Err(Error::shape(format!(
            "rmsnorm gain {:?} does not match last dim {d}",
            gain.shape
        )));
    }
    same_precision(x, gain, "rmsnorm")?;
    let mut data = vec![0.0; x.data.len()];
    for (xr, or) in x.data.chunks(d).zip(data.chunks_mut(d)) {
        rmsnorm_row(xr, &gain.data, eps, x.precision, or);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
        precision: x.precision,
    })
}

/// RMS norm with learned gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub gain: Tensor,
    pub eps: f64,
}

impl RmsNorm {
    pub fn ones(dim: usize, eps: f64, precision: Precision) -> Result<Self> {
        Ok(Self {
            gain: Tensor::ones(&[dim], precision)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        rmsnorm(x, &self.gain, self.eps)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // fully masked row carries no mass
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax over the last dimension. `-inf` entries receive zero weight.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut data = x.data.clone();
    for row in data.chunks_mut(d) {
        softmax_in_place(row);
        for v in row.iter_mut() {
            *v = x.precision.round(*v);
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
        precision: x.precision,
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Lower-triangular decay table `L[i][j] = exp(Σ_{k=j+1..=i} log_alpha[k])`.
///
/// Each column's segment sums are accumulated directly in log space, so entries
/// far below the diagonal do not suffer the cancellation of a global cumsum
/// difference.
pub fn decay_matrix(log_alpha: &Tensor) -> Result<Tensor> {
    if log_alpha.rank() != 1 {
        return Err(Error::shape(format!(
            "decay_matrix expects a vector, got {:?}",
            log_alpha.shape
        )));
    }
    let data = decay_table(&log_alpha.data, log_alpha.precision)?;
    let t = log_alpha.len();
    Ok(Tensor {
        shape: vec![t, t],
        data,
        precision: log_alpha.precision,
    })
}

pub(crate) fn decay_table(log_alpha: &[f64], precision: Precision) -> Result<Vec<f64>> {
    if let Some((i, v)) = log_alpha
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v > 0.0)
    {
        return Err(Error::Domain(format!(
            "log decay at {i} must be finite and <= 0, got {v}"
        )));
    }
    let t = log_alpha.len();
    let mut out = vec![0.0; t * t];
    for j in 0..t {
        out[j * t + j] = 1.0;
        let mut seg = 0.0;
        for i in j + 1..t {
            seg += log_alpha[i];
            out[i * t + j] = precision.round(seg.exp());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]], p: Precision) -> Tensor {
        let n = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), n], data, p).unwrap()
    }

    #[test]
    fn identity_times_x_is_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        let i = Tensor::identity(3, Precision::F32).unwrap();
        assert_eq!(matmul(&i, &x).unwrap(), x);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]], Precision::F64);
        let b = t2(&[&[0.0], &[1.0]], Precision::F64);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes_and_mixed_precision() {
        let a = Tensor::zeros(&[2, 3], Precision::F32).unwrap();
        let b = Tensor::zeros(&[2, 3], Precision::F32).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
        let c = Tensor::zeros(&[3, 2], Precision::F64).unwrap();
        assert!(matches!(matmul(&a, &c), Err(Error::Precision(_))));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = Tensor::rand_uniform(&[8, 8], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
            let b = Tensor::rand_uniform(&[8, 8], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
            let fast = matmul(&a, &b).unwrap();
            let slow = oracle::matmul_triple_loop(a.data(), b.data(), 8, 8, 8);
            assert!(max_abs_diff(fast.data(), &slow) <= 1e-5);
        }
    }

    #[test]
    fn matmul_transpose_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform(&[8, 8], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        let b = Tensor::rand_uniform(&[8, 8], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        let lhs = matmul(&a, &b).unwrap().transpose2().unwrap();
        let rhs = matmul(&b.transpose2().unwrap(), &a.transpose2().unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
    }

    #[test]
    fn rmsnorm_unit_and_zero_inputs() {
        let ones = Tensor::ones(&[6], Precision::F64).unwrap();
        let y = rmsnorm(&ones, &ones, 1e-12).unwrap();
        assert!(max_abs_diff(y.data(), &[1.0; 6]) < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gain = Tensor::rand_uniform(&[6], 0.5, 2.0, Precision::F64, &mut rng).unwrap();
        let zeros = Tensor::zeros(&[2, 6], Precision::F64).unwrap();
        assert_eq!(rmsnorm(&zeros, &gain, 1e-5).unwrap(), zeros);
    }

    #[test]
    fn rmsnorm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[4, 16], -3.0, 3.0, Precision::F64, &mut rng).unwrap();
        let g = Tensor::rand_uniform(&[16], 0.5, 1.5, Precision::F64, &mut rng).unwrap();
        let y = rmsnorm(&x, &g, DEFAULT_RMS_EPS).unwrap();
        let want = oracle::rmsnorm_direct(x.data(), g.data(), DEFAULT_RMS_EPS);
        assert!(max_abs_diff(y.data(), &want) <= 1e-6);
    }

    #[test]
    fn rmsnorm_rejects_nonpositive_eps() {
        let x = Tensor::ones(&[3], Precision::F64).unwrap();
        assert!(matches!(rmsnorm(&x, &x, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::zeros(&[3], Precision::F64).unwrap();
        let y = softmax_lastdim(&x);
        assert!(max_abs_diff(y.data(), &[1.0 / 3.0; 3]) < 1e-15);

        let m = Tensor::new(&[2], vec![4.0, f64::NEG_INFINITY], Precision::F64).unwrap();
        assert_eq!(softmax_lastdim(&m).data(), &[1.0, 0.0]);

        let z = Tensor::new(&[2], vec![2.0, 1.0], Precision::F64).unwrap();
        let want = oracle::softmax_direct(&[2.0, 1.0]);
        assert!(max_abs_diff(softmax_lastdim(&z).data(), &want) <= 1e-7);
    }

    #[test]
    fn silu_examples() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(40.0) - 40.0).abs() < 1e-12);
        assert!(silu_scalar(-40.0).abs() < 1e-12);
        let direct = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) - direct).abs() <= 1e-7);
    }

    #[test]
    fn decay_matrix_examples() {
        let z = Tensor::zeros(&[3], Precision::F64).unwrap();
        let l = decay_matrix(&z).unwrap();
        assert_eq!(
            l.data(),
            &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]
        );

        let h = Tensor::new(&[2], vec![0.5f64.ln(); 2], Precision::F64).unwrap();
        let l = decay_matrix(&h).unwrap();
        assert!(max_abs_diff(l.data(), &[1.0, 0.0, 0.5, 1.0]) < 1e-15);
    }

    #[test]
    fn decay_matrix_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let la = Tensor::rand_uniform(&[16], -0.5, 0.0, Precision::F64, &mut rng).unwrap();
        let l = decay_matrix(&la).unwrap();
        let want = oracle::decay_direct_product(la.data());
        assert!(max_abs_diff(l.data(), &want) <= 1e-6);
    }

    #[test]
    fn decay_matrix_rejects_growth() {
        let la = Tensor::new(&[2], vec![-0.1, 0.2], Precision::F64).unwrap();
        assert!(matches!(decay_matrix(&la), Err(Error::Domain(_))));
    }

    #[test]
    fn bf16_rounding_is_round_to_nearest_even() {
        // 1 + 2^-8 is exactly halfway between 1 and 1 + 2^-7; ties go to the even mantissa.
        assert_eq!(round_bf16(1.0 + 2f64.powi(-8)), 1.0);
        assert_eq!(round_bf16(1.0 + 3.0 * 2f64.powi(-8)), 1.0 + 2.0 * 2f64.powi(-7));
        assert_eq!(round_bf16(1.0 + 2f64.powi(-8) + 2f64.powi(-12)), 1.0 + 2f64.powi(-7));
    }

    #[test]
    fn bf16_rounding_idempotent_on_many_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100_000 {
            let x: f64 = rng.gen_range(-1e6..1e6) * rng.gen_range(0.0..1.0f64).powi(8);
            let once = round_bf16(x);
            assert_eq!(round_bf16(once).to_bits(), once.to_bits());
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = row.len();
            let x = Tensor::new(&[n], row.clone(), Precision::F64).unwrap();
            let y = softmax_lastdim(&x);
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let shifted = x.map(|v| v + shift);
            prop_assert!(max_abs_diff(softmax_lastdim(&shifted).data(), y.data()) <= 1e-6);
        }

        #[test]
        fn decay_chain_property(
            la in proptest::collection::vec(-0.7f64..0.0, 2..20),
            picks in proptest::array::uniform3(0usize..1000),
        ) {
            let t = la.len();
            let mut idx = [picks[0] % t, picks[1] % t, picks[2] % t];
            idx.sort_unstable();
            let (m, j, i) = (idx[0], idx[1], idx[2]);
            let l = decay_matrix(&Tensor::new(&[t], la, Precision::F64).unwrap()).unwrap();
            let lhs = l.get(&[i, m]);
            let rhs = l.get(&[i, j]) * l.get(&[j, m]);
            prop_assert!((lhs - rhs).abs() <= 1e-6);
        }

        #[test]
        fn bf16_rounding_idempotent(bits in any::<u32>()) {
            let x = f32::from_bits(bits) as f64;
            prop_assume!(x.is_finite());
            let once = round_bf16(x);
            prop_assert_eq!(round_bf16(once).to_bits(), once.to_bits());
        }
    }
}
