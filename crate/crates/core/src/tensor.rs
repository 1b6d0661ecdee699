//! Dense row-major tensors and the handful of kernels the layers need.
//!
//! Shape conventions used throughout the crate:
//! - token features are `[N, C]`, one row per patch in row-major patch order;
//! - feature maps are `[H, W, C]`, which shares its memory layout with the
//!   `[H*W, C]` token view of the same grid;
//! - weights of a linear map `x -> x W + b` are `[in, out]` with bias `[out]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("Tensor::new", "non-empty shape with extents >= 1", format!("{shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{len} values for shape {shape:?}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "tensor extents must be >= 1, got {shape:?}");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a rank-2 tensor (or the leading extent otherwise).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Elements per leading index.
    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        self.expect_same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Adds `bias` (length = columns) to every row.
    pub fn add_row_bias(&mut self, bias: &Self) -> Result<()> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::shape("add_row_bias", format!("{c} bias entries"), format!("{}", bias.len())));
        }
        for row in self.data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums of a row-major matrix, shape `[cols]`.
    pub fn col_sum(&self) -> Self {
        let c = self.cols();
        let mut out = Tensor::zeros(&[c]);
        for row in self.data.chunks(c) {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, "rank-2 tensor", format!("{:?}", self.shape))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(op, "rank-3 tensor", format!("{:?}", self.shape))),
        }
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{shape:?}"), format!("{:?}", self.shape)))
        }
    }

    fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        other.expect_shape(op, &self.shape)
    }
}

/// `a [M,K] x b [K,N] -> [M,N]`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extent {k}"), format!("{k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for (arow, orow) in a.data.chunks(k).zip(out.data.chunks_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.data.chunks(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a^T b` for `a [K,M]`, `b [K,N]` -> `[M,N]`
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("shared extent {k}"), format!("{k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for (arow, brow) in a.data.chunks(m).zip(b.data.chunks(n)) {
        for (&av, orow) in arow.iter().zip(out.data.chunks_mut(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a b^T` for `a [M,K]`, `b [N,K]` -> `[M,N]`
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("shared extent {k}"), format!("{k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for (arow, orow) in a.data.chunks(k).zip(out.data.chunks_mut(n)) {
        for (o, brow) in orow.iter_mut().zip(b.data.chunks(k)) {
            *o = dot(arow, brow);
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators let the compiler vectorise the loop.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (l, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.dims2("softmax_rows")?;
    x.check_finite("softmax_rows input")?;
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Gradient of `softmax_rows` given its output `y` and upstream `dy`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape("softmax_rows_backward", y.shape())?;
    let c = y.cols();
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, dyr), dxr) in y.data.chunks(c).zip(dy.data.chunks(c)).zip(dx.data.chunks_mut(c)) {
        let inner = dot(yr, dyr);
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    Ok(dx)
}

/// Per-channel spatial mean of an `[H, W, C]` map (or `[N, C]` token matrix).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = match x.shape()[..] {
        [_, _, c] | [_, c] => c,
        _ => return Err(Error::shape("global_avg_pool", "[H, W, C] or [N, C]", format!("{:?}", x.shape()))),
    };
    let n = x.len() / c;
    let mut out = Tensor::zeros(&[c]);
    for row in x.data.chunks(c) {
        for (o, &v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = T::one() / T::c(n as f64);
    out.data.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Source taps for one output coordinate of an align-corners-false resample.
#[derive(Clone, Copy, Debug)]
struct Taps {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Taps> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Taps { lo, hi, w_hi: src - lo as f64 }
        })
        .collect()
}

/// Bilinear resampling of an `[H, W, C]` map with half-pixel centers.
pub fn bilinear_resample<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("bilinear_resample")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resample", "output extents >= 1", format!("{out_h}x{out_w}")));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    for (oy, ty) in ys.iter().enumerate() {
        let wy = T::c(ty.w_hi);
        let wy0 = T::one() - wy;
        for (ox, tx) in xs.iter().enumerate() {
            let wx = T::c(tx.w_hi);
            let wx0 = T::one() - wx;
            let taps = [
                (ty.lo, tx.lo, wy0 * wx0),
                (ty.lo, tx.hi, wy0 * wx),
                (ty.hi, tx.lo, wy * wx0),
                (ty.hi, tx.hi, wy * wx),
            ];
            let dst = &mut out.data[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for (sy, sx, k) in taps {
                let src = &x.data[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resample`]: maps an output gradient back onto the
/// `[in_h, in_w, C]` input grid.
pub fn bilinear_resample_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (out_h, out_w, c) = dy.dims3("bilinear_resample_backward")?;
    if out_h == in_h && out_w == in_w {
        return Ok(dy.clone());
    }
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    let mut dx = Tensor::zeros(&[in_h, in_w, c]);
    for (oy, ty) in ys.iter().enumerate() {
        let wy = T::c(ty.w_hi);
        let wy0 = T::one() - wy;
        for (ox, tx) in xs.iter().enumerate() {
            let wx = T::c(tx.w_hi);
            let wx0 = T::one() - wx;
            let taps = [
                (ty.lo, tx.lo, wy0 * wx0),
                (ty.lo, tx.hi, wy0 * wx),
                (ty.hi, tx.lo, wy * wx0),
                (ty.hi, tx.hi, wy * wx),
            ];
            let src = &dy.data[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for (sy, sx, k) in taps {
                let dst = &mut dx.data[(sy * in_w + sx) * c..(sy * in_w + sx + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
    }
    Ok(dx)
}

/// Affine map `x W + b` over the rows of `x`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        y.add_row_bias(b)?;
    }
    Ok(y)
}

/// Backward of [`linear`]; accumulates into `dw`/`db` and returns `dx`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: Option<&mut Tensor<T>>,
) -> Result<Tensor<T>> {
    dw.add_assign(&matmul_tn(x, dy)?)?;
    if let Some(db) = db {
        db.add_assign(&dy.col_sum())?;
    }
    matmul_nt(dy, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let col = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(matmul(&a, &col).unwrap(), t(&[2, 1], &[2.0, 4.0]));
        assert!(matches!(matmul(&a, &t(&[3, 1], &[1.0; 3])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f32;
                for k in 0..5 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-6);
            }
        }
        let tn = matmul_tn(&a.transpose().unwrap(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose().unwrap()).unwrap();
        for ((x, y), z) in c.data().iter().zip(tn.data()).zip(nt.data()) {
            assert!((x - y).abs() < 1e-6 && (x - z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_rows(&t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = softmax_rows(&t(&[1, 2], &[1000.0, 0.0])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = softmax_rows(&random(&[4, 6], &mut rng)).unwrap();
        for r in 0..4 {
            assert!((y.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(softmax_rows(&t(&[1, 2], &[f64::NAN, 0.0])), Err(Error::NonFinite(_))));
    }

    #[test]
    fn global_avg_pool_cases() {
        let x = Tensor::<f64>::full(&[3, 2, 4], 3.0);
        assert_eq!(global_avg_pool(&x).unwrap(), Tensor::full(&[4], 3.0));
        let px = t(&[1, 1, 3], &[1.0, -2.0, 5.0]);
        assert_eq!(global_avg_pool(&px).unwrap().data(), &[1.0, -2.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 4, 2], &mut rng);
        let g = global_avg_pool(&x).unwrap();
        for c in 0..2 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += x.at(&[i, j, c]);
                }
            }
            assert!((g.data()[c] - s / 16.0).abs() < 1e-6);
        }
    }

    /// Per-pixel reference: sample position with half-pixel centers, clamp, lerp.
    fn bilinear_reference(x: &Tensor<f64>, oy: usize, ox: usize, out_h: usize, out_w: usize, c: usize) -> f64 {
        let (h, w, _) = x.dims3("ref").unwrap();
        let fy = (((oy as f64) + 0.5) * h as f64 / out_h as f64 - 0.5).max(0.0).min((h - 1) as f64);
        let fx = (((ox as f64) + 0.5) * w as f64 / out_w as f64 - 0.5).max(0.0).min((w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let top = x.at(&[y0, x0, c]) * (1.0 - dx) + x.at(&[y0, x1, c]) * dx;
        let bottom = x.at(&[y1, x0, c]) * (1.0 - dx) + x.at(&[y1, x1, c]) * dx;
        top * (1.0 - dy) + bottom * dy
    }

    #[test]
    fn bilinear_cases() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(bilinear_resample(&x, 2, 2).unwrap(), x);
        let k = Tensor::<f64>::full(&[3, 5, 2], 0.25);
        let up = bilinear_resample(&k, 7, 2).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let up = bilinear_resample(&x, 4, 4).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let r = bilinear_reference(&x, oy, ox, 4, 4, 0);
                assert!((up.at(&[oy, ox, 0]) - r).abs() < 1e-6);
            }
        }
        // Corners clamp to the input corners; the interior is interpolated.
        assert_eq!(up.at(&[0, 0, 0]), 1.0);
        assert!((up.at(&[1, 1, 0]) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(h, w, oh, ow) in &[(2, 2, 4, 4), (8, 8, 4, 4), (3, 5, 7, 2), (4, 4, 64, 64)] {
            let x: Tensor<f64> = Tensor::from_fn(&[h, w, 3], |_| rng.random_range(-1.0..1.0));
            let dy: Tensor<f64> = Tensor::from_fn(&[oh, ow, 3], |_| rng.random_range(-1.0..1.0));
            let lhs = bilinear_resample(&x, oh, ow).unwrap().dot(&dy).unwrap();
            let rhs = x.dot(&bilinear_resample_backward(&dy, h, w).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn softmax_backward_matches_jacobian() {
        let x = t(&[1, 3], &[0.3, -1.2, 0.8]);
        let y = softmax_rows(&x).unwrap();
        let dy = t(&[1, 3], &[1.0, 2.0, -0.5]);
        let dx = softmax_rows_backward(&y, &dy).unwrap();
        for i in 0..3 {
            let mut expected = 0.0;
            for j in 0..3 {
                let jac = y.data()[j] * (if i == j { 1.0 } else { 0.0 } - y.data()[i]);
                expected += jac * dy.data()[j];
            }
            assert!((dx.data()[i] - expected).abs() < 1e-12);
        }
    }
}
