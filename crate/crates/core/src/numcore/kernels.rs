//! Plain forward kernels over row-major slices. The tape calls these for its
//! forward pass; they are also usable on their own for inference.

use super::tensor::{DTensor, Real};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = a[m,n] · b[k,n]ᵀ`
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = dot(arow, brow);
        }
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn matmul_at<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Eight independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results are still deterministic.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax_rows<T: Real>(x: &DTensor<T>) -> DTensor<T> {
    let (r, c) = x.rows_cols();
    let mut out = x.data().to_vec();
    for i in 0..r {
        softmax_in_place(&mut out[i * c..(i + 1) * c]);
    }
    DTensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Per-row normalization to zero mean and unit variance (no affine).
/// Returns the normalized values and the per-row reciprocal std.
pub fn normalize_rows<T: Real>(x: &[T], rows: usize, cols: usize) -> (Vec<T>, Vec<T>) {
    let n = T::of_usize(cols);
    let eps = T::of(LN_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[i] = rs;
        for (o, &v) in xhat[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

pub fn layer_norm<T: Real>(x: &DTensor<T>, gamma: &[T], beta: &[T]) -> Result<DTensor<T>> {
    let (r, c) = x.rows_cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension(format!(
            "layer norm affine of width {}/{} over rows of width {c}",
            gamma.len(),
            beta.len()
        )));
    }
    let (mut y, _) = normalize_rows(x.data(), r, c);
    for i in 0..r {
        for j in 0..c {
            y[i * c + j] = y[i * c + j] * gamma[j] + beta[j];
        }
    }
    DTensor::new(x.shape().to_vec(), y)
}

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Arithmetic mean over the token axis of a `[T, D]` matrix.
pub fn mean_pool<T: Real>(x: &DTensor<T>) -> Result<DTensor<T>> {
    let (r, c) = x.rows_cols();
    if r == 0 || x.is_empty() {
        return Err(Error::EmptyPool);
    }
    DTensor::new(vec![c], mean_rows(x.data(), r, c))
}

pub(crate) fn mean_rows<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for i in 0..rows {
        for (o, &v) in out.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
            *o = *o + v;
        }
    }
    let n = T::of_usize(rows);
    out.iter_mut().for_each(|v| *v = *v / n);
    out
}

pub fn l2_norm<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::DegenerateEmbedding("zero-norm vector".into()));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // bᵀ laid out 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 4), c);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(matmul_at(&at, &b, 3, 2, 4), c);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn mean_pool_examples() {
        let x = DTensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mean_pool(&x).unwrap().data(), &[2.0, 3.0]);
        let one = DTensor::<f64>::from_rows(&[vec![5.0, -1.0, 0.25]]).unwrap();
        assert_eq!(mean_pool(&one).unwrap().data(), one.data());
        let empty = DTensor::<f64>::new(vec![0, 4], vec![]).unwrap();
        assert!(matches!(mean_pool(&empty), Err(Error::EmptyPool)));
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine(&[0.0f64, 0.0], &[0.0, 1.0]),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_8).abs() < 1e-9);
        assert!((gelu(-1.0f64) + 0.158_808_009_2).abs() < 1e-9);
    }
}
