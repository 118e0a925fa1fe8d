//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function. Softmax and log-sum-exp always
//! subtract the row maximum first.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Norm floor below which a vector is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::dims("add", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
}

pub fn scale<T: Scalar>(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|&x| x * s).collect()
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::dims("matmul", a.dims(), b.dims()));
    }
    let mut out = vec![T::zero(); m * n];
    let bd = b.as_slice();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a.row(i).iter().enumerate() {
            axpy(av, &bd[t * n..(t + 1) * n], row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row vector times matrix: `v: k`, `w: k×n` → `n`.
pub fn vecmat<T: Scalar>(v: &[T], w: &Tensor<T>) -> Result<Vec<T>> {
    let (k, n) = w.matrix_dims("vecmat")?;
    if v.len() != k {
        return Err(Error::dims("vecmat", &[v.len()], w.dims()));
    }
    let mut out = vec![T::zero(); n];
    for (t, &x) in v.iter().enumerate() {
        axpy(x, w.row(t), &mut out);
    }
    Ok(out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.matrix_dims("transpose")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Gradients of `c = a · b` given `dc`: `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = matmul(dc, &transpose(b)?)?;
    let db = matmul(&transpose(a)?, dc)?;
    Ok((da, db))
}

/// Outer product `x ⊗ y` accumulated into a `|x|×|y|` matrix.
pub fn add_outer<T: Scalar>(x: &[T], y: &[T], acc: &mut Tensor<T>) {
    debug_assert_eq!(acc.dims(), &[x.len(), y.len()]);
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, y, acc.row_mut(i));
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _) = x.matrix_dims("softmax_rows")?;
    let mut out = x.clone();
    for i in 0..m {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Given softmax output `y` and upstream `dy`: `dx = y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T]) -> Vec<T> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &di)| yi * (di - inner)).collect()
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.dims() != dy.dims() {
        return Err(Error::dims("softmax_rows_backward", y.dims(), dy.dims()));
    }
    let (m, n) = y.matrix_dims("softmax_rows_backward")?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend(softmax_backward(y.row(i), dy.row(i)));
    }
    Tensor::new(vec![m, n], out)
}

pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `v / max(‖v‖, eps)`.
pub fn l2_normalize<T: Scalar>(v: &[T], eps: T) -> Vec<T> {
    let n = norm(v).max(eps);
    v.iter().map(|&x| x / n).collect()
}

pub fn l2_normalize_backward<T: Scalar>(v: &[T], dy: &[T], eps: T) -> Vec<T> {
    let n = norm(v);
    if n < eps {
        return dy.iter().map(|&d| d / eps).collect();
    }
    let y: Vec<T> = v.iter().map(|&x| x / n).collect();
    let inner = dot(&y, dy);
    dy.iter().zip(&y).map(|(&d, &yi)| (d - yi * inner) / n).collect()
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either vector has norm
/// below [`NORM_EPS`].
pub fn cosine_sim<T: Scalar>(u: &[T], v: &[T]) -> T {
    let eps = T::cast(NORM_EPS);
    let (nu, nv) = (norm(u), norm(v));
    if nu < eps || nv < eps {
        return T::zero();
    }
    (dot(u, v) / (nu * nv)).max(-T::one()).min(T::one())
}

fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, n) = logits.matrix_dims("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dims("cross_entropy", logits.dims(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Index {
            what: "class logits",
            index: bad,
            len: n,
        });
    }
    Ok((b, n))
}

/// Mean over the batch of `−log softmax(logits_b)[label_b]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (b, _) = check_labels(logits, labels)?;
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[l]
        })
        .sum();
    Ok(total / T::cast(b as f64))
}

/// `∂loss/∂logits = (softmax(logits) − onehot(labels)) / B`.
pub fn cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (b, _) = check_labels(logits, labels)?;
    let inv_b = T::one() / T::cast(b as f64);
    let mut grad = softmax_rows(logits)?;
    for (i, &l) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        row[l] = row[l] - T::one();
        for g in row.iter_mut() {
            *g = *g * inv_b;
        }
    }
    Ok(grad)
}

/// Mean over rows (spatial locations) of an `L×C` matrix.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (l, c) = x.matrix_dims("mean_rows")?;
    let mut acc = vec![T::zero(); c];
    for i in 0..l {
        axpy(T::one(), x.row(i), &mut acc);
    }
    let inv = T::one() / T::cast(l as f64);
    Ok(acc.into_iter().map(|v| v * inv).collect())
}

/// Each of the `rows` inputs receives `dy / rows`.
pub fn mean_rows_backward<T: Scalar>(dy: &[T], rows: usize) -> Tensor<T> {
    let inv = T::one() / T::cast(rows as f64);
    let row: Vec<T> = dy.iter().map(|&d| d * inv).collect();
    Tensor::new(vec![rows, dy.len()], row.repeat(rows)).expect("rows ≥ 1")
}
