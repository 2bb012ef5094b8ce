//! Eager kernels. The graph's forward pass calls these same functions, so
//! eager and recorded evaluation agree bitwise.

use super::{NumError, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn two_d(op: &'static str, a: &Tensor) -> Result<(usize, usize), NumError> {
    match a.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(NumError::Shape {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

pub(crate) fn checked(op: &'static str, t: Tensor) -> Result<Tensor, NumError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(NumError::NonFinite(op))
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    let (m, k) = two_d("matmul", a)?;
    let (k2, n) = two_d("matmul", b)?;
    if k != k2 {
        return Err(NumError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    checked("matmul", Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor, NumError> {
    let (m, n) = two_d("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumError> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    checked(op, Tensor::from_parts(a.shape().to_vec(), data))
}

fn map(op: &'static str, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor, NumError> {
    let data = a.data().iter().map(|&x| f(x)).collect();
    checked(op, Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn mul_scalar(a: &Tensor, c: f64) -> Result<Tensor, NumError> {
    map("mul_scalar", a, |x| x * c)
}

pub fn add_scalar(a: &Tensor, c: f64) -> Result<Tensor, NumError> {
    map("add_scalar", a, |x| x + c)
}

pub fn tanh(a: &Tensor) -> Result<Tensor, NumError> {
    map("tanh", a, f64::tanh)
}

/// `max(0, x)`; the subgradient at 0 is taken as 0.
pub fn relu(a: &Tensor) -> Result<Tensor, NumError> {
    map("relu", a, |x| if x > 0.0 { x } else { 0.0 })
}

/// Adds a length-`n` bias to every row of an `[m, n]` matrix.
pub fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor, NumError> {
    let (m, n) = two_d("add_row_bias", a)?;
    if bias.len() != n {
        return Err(NumError::Shape {
            op: "add_row_bias",
            left: a.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = a.data().to_vec();
    let b = bias.data();
    for i in 0..m {
        for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
            *o += bv;
        }
    }
    checked("add_row_bias", Tensor::from_parts(vec![m, n], out))
}

/// `T * log(sum_i exp(a_i / T))` with max subtraction.
pub fn logsumexp(a: &[f64], temperature: f64) -> Result<f64, NumError> {
    if a.is_empty() {
        return Err(NumError::Empty("logsumexp"));
    }
    if !(temperature > 0.0) {
        return Err(NumError::InvalidArgument(format!(
            "logsumexp temperature must be > 0, got {temperature}"
        )));
    }
    let max = a.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let sum: f64 = a.iter().map(|&x| (x / temperature - max).exp()).sum();
    Ok(temperature * (max + sum.ln()))
}

/// Row-wise [`logsumexp`]: `[m, n] -> [m]`.
pub fn logsumexp_rows(a: &Tensor, temperature: f64) -> Result<Tensor, NumError> {
    let m = a.rows();
    let out = (0..m)
        .map(|i| logsumexp(a.row(i), temperature))
        .collect::<Result<Vec<_>, _>>()?;
    checked("logsumexp_rows", Tensor::from_parts(vec![m], out))
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], scale: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor, NumError> {
    let (m, n) = two_d("softmax_rows", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        softmax_into(a.row(i), 1.0, &mut out[i * n..(i + 1) * n]);
    }
    checked("softmax_rows", Tensor::from_parts(vec![m, n], out))
}

/// Picks `a[i, idx[i]]` for every row.
pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor, NumError> {
    let (m, n) = two_d("gather_rows", a)?;
    if idx.len() != m {
        return Err(NumError::Shape {
            op: "gather_rows",
            left: a.shape().to_vec(),
            right: vec![idx.len()],
        });
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
        return Err(NumError::InvalidArgument(format!(
            "gather_rows index {bad} out of range for {n} columns"
        )));
    }
    let out = idx.iter().enumerate().map(|(i, &j)| a.get(i, j)).collect();
    Ok(Tensor::from_parts(vec![m], out))
}

/// Euclidean distance between two equal-length slices.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64, NumError> {
    if a.len() != b.len() {
        return Err(NumError::Shape {
            op: "l2_distance",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Row-wise [`l2_distance`]: `[m, n], [m, n] -> [m]`.
pub fn row_l2_distance(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    same_shape("row_l2_distance", a, b)?;
    let m = a.rows();
    let out = (0..m)
        .map(|i| l2_distance(a.row(i), b.row(i)))
        .collect::<Result<Vec<_>, _>>()?;
    checked("row_l2_distance", Tensor::from_parts(vec![m], out))
}

/// Mean squared error over all entries.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, NumError> {
    same_shape("mse", a, b)?;
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Column means: `[m, n] -> [1, n]`.
pub fn mean_rows(a: &Tensor) -> Result<Tensor, NumError> {
    let (m, n) = two_d("mean_rows", a)?;
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= m as f64;
    }
    Ok(Tensor::from_parts(vec![1, n], out))
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    let (m, p) = two_d("concat_cols", a)?;
    let (m2, q) = two_d("concat_cols", b)?;
    if m != m2 {
        return Err(NumError::Shape {
            op: "concat_cols",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * (p + q));
    for i in 0..m {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Ok(Tensor::from_parts(vec![m, p + q], out))
}
