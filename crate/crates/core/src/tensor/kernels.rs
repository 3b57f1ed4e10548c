use super::{Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul_nt")?;
    let (m, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(mismatch("matmul_nt", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).fold(0.0, |acc, (x, y)| acc + x * y);
        }
    }
    Tensor::matrix(n, m, out)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, n) = a.dims2("matmul_tn")?;
    let (k2, m) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(mismatch("matmul_tn", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &ad[p * n..(p + 1) * n];
        let brow = &bd[p * m..(p + 1) * m];
        for (i, av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2("softmax")?;
    let mut out = a.data().to_vec();
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let max = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Row-wise normalisation to zero mean, unit variance. Returns the
/// normalised rows and the per-row `1/sqrt(var + eps)`.
pub fn layer_norm_rows(a: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, m) = a.dims2("layer_norm")?;
    let mut out = a.data().to_vec();
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let mean = row.iter().fold(0.0, |acc, v| acc + v) / m as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
        let var = row.iter().fold(0.0, |acc, v| acc + v * v) / m as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
        inv_std.push(inv);
    }
    Ok((Tensor::new(a.shape().to_vec(), out)?, inv_std))
}
