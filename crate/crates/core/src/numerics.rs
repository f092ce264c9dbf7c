//! Minimal dense linear algebra and normalization primitives with exact
//! analytic gradients.
//!
//! All storage is row-major `Vec<f64>` and all accumulation is done in double
//! precision. Every forward op here has a matching backward that returns a
//! gradient for each parameter and each input. Values are immutable during an
//! op, so everything in this module is safe to call concurrently on shared
//! read-only data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Dense containers ─────────────────────────────────────────────────

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Square identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                op: "DenseMatrix::from_vec",
                left: format!("{}x{}", rows, cols),
                right: format!("len {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "matrix entries must be finite".to_string(),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element count (rows × cols).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }
}

/// Dense vector of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        DenseVector {
            data: vec![0.0; dim],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "vector entries must be finite".to_string(),
            ));
        }
        Ok(DenseVector { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Elementwise `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &DenseVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }
}

/// LayerNorm scale/shift parameters. `gamma` and `beta` are learnable;
/// `epsilon` is a fixed stabilizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: DenseVector,
    pub beta: DenseVector,
    pub epsilon: f64,
}

pub const LAYERNORM_EPSILON: f64 = 1e-5;

impl LayerNormParams {
    /// gamma = 1, beta = 0, default epsilon.
    pub fn unit(dim: usize) -> Self {
        let mut gamma = DenseVector::zeros(dim);
        gamma.fill(1.0);
        LayerNormParams {
            gamma,
            beta: DenseVector::zeros(dim),
            epsilon: LAYERNORM_EPSILON,
        }
    }

    pub fn new(gamma: DenseVector, beta: DenseVector, epsilon: f64) -> Result<Self> {
        if gamma.dim() != beta.dim() {
            return Err(Error::DimMismatch {
                op: "LayerNormParams::new",
                left: format!("gamma dim {}", gamma.dim()),
                right: format!("beta dim {}", beta.dim()),
            });
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".to_string()));
        }
        Ok(LayerNormParams {
            gamma,
            beta,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.dim()
    }
}

// ── Linear maps ──────────────────────────────────────────────────────

/// out[i] = Σ_j M[i,j] · v[j]
pub fn matvec(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.cols() != v.dim() {
        return Err(Error::DimMismatch {
            op: "matvec",
            left: format!("matrix cols {}", m.cols()),
            right: format!("vector dim {}", v.dim()),
        });
    }
    let mut out = DenseVector::zeros(m.rows());
    for i in 0..m.rows() {
        out.data[i] = dot(m.row(i), v.as_slice());
    }
    Ok(out)
}

/// out[j] = Σ_i v[i] · M[i,j]  (row-vector times matrix)
pub fn vecmat(v: &DenseVector, m: &DenseMatrix) -> Result<DenseVector> {
    if m.rows() != v.dim() {
        return Err(Error::DimMismatch {
            op: "vecmat",
            left: format!("vector dim {}", v.dim()),
            right: format!("matrix rows {}", m.rows()),
        });
    }
    let mut out = DenseVector::zeros(m.cols());
    for i in 0..m.rows() {
        let vi = v.data[i];
        if vi == 0.0 {
            continue;
        }
        for (o, mij) in out.data.iter_mut().zip(m.row(i)) {
            *o += vi * mij;
        }
    }
    Ok(out)
}

/// Rank-one matrix a bᵀ with shape a.dim × b.dim.
pub fn outer(a: &DenseVector, b: &DenseVector) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(a.dim(), b.dim());
    for i in 0..a.dim() {
        let ai = a.data[i];
        for (dst, bj) in m.row_mut(i).iter_mut().zip(b.as_slice()) {
            *dst = ai * bj;
        }
    }
    m
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backward of `matvec`: given d_out = dL/d(Mv), returns (dM, dv).
///
/// dM = outer(d_out, v), dv = Mᵀ d_out.
pub fn grad_matvec(
    m: &DenseMatrix,
    v: &DenseVector,
    d_out: &DenseVector,
) -> Result<(DenseMatrix, DenseVector)> {
    if d_out.dim() != m.rows() || v.dim() != m.cols() {
        return Err(Error::DimMismatch {
            op: "grad_matvec",
            left: format!("matrix {}x{}", m.rows(), m.cols()),
            right: format!("d_out dim {}, v dim {}", d_out.dim(), v.dim()),
        });
    }
    let d_m = outer(d_out, v);
    let d_v = vecmat(d_out, m)?;
    Ok((d_m, d_v))
}

/// Backward of `vecmat`: given d_out = dL/d(vᵀM), returns (dv, dM).
///
/// dv = M d_out, dM = outer(v, d_out).
pub fn grad_vecmat(
    v: &DenseVector,
    m: &DenseMatrix,
    d_out: &DenseVector,
) -> Result<(DenseVector, DenseMatrix)> {
    if d_out.dim() != m.cols() || v.dim() != m.rows() {
        return Err(Error::DimMismatch {
            op: "grad_vecmat",
            left: format!("matrix {}x{}", m.rows(), m.cols()),
            right: format!("d_out dim {}, v dim {}", d_out.dim(), v.dim()),
        });
    }
    let d_v = matvec(m, d_out)?;
    let d_m = outer(v, d_out);
    Ok((d_v, d_m))
}

// ── LayerNorm ────────────────────────────────────────────────────────

/// out[i] = gamma[i] · (x[i] − μ) / √(σ² + ε) + beta[i]
///
/// μ and σ² are the mean and (biased) variance over `x`.
pub fn layernorm(x: &DenseVector, p: &LayerNormParams) -> Result<DenseVector> {
    check_layernorm_dims("layernorm", x, p)?;
    let n = x.dim();
    let mean = x.as_slice().iter().sum::<f64>() / n as f64;
    let var = x
        .as_slice()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let inv_std = 1.0 / (var + p.epsilon).sqrt();
    let mut out = DenseVector::zeros(n);
    for i in 0..n {
        let norm = (x.data[i] - mean) * inv_std;
        out.data[i] = p.gamma.data[i] * norm + p.beta.data[i];
    }
    Ok(out)
}

/// Backward of `layernorm`. Returns (dx, dgamma, dbeta).
pub fn grad_layernorm(
    x: &DenseVector,
    p: &LayerNormParams,
    d_out: &DenseVector,
) -> Result<(DenseVector, DenseVector, DenseVector)> {
    check_layernorm_dims("grad_layernorm", x, p)?;
    if d_out.dim() != x.dim() {
        return Err(Error::DimMismatch {
            op: "grad_layernorm",
            left: format!("x dim {}", x.dim()),
            right: format!("d_out dim {}", d_out.dim()),
        });
    }
    let n = x.dim();
    let nf = n as f64;
    let mean = x.as_slice().iter().sum::<f64>() / nf;
    let var = x
        .as_slice()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / nf;
    let inv_std = 1.0 / (var + p.epsilon).sqrt();

    let mut d_x = DenseVector::zeros(n);
    let mut d_gamma = DenseVector::zeros(n);
    let mut d_beta = DenseVector::zeros(n);

    // dxhat[i] = d_out[i] * gamma[i]; then the standard reduction:
    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat))
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    let mut xhat = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for i in 0..n {
        xhat[i] = (x.data[i] - mean) * inv_std;
        dxhat[i] = d_out.data[i] * p.gamma.data[i];
        sum_dxhat += dxhat[i];
        sum_dxhat_xhat += dxhat[i] * xhat[i];
        d_gamma.data[i] = d_out.data[i] * xhat[i];
        d_beta.data[i] = d_out.data[i];
    }
    for i in 0..n {
        d_x.data[i] = inv_std * (dxhat[i] - sum_dxhat / nf - xhat[i] * sum_dxhat_xhat / nf);
    }
    Ok((d_x, d_gamma, d_beta))
}

fn check_layernorm_dims(op: &'static str, x: &DenseVector, p: &LayerNormParams) -> Result<()> {
    if x.dim() != p.dim() {
        return Err(Error::DimMismatch {
            op,
            left: format!("x dim {}", x.dim()),
            right: format!("params dim {}", p.dim()),
        });
    }
    Ok(())
}

// ── Softmax ──────────────────────────────────────────────────────────

/// Max-shifted softmax over a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward of softmax: given weights w = softmax(s) and dL/dw, returns dL/ds.
///
/// ds[t] = w[t] * (dw[t] - Σ_u dw[u] w[u])
pub fn grad_softmax(weights: &[f64], d_weights: &[f64]) -> Vec<f64> {
    debug_assert_eq!(weights.len(), d_weights.len());
    let inner: f64 = weights.iter().zip(d_weights).map(|(w, d)| w * d).sum();
    weights
        .iter()
        .zip(d_weights)
        .map(|(w, d)| w * (d - inner))
        .collect()
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
