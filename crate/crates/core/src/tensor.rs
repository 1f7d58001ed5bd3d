//! Dense row-major `f64` tensors and the handful of differentiable
//! operations the encoders are built from.
//!
//! Every forward op here has a paired `*_backward` that maps an upstream
//! gradient to gradients of its inputs. Nothing is taped: callers keep
//! whatever forward values the backward op asks for.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == m), "ragged rows");
        Self {
            shape: vec![n, m],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let m = self.shape[1];
        self.data[i * m + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let m = self.cols();
        &mut self.data[i * m..(i + 1) * m]
    }

    /// Single row as a `[1×m]` matrix.
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: vec![1, self.cols()],
            data: self.row(i).to_vec(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..n {
            for j in 0..m {
                out.data[j * n + i] = self.data[i * m + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column block `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * m + start..i * m + end]);
        }
        Tensor {
            shape: vec![n, w],
            data,
        }
    }

    /// Writes `block` into columns `[start, start + block.cols())`.
    pub fn set_cols(&mut self, start: usize, block: &Tensor) {
        let m = self.cols();
        let w = block.cols();
        for i in 0..self.rows() {
            self.data[i * m + start..i * m + start + w].copy_from_slice(block.row(i));
        }
    }

    /// Row block `[start, end)` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let m = self.cols();
        Tensor {
            shape: vec![end - start, m],
            data: self.data[start * m..end * m].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let m = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.cols() != m {
                return Err(Error::shape(format!(
                    "concat_rows: column counts {} and {} differ",
                    m,
                    p.cols()
                )));
            }
            n += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Column sums of a matrix as a `[m]` vector.
    pub fn sum_rows(&self) -> Tensor {
        let m = self.cols();
        let mut out = vec![0.0; m];
        for i in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![m],
            data: out,
        }
    }
}

/// `A·B` for `A:[n×k]`, `B:[k×m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.require_matrix("matmul")?;
    let (k2, m) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// `A·Bᵀ` for `A:[n×k]`, `B:[m×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.require_matrix("matmul_nt")?;
    let (m, k2) = b.require_matrix("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt inner dimensions disagree: {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// `Aᵀ·B` for `A:[k×n]`, `B:[k×m]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, n) = a.require_matrix("matmul_tn")?;
    let (k2, m) = b.require_matrix("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn inner dimensions disagree: {:?}ᵀ x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Gradients of `C = A·B` given `G = dL/dC`: returns `(G·Bᵀ, Aᵀ·G)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(g, b)?, matmul_tn(a, g)?))
}

/// Row-wise softmax, stabilized by subtracting each row's max.
///
/// Entries equal to `-inf` get probability exactly zero.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let m = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(m.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Given `Y = softmax_rows(X)` and `dY`, returns `dX = Y ⊙ (dY − rowsum(dY ⊙ Y))`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let m = y.cols();
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let yr = &y.data[i * m..(i + 1) * m];
        let dyr = &dy.data[i * m..(i + 1) * m];
        let inner: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..m {
            dx.data[i * m + j] = yr[j] * (dyr[j] - inner);
        }
    }
    dx
}

pub const LN_EPS: f64 = 1e-5;

/// Values kept from a layer-norm forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Standardized input `(x − μ)/σ` before the affine map.
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row `gain ⊙ (x − μ)/√(σ² + eps) + bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = x.require_matrix("layer_norm")?;
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!(
            "layer_norm: input {:?}, gain {:?}, bias {:?}",
            x.shape, gain.shape, bias.shape
        )));
    }
    let mut normalized = Tensor::zeros(&[n, d]);
    let mut out = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            normalized.data[i * d + j] = h;
            out.data[i * d + j] = gain.data[j] * h + bias.data[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut dh = vec![0.0; d];
    for i in 0..n {
        let h = cache.normalized.row(i);
        let g = dy.row(i);
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            dgain.data[j] += g[j] * h[j];
            dbias.data[j] += g[j];
            dh[j] = g[j] * gain.data[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        let r = cache.inv_std[i];
        for j in 0..d {
            dx.data[i * d + j] = r * (dh[j] - mean_dh - h[j] * mean_dh_h);
        }
    }
    (dx, dgain, dbias)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Gelu => 0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2)),
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
                let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                cdf + v * pdf
            }
        }
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// `dy ⊙ f'(x)` where `x` is the pre-activation input.
pub fn activation_backward(kind: Activation, x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip(dy, |v, g| g * kind.derivative(v))
}

/// L2-normalizes a vector; returns the unit vector and the original norm.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Backward of `y = x/‖x‖`: `dx = (dy − y(y·dy))/‖x‖`.
pub fn l2_normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let proj: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(dy)
        .map(|(yv, g)| (g - yv * proj) / norm)
        .collect()
}

/// Parameter tensor with a gradient accumulator and a trainable flag.
///
/// Frozen tensors ignore accumulated gradients, so their `grad` stays
/// identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl ParamTensor {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self::new(value, false)
    }

    pub fn trainable(value: Tensor) -> Self {
        Self::new(value, true)
    }

    pub fn accumulate(&mut self, g: &Tensor) {
        if self.trainable {
            debug_assert_eq!(g.len(), self.grad.len());
            for (a, b) in self.grad.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    }

    pub fn accumulate_scalar(&mut self, g: f64) {
        if self.trainable {
            self.grad.data[0] += g;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn scalar_value(&self) -> f64 {
        self.value.data[0]
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) {
        let h = 1e-4;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data[k] += h;
            let mut xm = x.clone();
            xm.data[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data[k];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {k}: analytic {a} fd {fd} rel {rel}");
        }
    }

    #[test]
    fn identity_product_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let i = Tensor::identity(3);
        assert_eq!(matmul(&i, &a).unwrap(), a);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            Tensor::from_rows(&[vec![2.0], vec![4.0]])
        );
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let c = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &b.transpose()).unwrap()) < 1e-14);
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &c).unwrap()) < 1e-14);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let g = Tensor::filled(&[3, 2], 1.0);
        let (da, db) = matmul_backward(&a, &b, &g).unwrap();
        fd_check(|x| matmul(x, &b).unwrap().sum(), &a, &da);
        fd_check(|x| matmul(&a, x).unwrap().sum(), &b, &db);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0; 4]]));
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 3f64.ln()]]));
        assert!((s.at(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.at(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 5], 2.0, &mut rng);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let y = softmax_rows(&x);
        let dx = softmax_rows_backward(&y, &w);
        fd_check(|x| softmax_rows(x).dot(&w), &x, &dx);
    }

    #[test]
    fn layer_norm_constant_row_returns_bias() {
        let x = Tensor::from_rows(&[vec![3.0; 4]]);
        let gain = Tensor::filled(&[4], 1.0);
        let bias = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let (y, _) = layer_norm(&x, &gain, &bias, LN_EPS).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn layer_norm_two_value_row() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]);
        let gain = Tensor::filled(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&x, &gain, &bias, 1e-14).unwrap();
        assert!((y.at(0, 0) + 1.0).abs() < 1e-12);
        assert!((y.at(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let gain = Tensor::randn(&[6], 1.0, &mut rng);
        let bias = Tensor::randn(&[6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let (_, cache) = layer_norm(&x, &gain, &bias, LN_EPS).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &gain, &w);
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| layer_norm(x, g, b, LN_EPS).unwrap().0.dot(&w);
        fd_check(|t| loss(t, &gain, &bias), &x, &dx);
        fd_check(|t| loss(&x, t, &bias), &gain, &dg);
        fd_check(|t| loss(&x, &gain, t), &bias, &db);
    }

    #[test]
    fn activations_by_hand() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(Activation::Relu, &x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
    }

    #[test]
    fn activation_gradients_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[4, 5], 1.5, &mut rng).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        for kind in [Activation::Relu, Activation::Gelu] {
            let dx = activation_backward(kind, &x, &w);
            fd_check(|t| activation(kind, t).dot(&w), &x, &dx);
        }
    }

    #[test]
    fn frozen_param_ignores_gradients() {
        let mut p = ParamTensor::frozen(Tensor::zeros(&[2, 2]));
        p.accumulate(&Tensor::filled(&[2, 2], 3.0));
        assert_eq!(p.grad.max_abs(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = Tensor> {
            (1usize..6, 1usize..7).prop_flat_map(|(n, m)| {
                proptest::collection::vec(-50.0f64..50.0, n * m)
                    .prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(x in matrix()) {
                let y = softmax_rows(&x);
                for i in 0..y.rows() {
                    let s: f64 = y.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(y.row(i).iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn layer_norm_standardizes(x in matrix()) {
                prop_assume!(x.cols() >= 2);
                let d = x.cols();
                let gain = Tensor::filled(&[d], 1.0);
                let bias = Tensor::zeros(&[d]);
                let (_, cache) = layer_norm(&x, &gain, &bias, LN_EPS).unwrap();
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                    let h = cache.normalized.row(i);
                    let hm = h.iter().sum::<f64>() / d as f64;
                    prop_assert!(hm.abs() < 1e-10);
                    let hv = h.iter().map(|v| (v - hm).powi(2)).sum::<f64>() / d as f64;
                    prop_assert!((hv - var / (var + LN_EPS)).abs() < 1e-10);
                    if var > 10.0 {
                        prop_assert!((hv - 1.0).abs() < 1e-6);
                    }
                }
            }

            #[test]
            fn identity_associativity(a in matrix()) {
                let m = a.cols();
                let b = a.transpose();
                let i = Tensor::identity(m);
                let left = matmul(&matmul(&a, &i).unwrap(), &b).unwrap();
                let right = matmul(&a, &matmul(&i, &b).unwrap()).unwrap();
                let direct = matmul(&a, &b).unwrap();
                prop_assert_eq!(&left, &direct);
                prop_assert_eq!(&right, &direct);
            }
        }
    }
}
