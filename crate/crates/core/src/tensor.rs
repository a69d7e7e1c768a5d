use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels;
use crate::{Error, Real, Result};

/// Dense row-major tensor.
///
/// Row-wise operations treat every dimension but the last as the row index,
/// so a rank-1 tensor is a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    /// Builds an `r×c` matrix from nested rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.iter().flat_map(|x| x.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The sole element of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// Matrix product `a[m×k] · b[k×p]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (k2, p) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("inner dimensions differ: {m}×{k} · {k2}×{p}")));
    }
    Ok(Tensor { shape: vec![m, p], data: kernels::matmul(a.data(), b.data(), m, k, p) })
}

/// Row-wise numerically stable log-softmax.
pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    let c = x.cols();
    for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        kernels::log_softmax_row(src, None, dst);
    }
    out
}

/// Row-wise layer normalisation with learned gain and bias.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!("layer norm over {d} columns with gain {} / bias {}", gain.len(), bias.len())));
    }
    if eps <= T::zero() {
        return Err(Error::Contract("layer norm eps must be positive".into()));
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
        kernels::layer_norm_row(src, gain.data(), bias.data(), eps, dst);
    }
    Ok(out)
}

/// `-log softmax(logits)[target]` for a single logit row.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, target: usize) -> Result<T> {
    let v = logits.len();
    if target >= v {
        return Err(Error::Index(format!("target {target} outside {v} classes")));
    }
    let mut lp = vec![T::zero(); v];
    kernels::log_softmax_row(logits.data(), None, &mut lp);
    Ok(-lp[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    out[i * p + j] += a[i * k + t] * b[t * p + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i2 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap(), a);
        let z = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(matmul(&a, &z).unwrap(), z);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = matmul(&Tensor::new(vec![3, 4], a.clone()).unwrap(), &Tensor::new(vec![4, 2], b.clone()).unwrap()).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b, 3, 4, 2)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn log_softmax_cases() {
        let x = Tensor::new(vec![3], vec![0.0f64; 3]).unwrap();
        for v in log_softmax_rows(&x).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
        let big = Tensor::new(vec![2], vec![1000.0f64, 0.0]).unwrap();
        let y = log_softmax_rows(&big);
        assert!(y.is_finite());
        let s: f64 = y.data().iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() <= 1e-12);

        let r = [1.0f64, 2.0, 3.0];
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let y = log_softmax_rows(&Tensor::new(vec![3], r.to_vec()).unwrap());
        for (a, b) in y.data().iter().zip(r) {
            assert!((a - (b - lse)).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full(&[2], 1.0f64);
        let zero = Tensor::zeros(&[2]);
        let c = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        assert_eq!(layer_norm(&c, &one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0]);

        let bias = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![2.0, 9.0]).unwrap();
        assert_eq!(layer_norm(&x, &zero, &bias, 1e-5).unwrap().data(), bias.data());

        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &one, &zero, 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut peaked = vec![0.0f64; 5];
        peaked[2] = 1e3;
        assert!(cross_entropy(&Tensor::new(vec![5], peaked).unwrap(), 2).unwrap() < 1e-12);
        let u = Tensor::new(vec![7], vec![0.25f64; 7]).unwrap();
        assert!((cross_entropy(&u, 3).unwrap() - 7f64.ln()).abs() < 1e-14);
        let l = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let oracle = -(1.0 - (1f64.exp() + 2f64.exp() + 3f64.exp()).ln());
        assert!((cross_entropy(&l, 0).unwrap() - oracle).abs() <= 1e-12);
        assert!(matches!(cross_entropy(&l, 3), Err(Error::Index(_))));
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
