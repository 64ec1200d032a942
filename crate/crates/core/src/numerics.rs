//! Dense row-major matrices, the two activation functions, and the seeded
//! generator every sampler and initializer draws from.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = self.row(r);
            for (c, v) in row.iter().take(8).enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:.6}")?;
            }
            if self.cols > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 6 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

/// Which operand of a product is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn abs(&self) -> Matrix {
        self.map(f64::abs)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    /// Rescales every nonzero row to unit Euclidean norm; returns the
    /// original norms.
    pub fn normalize_rows(&mut self) -> Vec<f64> {
        let norms: Vec<f64> = row_sq_norms(self).into_iter().map(f64::sqrt).collect();
        for (r, &n) in norms.iter().enumerate() {
            if n > 0.0 {
                self.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        norms
    }

    /// Column-wise means, one per column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Copy of the rows listed in `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for p in parts {
            match cols {
                None => cols = Some(p.cols),
                Some(c) if c != p.cols => {
                    return Err(Error::dim(format!(
                        "cannot stack {} columns onto {c}",
                        p.cols
                    )))
                }
                _ => {}
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix {
            rows,
            cols: cols.unwrap_or(0),
            data,
        })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `a × b`, checked.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, Trans::No, b, Trans::No, 0.0, &mut c);
    Ok(c)
}

/// `c = alpha * op(a) * op(b) + beta * c`.
///
/// Shapes are asserted; callers that take user input go through [`matmul`].
pub fn gemm(alpha: f64, a: &Matrix, ta: Trans, b: &Matrix, tb: Trans, beta: f64, c: &mut Matrix) {
    let (m, k) = match ta {
        Trans::No => (a.rows, a.cols),
        Trans::Yes => (a.cols, a.rows),
    };
    let (kb, n) = match tb {
        Trans::No => (b.rows, b.cols),
        Trans::Yes => (b.cols, b.rows),
    };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (a.cols as isize, 1),
        Trans::Yes => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (b.cols as isize, 1),
        Trans::Yes => (1, b.cols as isize),
    };
    // SAFETY: strides and extents describe exactly the backing buffers,
    // whose lengths were checked against the asserted shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Entry `i` is the squared Euclidean norm of row `i`.
pub fn row_sq_norms(a: &Matrix) -> Vec<f64> {
    a.iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect()
}

/// ReLU raised to the power 1 or 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Relu2,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        let p = x.max(0.0);
        match self {
            Activation::Relu => p,
            Activation::Relu2 => p * p,
        }
    }

    /// Derivative, with the subgradient at 0 taken to be 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Relu2 => 2.0 * x.max(0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu2 => "relu2",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "relu2" => Ok(Activation::Relu2),
            other => Err(Error::usage(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Deterministic generator: ChaCha8 keyed by a 64-bit seed, with
/// independent streams selected through the ChaCha stream id.
///
/// Normals use the Marsaglia polar method on pairs of uniforms from
/// `[-1, 1)`; the second value of each accepted pair is cached and
/// returned by the next call.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8+polar";

    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Generator for stream `stream` of `seed`. Distinct streams never
    /// overlap.
    pub fn from_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            spare_normal: None,
        }
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let k = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * k);
                return u * k;
            }
        }
    }

    pub fn normal_with(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 4.0, 7.25]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_times_a_is_zero() {
        let mut rng = Rng::new(1);
        let a = random_matrix(&mut rng, 4, 3);
        let c = matmul(&Matrix::zeros(2, 4), &a).unwrap();
        assert_eq!(c, Matrix::zeros(2, 3));
    }

    #[test]
    fn mismatched_product_is_rejected() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn transposed_gemm_agrees_with_explicit_transpose() {
        let mut rng = Rng::new(2);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let mut c = Matrix::zeros(5, 4);
        gemm(1.0, &a, Trans::No, &b, Trans::Yes, 0.0, &mut c);
        let expect = matmul(&a, &b.transpose()).unwrap();
        assert!(c.max_abs_diff(&expect) < 1e-14);

        let mut d = Matrix::zeros(3, 3);
        gemm(1.0, &a, Trans::Yes, &a, Trans::No, 0.0, &mut d);
        let expect = matmul(&a.transpose(), &a).unwrap();
        assert!(d.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let (p, q, r, s) = (
                1 + rng.below(8),
                1 + rng.below(8),
                1 + rng.below(8),
                1 + rng.below(8),
            );
            let a = random_matrix(&mut rng, p, q);
            let b = random_matrix(&mut rng, q, r);
            let c = random_matrix(&mut rng, r, s);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1e-300);
            assert!(left.max_abs_diff(&right) / scale < 1e-10);
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu2.apply(3.0), 9.0);
        assert_eq!(Activation::Relu2.derivative(2.0), 4.0);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Relu2.derivative(0.0), 0.0);
    }

    proptest! {
        #[test]
        fn activation_derivative_matches_central_differences(
            x in prop_oneof![-50.0f64..-1e-3, 1e-3f64..50.0],
            squared in any::<bool>(),
        ) {
            let act = if squared { Activation::Relu2 } else { Activation::Relu };
            let h = 1e-6 * x.abs().max(1e-3);
            let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
            let exact = act.derivative(x);
            prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn squared_row_norms() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(row_sq_norms(&a), vec![2.0]);
        assert_eq!(row_sq_norms(&Matrix::zeros(3, 2)), vec![0.0; 3]);
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(row_sq_norms(&b), vec![25.0, 0.0]);
    }

    #[test]
    fn equal_seeds_give_equal_draws() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = Rng::from_stream(9, 0);
        let mut b = Rng::from_stream(9, 1);
        let same = (0..100).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn polar_normals_have_unit_moments() {
        let mut rng = Rng::new(5);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn normalize_rows_gives_unit_rows() {
        let mut a = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let norms = a.normalize_rows();
        assert_eq!(norms, vec![5.0, 0.0, 1.0]);
        assert_eq!(a.row(0), &[0.6, 0.8]);
        assert_eq!(a.row(1), &[0.0, 0.0]);
    }
}
