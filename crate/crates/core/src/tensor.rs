//! Dense row-major f64 tensors and the small linear-algebra kernels the rest
//! of the crate builds on.
//!
//! `Tensor` is a plain value type: the autodiff tape in [`crate::diffcore`]
//! wraps these, and the oracle code in the test suites uses them directly.
//! Shapes are explicit; there is no broadcasting here beyond what callers
//! implement themselves.

use crate::error::{KrcError, Result};

/// Eight-lane unrolled dot product. The fixed lane structure lets LLVM keep
/// the accumulators in one vector register; the summation order differs from
/// a naive loop but is deterministic.
#[inline]
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let lanes = n / 8 * 8;
    let mut acc = [0.0f64; 8];
    let mut i = 0;
    while i < lanes {
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
        i += 8;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// Four dot products against one shared right-hand side, so the shared row's
/// loads amortize over four accumulator sets.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn dot4_slices(a0: &[f64], a1: &[f64], a2: &[f64], a3: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let n = b.len();
    let lanes = n / 8 * 8;
    let mut acc0 = [0.0f64; 8];
    let mut acc1 = [0.0f64; 8];
    let mut acc2 = [0.0f64; 8];
    let mut acc3 = [0.0f64; 8];
    let mut i = 0;
    while i < lanes {
        for l in 0..8 {
            let bv = b[i + l];
            acc0[l] += a0[i + l] * bv;
            acc1[l] += a1[i + l] * bv;
            acc2[l] += a2[i + l] * bv;
            acc3[l] += a3[i + l] * bv;
        }
        i += 8;
    }
    let fold = |acc: [f64; 8]| {
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
    };
    let (mut d0, mut d1, mut d2, mut d3) = (fold(acc0), fold(acc1), fold(acc2), fold(acc3));
    while i < n {
        d0 += a0[i] * b[i];
        d1 += a1[i] * b[i];
        d2 += a2[i] * b[i];
        d3 += a3[i] * b[i];
        i += 1;
    }
    (d0, d1, d2, d3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KrcError::dim(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag_from(v: &[f64]) -> Tensor {
        let n = v.len();
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = v[i];
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(KrcError::dim("item", format!("shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(KrcError::dim(op, format!("expected matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(KrcError::dim(op, format!("{:?} vs {:?}", self.shape, rhs.shape)));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(KrcError::dim("dot", format!("{:?} vs {:?}", self.shape, rhs.shape)));
        }
        Ok(dot_slices(&self.data, &rhs.data))
    }

    // ---- matrix kernels --------------------------------------------------

    /// `self (m,k) · rhs (k,n)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = rhs.rows_cols("matmul")?;
        if k != k2 {
            return Err(KrcError::dim("matmul", format!("{:?} x {:?}", self.shape, rhs.shape)));
        }
        // stream the (k,n) operand once; the (m,n) output rows stay cached
        let mut out = vec![0.0; m * n];
        for l in 0..k {
            let brow = &rhs.data[l * n..(l + 1) * n];
            for i in 0..m {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `self (m,k) · rhsᵀ` where rhs is (n,k). Streams contiguous rows of both.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul_nt")?;
        let (n, k2) = rhs.rows_cols("matmul_nt")?;
        if k != k2 {
            return Err(KrcError::dim("matmul_nt", format!("{:?} x {:?}ᵀ", self.shape, rhs.shape)));
        }
        // j outer: each rhs row is read once and dotted against all lhs rows,
        // four rows at a time so the streamed row is reused from registers
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let brow = &rhs.data[j * k..(j + 1) * k];
            let mut i = 0;
            while i + 4 <= m {
                let base = i * k;
                let (d0, d1, d2, d3) = dot4_slices(
                    &self.data[base..base + k],
                    &self.data[base + k..base + 2 * k],
                    &self.data[base + 2 * k..base + 3 * k],
                    &self.data[base + 3 * k..base + 4 * k],
                    brow,
                );
                out[i * n + j] = d0;
                out[(i + 1) * n + j] = d1;
                out[(i + 2) * n + j] = d2;
                out[(i + 3) * n + j] = d3;
                i += 4;
            }
            while i < m {
                out[i * n + j] = dot_slices(&self.data[i * k..(i + 1) * k], brow);
                i += 1;
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `selfᵀ · rhs` where self is (k,m) and rhs is (k,n).
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, m) = self.rows_cols("matmul_tn")?;
        let (k2, n) = rhs.rows_cols("matmul_tn")?;
        if k != k2 {
            return Err(KrcError::dim("matmul_tn", format!("{:?}ᵀ x {:?}", self.shape, rhs.shape)));
        }
        // i outer: each output row is built in one pass while the (k,n)
        // operand's rows stay cached across the m outer iterations
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let a = self.data[l * m + i];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Matrix-vector product `self (m,k) · x (k)`.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matvec")?;
        if x.rank() != 1 || x.len() != k {
            return Err(KrcError::dim("matvec", format!("{:?} x {:?}", self.shape, x.shape)));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = dot_slices(&self.data[i * k..(i + 1) * k], &x.data);
        }
        Ok(Tensor { shape: vec![m], data: out })
    }

    /// `selfᵀ · x` where self is (k,m), x is (k).
    pub fn matvec_t(&self, x: &Tensor) -> Result<Tensor> {
        let (k, m) = self.rows_cols("matvec_t")?;
        if x.rank() != 1 || x.len() != k {
            return Err(KrcError::dim("matvec_t", format!("{:?}ᵀ x {:?}", self.shape, x.shape)));
        }
        let mut out = vec![0.0; m];
        for l in 0..k {
            let arow = &self.data[l * m..(l + 1) * m];
            let a = x.data[l];
            for i in 0..m {
                out[i] += a * arow[i];
            }
        }
        Ok(Tensor { shape: vec![m], data: out })
    }

    pub fn outer(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 1 || rhs.rank() != 1 {
            return Err(KrcError::dim("outer", format!("{:?} x {:?}", self.shape, rhs.shape)));
        }
        let (m, n) = (self.len(), rhs.len());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = self.data[i] * rhs.data[j];
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// `(M + Mᵀ)/2`, forcing symmetry before factorizations.
    pub fn symmetrized(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("symmetrized")?;
        if m != n {
            return Err(KrcError::dim("symmetrized", format!("non-square {:?}", self.shape)));
        }
        let mut out = self.clone();
        for i in 0..m {
            for j in (i + 1)..m {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        Ok(out)
    }

    pub fn trace(&self) -> Result<f64> {
        let (m, n) = self.rows_cols("trace")?;
        if m != n {
            return Err(KrcError::dim("trace", format!("non-square {:?}", self.shape)));
        }
        Ok((0..m).map(|i| self.data[i * n + i]).sum())
    }

    pub fn diag(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("diag")?;
        if m != n {
            return Err(KrcError::dim("diag", format!("non-square {:?}", self.shape)));
        }
        Ok(Tensor::vector((0..m).map(|i| self.data[i * n + i]).collect()))
    }

    // ---- factorizations --------------------------------------------------

    /// Lower Cholesky factor of a symmetric positive-definite matrix.
    /// Symmetry is forced first; failure to factor reports a numeric error.
    pub fn cholesky(&self) -> Result<Tensor> {
        let s = self.symmetrized()?;
        let n = s.shape[0];
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut acc = s.data[i * n + j];
                for k in 0..j {
                    acc -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if acc <= 0.0 || !acc.is_finite() {
                        return Err(KrcError::numeric(
                            "cholesky",
                            format!("pivot {} is {:.3e}; matrix not positive definite", i, acc),
                        ));
                    }
                    l[i * n + i] = acc.sqrt();
                } else {
                    l[i * n + j] = acc / l[j * n + j];
                }
            }
        }
        Ok(Tensor { shape: vec![n, n], data: l })
    }

    /// Solve `L y = b` (forward) then `Lᵀ x = y` (backward) given lower L.
    pub fn chol_solve_vec(l: &Tensor, b: &Tensor) -> Result<Tensor> {
        let n = l.shape[0];
        if b.rank() != 1 || b.len() != n {
            return Err(KrcError::dim("chol_solve_vec", format!("{:?} vs {:?}", l.shape, b.shape)));
        }
        let mut x = b.data.clone();
        for i in 0..n {
            let mut acc = x[i];
            for k in 0..i {
                acc -= l.data[i * n + k] * x[k];
            }
            x[i] = acc / l.data[i * n + i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in (i + 1)..n {
                acc -= l.data[k * n + i] * x[k];
            }
            x[i] = acc / l.data[i * n + i];
        }
        Ok(Tensor { shape: vec![n], data: x })
    }

    /// Solve `M X = B` column-by-column from a precomputed lower factor of M.
    pub fn chol_solve_mat(l: &Tensor, b: &Tensor) -> Result<Tensor> {
        let n = l.shape[0];
        let (bn, bc) = b.rows_cols("chol_solve_mat")?;
        if bn != n {
            return Err(KrcError::dim("chol_solve_mat", format!("{:?} vs {:?}", l.shape, b.shape)));
        }
        let mut out = Tensor::zeros(vec![n, bc]);
        let mut col = Tensor::zeros(vec![n]);
        for j in 0..bc {
            for i in 0..n {
                col.data[i] = b.data[i * bc + j];
            }
            let x = Tensor::chol_solve_vec(l, &col)?;
            for i in 0..n {
                out.data[i * bc + j] = x.data[i];
            }
        }
        Ok(out)
    }

    /// log|M| from its lower Cholesky factor.
    pub fn logdet_from_chol(l: &Tensor) -> f64 {
        let n = l.shape[0];
        2.0 * (0..n).map(|i| l.data[i * n + i].ln()).sum::<f64>()
    }

    /// Inverse of a symmetric positive-definite matrix via Cholesky.
    pub fn spd_inverse(&self) -> Result<Tensor> {
        let l = self.cholesky()?;
        let n = self.shape[0];
        Tensor::chol_solve_mat(&l, &Tensor::eye(n))
    }
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// log N(x | mean, cov) with a dense covariance. Value-level helper used by
/// oracles and the planner; the differentiable version lives on the tape.
pub fn gaussian_logpdf(x: &Tensor, mean: &Tensor, cov: &Tensor) -> Result<f64> {
    let d = x.len();
    let l = cov.cholesky()?;
    let diff = x.sub(mean)?;
    let sol = Tensor::chol_solve_vec(&l, &diff)?;
    let quad = diff.dot(&sol)?;
    Ok(-0.5 * (d as f64 * LN_2PI + Tensor::logdet_from_chol(&l) + quad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        let ab3 = a.transpose().unwrap().matmul_tn(&b).unwrap();
        assert_eq!(ab, ab2);
        assert_eq!(ab, ab3);
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn identity_matmul_is_exact() {
        let m = Tensor::from_vec(vec![3, 3], (0..9).map(|i| i as f64 * 0.37).collect()).unwrap();
        let i3 = Tensor::eye(3);
        assert_eq!(i3.matmul(&m).unwrap(), m);
    }

    #[test]
    fn cholesky_solves() {
        let m = Tensor::from_vec(vec![2, 2], vec![4., 1., 1., 3.]).unwrap();
        let l = m.cholesky().unwrap();
        let b = Tensor::vector(vec![1., 2.]);
        let x = Tensor::chol_solve_vec(&l, &b).unwrap();
        let back = m.matvec(&x).unwrap();
        assert!((back.data()[0] - 1.0).abs() < 1e-12);
        assert!((back.data()[1] - 2.0).abs() < 1e-12);
        assert!((Tensor::logdet_from_chol(&l) - (11.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Tensor::from_vec(vec![2, 2], vec![1., 2., 2., 1.]).unwrap();
        assert!(matches!(m.cholesky(), Err(KrcError::Numeric { .. })));
    }

    #[test]
    fn gaussian_logpdf_standard_normal() {
        let x = Tensor::vector(vec![0.0]);
        let ll = gaussian_logpdf(&x, &Tensor::vector(vec![0.0]), &Tensor::eye(1)).unwrap();
        assert!((ll - (-0.5 * LN_2PI)).abs() < 1e-12);
    }
}
