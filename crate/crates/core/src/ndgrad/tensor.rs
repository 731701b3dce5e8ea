//! Dense row-major tensor. Rank is dynamic but almost everything in this
//! crate is rank 1 or 2; scalars are rank-1 tensors of length 1.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{NdError, NdResult};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> NdResult<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NdError::LengthMismatch {
                op: "Tensor::new",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Gaussian entries with the given std. Sampling happens in f64 so a
    /// seed produces the same stream regardless of `F`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Sole element of a length-1 tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: F) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> NdResult<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(NdError::LengthMismatch {
                op: "Tensor::reshaped",
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rank-2 transpose (copies).
    pub fn t(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> NdResult<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = Self::zeros(&[m, n]);
        matmul_into(m, k, n, &self.data, &other.data, &mut out.data);
        Ok(out)
    }

    /// Adds a row vector to every row (in place).
    pub fn add_row_inplace(&mut self, row: &[F]) {
        let n = self.cols();
        debug_assert_eq!(row.len(), n);
        for r in 0..self.rows() {
            for (x, &b) in self.row_mut(r).iter_mut().zip(row) {
                *x += b;
            }
        }
    }

    /// Column means of a rank-2 tensor.
    pub fn col_means(&self) -> Vec<F> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let inv = F::one() / F::from_f64(m as f64);
        for o in &mut out {
            *o *= inv;
        }
        out
    }

    /// Stacks rank-2 blocks with equal column counts on top of each other.
    pub fn vstack(parts: &[&Self]) -> NdResult<Self> {
        let cols = parts
            .first()
            .ok_or_else(|| NdError::Invalid("vstack of zero tensors".into()))?
            .cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(NdError::ShapeMismatch {
                    op: "vstack",
                    lhs: vec![rows, cols],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[rows, cols], data)
    }

    /// Concatenates rank-2 blocks with equal row counts side by side.
    pub fn hstack(parts: &[&Self]) -> NdResult<Self> {
        let rows = parts
            .first()
            .ok_or_else(|| NdError::Invalid("hstack of zero tensors".into()))?
            .rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Self::zeros(&[rows, total]);
        for i in 0..rows {
            let mut at = 0;
            for p in parts {
                if p.rows() != rows {
                    return Err(NdError::ShapeMismatch {
                        op: "hstack",
                        lhs: vec![rows, total],
                        rhs: p.shape.clone(),
                    });
                }
                out.data[i * total + at..i * total + at + p.cols()].copy_from_slice(p.row(i));
                at += p.cols();
            }
        }
        Ok(out)
    }

    /// Copies the given rows into a new tensor, in the order given.
    pub fn take_rows(&self, idx: &[usize]) -> Self {
        let n = self.cols();
        let mut out = Self::zeros(&[idx.len(), n]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    /// Lossless widening/narrowing through f64, used by checkpoint io.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> NdResult<Self> {
        Self::new(shape, data.iter().map(|&x| F::from_f64(x)).collect())
    }
}

/// out += a @ b, row-major, ikj order so the inner loop streams rows.
pub(crate) fn matmul_into<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    out: &mut [F],
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out += a @ b^T where a is [m,k] and b is [n,k].
pub(crate) fn matmul_nt_into<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    out: &mut [F],
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a^T @ b where a is [m,k] and b is [m,n]; out is [k,n].
pub(crate) fn matmul_tn_into<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    out: &mut [F],
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn matmul_matches_naive_dot_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        // Independent oracle: plain dot product per output cell.
        for i in 0..2 {
            for j in 0..2 {
                let mut dot = 0.0;
                for p in 0..3 {
                    dot += a.at2(i, p) * b.at2(p, j);
                }
                assert!((c.at2(i, j) - dot).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::<f64>::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(a.t().t(), a);
        assert_eq!(a.t().at2(2, 1), 6.0);
    }

    #[test]
    fn stack_and_take_rows() {
        let a = Tensor::<f64>::new(&[1, 2], vec![1., 2.]).unwrap();
        let b = Tensor::<f64>::new(&[2, 2], vec![3., 4., 5., 6.]).unwrap();
        let v = Tensor::vstack(&[&a, &b]).unwrap();
        assert_eq!(v.shape(), &[3, 2]);
        assert_eq!(v.row(2), &[5., 6.]);
        let picked = v.take_rows(&[2, 0]);
        assert_eq!(picked.row(0), &[5., 6.]);
        assert_eq!(picked.row(1), &[1., 2.]);
        let h = Tensor::hstack(&[&b, &b]).unwrap();
        assert_eq!(h.shape(), &[2, 4]);
        assert_eq!(h.row(0), &[3., 4., 3., 4.]);
    }

    #[test]
    fn randn_is_seed_deterministic_across_precisions() {
        let mut r1 = ChaCha20Rng::seed_from_u64(3);
        let mut r2 = ChaCha20Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[4, 4], 0.5, &mut r1);
        let b = Tensor::<f32>::randn(&[4, 4], 0.5, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, *x as f32);
        }
    }
}
