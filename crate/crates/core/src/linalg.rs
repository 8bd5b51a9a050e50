//! Dense LU factorisation for the small systems the solvers and objectives need.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Condition numbers above this are reported as singular.
pub const MAX_CONDITION: f64 = 1e13;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    n: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![F::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_rows(n: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Dimension(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.n + c]
    }

    #[inline]
    pub fn add_to(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.n + c] += v;
    }

    /// `self += s * a b^T`.
    pub fn add_outer(&mut self, s: F, a: &[F], b: &[F]) {
        for (r, &ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.n..(r + 1) * self.n];
            let f = s * ar;
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += f * bc;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_diagonal(&mut self, s: F) {
        for i in 0..self.n {
            self.data[i * self.n + i] += s;
        }
    }

    pub fn mul_vec(&self, v: &[F], out: &mut [F]) {
        for (r, o) in out.iter_mut().enumerate().take(self.n) {
            *o = crate::scalar::dot(&self.data[r * self.n..(r + 1) * self.n], v);
        }
    }

    /// `self^T v`.
    pub fn mul_vec_transposed(&self, v: &[F], out: &mut [F]) {
        out.iter_mut().for_each(|o| *o = F::zero());
        for (r, &vr) in v.iter().enumerate().take(self.n) {
            for c in 0..self.n {
                out[c] += self.data[r * self.n + c] * vr;
            }
        }
    }

    fn norm1(&self) -> F {
        (0..self.n)
            .map(|c| (0..self.n).map(|r| self.get(r, c).abs()).sum::<F>())
            .fold(F::zero(), F::max)
    }

    pub fn lu(&self) -> Result<Lu<F>> {
        Lu::factor(self)
    }

    pub fn solve(&self, b: &[F]) -> Result<Vec<F>> {
        self.lu()?.solve(b)
    }

    pub fn inverse(&self) -> Result<Matrix<F>> {
        self.lu()?.inverse()
    }
}

/// LU factorisation with partial pivoting and a 1-norm condition number.
#[derive(Debug, Clone)]
pub struct Lu<F> {
    n: usize,
    lu: Vec<F>,
    perm: Vec<usize>,
    condition: f64,
}

impl<F: Scalar> Lu<F> {
    fn factor(m: &Matrix<F>) -> Result<Self> {
        let n = m.n;
        if n == 0 {
            return Err(Error::Dimension("empty matrix".into()));
        }
        if !m.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix entry"));
        }
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let norm = m.norm1();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&a, &b| lu[a * n + k].abs().partial_cmp(&lu[b * n + k].abs()).unwrap())
                .unwrap();
            if lu[p * n + k] == F::zero() {
                return Err(Error::SingularMatrix { context: "lu".into(), condition: f64::INFINITY });
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    let v = lu[k * n + c];
                    lu[r * n + c] -= f * v;
                }
            }
        }
        let mut out = Self { n, lu, perm, condition: 0.0 };
        let inv = out.inverse()?;
        let condition = (norm * inv.norm1()).to_f64_lossy();
        out.condition = condition;
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularMatrix { context: "lu".into(), condition });
        }
        Ok(out)
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, b: &[F]) -> Result<Vec<F>> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::Dimension(format!("rhs length {} for {n}x{n} system", b.len())));
        }
        let mut x: Vec<F> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            for c in 0..r {
                let v = x[c];
                x[r] -= self.lu[r * n + c] * v;
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                let v = x[c];
                x[r] -= self.lu[r * n + c] * v;
            }
            x[r] /= self.lu[r * n + r];
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Matrix<F>> {
        let n = self.n;
        let mut inv = Matrix::zeros(n);
        let mut e = vec![F::zero(); n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = F::zero());
            e[c] = F::one();
            let col = self.solve(&e)?;
            for r in 0..n {
                inv.data[r * n + c] = col[r];
            }
        }
        Ok(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn solves_small_system() {
        let m = Matrix::from_rows(2, vec![0.0, 2.0, 1.0, 1.0]).unwrap();
        let x = m.solve(&[4.0, 3.0]).unwrap();
        assert!((x[0] - 1.0f64).abs() < 1e-15 && (x[1] - 2.0f64).abs() < 1e-15);
    }

    #[test]
    fn singular_reported() {
        let m = Matrix::from_rows(2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(m.solve(&[1.0, 1.0]), Err(Error::SingularMatrix { .. })));
        let z = Matrix::<f64>::zeros(1);
        assert!(matches!(z.solve(&[0.0]), Err(Error::SingularMatrix { .. })));
    }

    proptest! {
        #[test]
        fn inverse_roundtrip(entries in prop::collection::vec(-3.0f64..3.0, 9)) {
            let mut m = Matrix::from_rows(3, entries).unwrap();
            m.add_diagonal(10.0);
            let inv = m.inverse().unwrap();
            for r in 0..3 {
                for c in 0..3 {
                    let v: f64 = (0..3).map(|k| m.get(r, k) * inv.get(k, c)).sum();
                    let expected = if r == c { 1.0 } else { 0.0 };
                    prop_assert!((v - expected).abs() < 1e-12);
                }
            }
        }
    }
}
