//! Small dense linear algebra: the `d × d` covariance systems of the market
//! model and the normal equations of the cross-sectional regressions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn diagonal(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                for c in 0..other.cols {
                    out[(r, c)] += a * other[(k, c)];
                }
            }
        }
        out
    }

    /// `A Aᵀ`.
    pub fn gram_outer(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..=i {
                let v: T = (0..self.cols).map(|k| self[(i, k)] * self[(j, k)]).sum();
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn mat_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mat_vec_into(x, &mut out);
        out
    }

    pub fn mat_vec_into(&self, x: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = (0..self.cols).map(|c| self[(r, c)] * x[c]).sum();
        }
    }

    /// `Aᵀ x`.
    pub fn transpose_vec_into(&self, x: &[T], out: &mut [T]) {
        for (c, o) in out.iter_mut().enumerate().take(self.cols) {
            *o = (0..self.rows).map(|r| self[(r, c)] * x[r]).sum();
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> T {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self[(r, c)].abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Cholesky factorisation of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: Matrix<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn new(a: &Matrix<T>, context: &str) -> Result<Self> {
        let n = a.rows();
        if n != a.cols() {
            return Err(Error::Config(format!("{context}: matrix is not square")));
        }
        let mut l = Matrix::zeros(n, n);
        let scale = a.max_abs();
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > scale * T::epsilon() * T::lit(16.0)) || !d.is_finite() {
                return Err(Error::Singular {
                    context: context.to_string(),
                    condition: f64::INFINITY,
                });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn solve_into(&self, b: &[T], x: &mut [T]) {
        let n = self.lower.rows();
        let l = &self.lower;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); b.len()];
        self.solve_into(b, &mut x);
        x
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.lower.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        let mut col = vec![T::zero(); n];
        for c in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[c] = T::one();
            self.solve_into(&e, &mut col);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv
    }
}

/// Inverse of an SPD matrix together with its ∞-norm condition number.
pub fn spd_inverse<T: Real>(a: &Matrix<T>, context: &str) -> Result<(Matrix<T>, T)> {
    let chol = Cholesky::new(a, context).map_err(|e| match e {
        Error::Singular { context, .. } => Error::Singular {
            context,
            condition: f64::INFINITY,
        },
        other => other,
    })?;
    let inv = chol.inverse();
    let cond = a.norm_inf() * inv.norm_inf();
    if !inv.is_finite() || !cond.is_finite() {
        return Err(Error::Singular {
            context: context.to_string(),
            condition: cond.as_f64(),
        });
    }
    Ok((inv, cond))
}

/// Accumulates `XᵀX` and `Xᵀy` for several targets sharing one design.
#[derive(Debug, Clone)]
pub struct NormalEquations<T> {
    p: usize,
    gram: Vec<T>,
    rhs: Vec<Vec<T>>,
    sum_y: Vec<T>,
    sum_yy: Vec<T>,
    n: usize,
}

impl<T: Real> NormalEquations<T> {
    pub fn new(p: usize, targets: usize) -> Self {
        Self {
            p,
            gram: vec![T::zero(); p * p],
            rhs: vec![vec![T::zero(); p]; targets],
            sum_y: vec![T::zero(); targets],
            sum_yy: vec![T::zero(); targets],
            n: 0,
        }
    }

    pub fn add_row(&mut self, x: &[T], ys: &[T]) {
        let p = self.p;
        for i in 0..p {
            let xi = x[i];
            if xi == T::zero() {
                continue;
            }
            for j in 0..=i {
                self.gram[i * p + j] += xi * x[j];
            }
        }
        for (t, &y) in ys.iter().enumerate() {
            for i in 0..p {
                self.rhs[t][i] += x[i] * y;
            }
            self.sum_y[t] += y;
            self.sum_yy[t] += y * y;
        }
        self.n += 1;
    }

    /// Solves by pivoted Cholesky on the unit-diagonal scaled Gram matrix;
    /// columns whose Schur complement drops below `rcond` are removed.
    pub fn solve(&self, rcond: T) -> LeastSquaresFit<T> {
        let p = self.p;
        let mut g = Matrix::zeros(p, p);
        for i in 0..p {
            for j in 0..=i {
                g[(i, j)] = self.gram[i * p + j];
                g[(j, i)] = self.gram[i * p + j];
            }
        }
        let scale: Vec<T> = (0..p)
            .map(|i| {
                let d = g[(i, i)];
                if d > T::zero() {
                    T::one() / d.sqrt()
                } else {
                    T::zero()
                }
            })
            .collect();
        for i in 0..p {
            for j in 0..p {
                g[(i, j)] *= scale[i] * scale[j];
            }
        }
        // pivoted Cholesky, in place on a working copy
        let mut a = g.clone();
        let mut perm: Vec<usize> = (0..p).collect();
        let mut rank = 0;
        let mut first_pivot = T::zero();
        let mut last_pivot = T::zero();
        for k in 0..p {
            let (best, best_val) = (k..p)
                .map(|i| (i, a[(perm[i], perm[i])]))
                .fold((k, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
            if !(best_val > rcond) || scale[perm[best]] == T::zero() {
                break;
            }
            perm.swap(k, best);
            let pk = perm[k];
            let d = best_val.sqrt();
            if k == 0 {
                first_pivot = best_val;
            }
            last_pivot = best_val;
            a[(pk, pk)] = d;
            for &pi in &perm[k + 1..p] {
                a[(pi, pk)] /= d;
            }
            for i in k + 1..p {
                let pi = perm[i];
                for j in k + 1..=i {
                    let pj = perm[j];
                    let v = a[(pi, pk)] * a[(pj, pk)];
                    a[(pi, pj)] -= v;
                    if pi != pj {
                        a[(pj, pi)] -= v;
                    }
                }
            }
            rank += 1;
        }
        let active: Vec<usize> = perm[..rank].to_vec();
        let mut sub = Matrix::zeros(rank, rank);
        for (r, &i) in active.iter().enumerate() {
            for (c, &j) in active.iter().enumerate() {
                sub[(r, c)] = g[(i, j)];
            }
        }
        let chol = Cholesky::new(&sub, "regression").ok();
        let nt = T::from_usize(self.n.max(1)).unwrap();
        let mut coefficients = Vec::with_capacity(self.rhs.len());
        let mut r2 = Vec::with_capacity(self.rhs.len());
        for (t, rhs) in self.rhs.iter().enumerate() {
            let mut coef = vec![T::zero(); p];
            if let Some(ch) = &chol {
                let b: Vec<T> = active.iter().map(|&i| rhs[i] * scale[i]).collect();
                let x = ch.solve(&b);
                for (r, &i) in active.iter().enumerate() {
                    coef[i] = x[r] * scale[i];
                }
            }
            // SS_res = yᵀy - 2 cᵀXᵀy + cᵀ XᵀX c = yᵀy - cᵀXᵀy at the optimum
            let explained: T = coef.iter().zip(rhs).map(|(&c, &b)| c * b).sum();
            let ss_res = (self.sum_yy[t] - explained).max(T::zero());
            let mean = self.sum_y[t] / nt;
            let ss_tot = self.sum_yy[t] - nt * mean * mean;
            r2.push(if ss_tot > T::epsilon() * self.sum_yy[t].abs().max(T::min_positive_value()) {
                T::one() - ss_res / ss_tot
            } else {
                T::one()
            });
            coefficients.push(coef);
        }
        let condition = if rank > 0 && last_pivot > T::zero() {
            first_pivot / last_pivot
        } else {
            T::infinity()
        };
        LeastSquaresFit {
            coefficients,
            rank,
            columns: p,
            condition,
            r2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LeastSquaresFit<T> {
    /// One coefficient vector per target.
    pub coefficients: Vec<Vec<T>>,
    pub rank: usize,
    pub columns: usize,
    /// Pivot ratio of the scaled Gram matrix.
    pub condition: T,
    pub r2: Vec<T>,
}

impl<T: Real> LeastSquaresFit<T> {
    pub fn is_reduced(&self) -> bool {
        self.rank < self.columns
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_inverse_2x2() {
        let a = Matrix::from_row_major(2, 2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let (inv, cond) = spd_inverse(&a, "t").unwrap();
        let prod = a.matmul(&inv);
        for i in 0..2 {
            for j in 0..2 {
                let e: f64 = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - e).abs() < 1e-14);
            }
        }
        assert!(cond >= 1.0);
    }

    #[test]
    fn singular_detected() {
        let a = Matrix::from_row_major(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(spd_inverse(&a, "t"), Err(Error::Singular { .. })));
        let z = Matrix::<f64>::zeros(1, 1);
        assert!(spd_inverse(&z, "t").is_err());
    }

    #[test]
    fn least_squares_recovers_line() {
        let mut ne = NormalEquations::new(2, 1);
        for i in 0..50 {
            let x = i as f64 / 10.0;
            ne.add_row(&[1.0, x], &[3.0 - 2.0 * x]);
        }
        let fit = ne.solve(1e-12);
        assert_eq!(fit.rank, 2);
        assert!((fit.coefficients[0][0] - 3.0).abs() < 1e-10);
        assert!((fit.coefficients[0][1] + 2.0).abs() < 1e-10);
        assert!((fit.r2[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn collinear_columns_reduced() {
        let mut ne = NormalEquations::new(3, 1);
        for i in 0..20 {
            let x = i as f64;
            // third column duplicates the intercept
            ne.add_row(&[1.0, x, 5.0], &[1.0 + x]);
        }
        let fit = ne.solve(1e-10);
        assert_eq!(fit.rank, 2);
        assert!(fit.is_reduced());
        let pred = |x: f64| fit.coefficients[0][0] + fit.coefficients[0][1] * x + fit.coefficients[0][2] * 5.0;
        assert!((pred(7.0) - 8.0).abs() < 1e-9);
    }

    #[test]
    fn constant_design_is_rank_one() {
        let mut ne = NormalEquations::new(3, 1);
        for i in 0..10 {
            ne.add_row(&[1.0, 2.0, 4.0], &[i as f64]);
        }
        let fit = ne.solve(1e-10);
        assert_eq!(fit.rank, 1);
        let pred: f64 = dot(&fit.coefficients[0], &[1.0, 2.0, 4.0]);
        assert!((pred - 4.5).abs() < 1e-12);
    }
}
