//! Small dense matrices: jittered Cholesky, triangular solves and a
//! Jacobi eigen-solver for the symmetric checks.

use crate::error::{FlurError, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(FlurError::Domain("ragged matrix rows".into()));
        }
        Ok(Matrix { rows: r, cols: c, data: rows.concat() })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(FlurError::Domain("matrix dimensions do not conform".into()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// AᵀA.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                for j in i..self.cols {
                    g.data[i * self.cols + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..self.cols {
            for j in 0..i {
                g.data[i * self.cols + j] = g.data[j * self.cols + i];
            }
        }
        g
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * c).collect() }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower Cholesky factor together with the diagonal jitter that was needed.
#[derive(Debug, Clone)]
pub struct Cholesky {
    pub l: Matrix,
    pub jitter: f64,
}

fn try_cholesky(m: &Matrix, jitter: f64) -> std::result::Result<Matrix, usize> {
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut s = m[(j, j)] + jitter;
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > 0.0) {
            return Err(j);
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Cholesky factor of a symmetric positive semi-definite matrix.
///
/// Tries no jitter first, then ε = 10^{−16..−10}·trace/n; fails beyond that.
pub fn cholesky(m: &Matrix) -> Result<Cholesky> {
    if m.rows != m.cols {
        return Err(FlurError::Domain("cholesky needs a square matrix".into()));
    }
    let n = m.rows;
    if n == 0 {
        return Ok(Cholesky { l: Matrix::zeros(0, 0), jitter: 0.0 });
    }
    let base = (m.trace() / n as f64).abs();
    let mut last_pivot = 0;
    for step in 0..=7 {
        let jitter = if step == 0 { 0.0 } else { base * 10f64.powi(step - 17) };
        match try_cholesky(m, jitter) {
            Ok(l) => return Ok(Cholesky { l, jitter }),
            Err(p) => last_pivot = p,
        }
    }
    Err(FlurError::NotPositiveDefinite { pivot: last_pivot })
}

impl Cholesky {
    /// Solves (LLᵀ) x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.l.rows;
        let mut inv = Matrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// Inverse of a symmetric positive definite matrix via column scaling and
/// an unjittered Cholesky factorisation.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    let n = m.rows;
    let s: Vec<f64> = (0..n).map(|i| 1.0 / m[(i, i)].abs().sqrt().max(f64::MIN_POSITIVE)).collect();
    let scaled = Matrix::from_fn(n, n, |i, j| m[(i, j)] * s[i] * s[j]);
    let l = try_cholesky(&scaled, 0.0).map_err(|pivot| FlurError::NotPositiveDefinite { pivot })?;
    let inv = Cholesky { l, jitter: 0.0 }.inverse();
    Ok(Matrix::from_fn(n, n, |i, j| inv[(i, j)] * s[i] * s[j]))
}

/// Solves the SPD system m x = b with column scaling.
pub fn spd_solve(m: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = m.rows;
    let s: Vec<f64> = (0..n).map(|i| 1.0 / m[(i, i)].abs().sqrt().max(f64::MIN_POSITIVE)).collect();
    let scaled = Matrix::from_fn(n, n, |i, j| m[(i, j)] * s[i] * s[j]);
    let l = try_cholesky(&scaled, 0.0).map_err(|pivot| FlurError::NotPositiveDefinite { pivot })?;
    let bs: Vec<f64> = b.iter().zip(&s).map(|(b, s)| b * s).collect();
    let x = Cholesky { l, jitter: 0.0 }.solve(&bs);
    Ok(x.iter().zip(&s).map(|(x, s)| x * s).collect())
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows;
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        let scale: f64 = a.data.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev = a.diagonal();
    ev.sort_by(f64::total_cmp);
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_checkable_factors() {
        let c = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(c.l, Matrix::identity(3));
        assert_eq!(c.jitter, 0.0);
        let m = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let c = cholesky(&m).unwrap();
        let want = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        assert!(c.l.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn semidefinite_needs_small_jitter_and_indefinite_fails() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let c = cholesky(&m).unwrap();
        assert!(c.jitter > 0.0 && c.jitter <= 1e-10 * m.trace() / 2.0);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(cholesky(&bad).is_err());
    }

    #[test]
    fn inverse_and_eigenvalues() {
        let m = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]]).unwrap();
        let inv = spd_inverse(&m).unwrap();
        assert!(m.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-14);
        let x = spd_solve(&m, &[1.0, 2.0, 3.0]).unwrap();
        let back = m.matvec(&x);
        assert!((back[2] - 3.0).abs() < 1e-14);
        let ev = symmetric_eigenvalues(&m);
        let tr: f64 = ev.iter().sum();
        assert!((tr - 9.0).abs() < 1e-12);
        let d2 = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&d2);
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
    }
}
