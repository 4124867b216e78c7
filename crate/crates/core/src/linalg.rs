//! Dense Cholesky helpers shared by the likelihood and the predictive.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter ladder tried after a plain factorization fails.
pub const JITTER_LADDER: [f64; 2] = [1e-8, 1e-6];

/// Cholesky factor of a symmetric positive definite matrix, with the jitter that
/// was needed to obtain it.
pub struct SpdFactor {
    n: usize,
    /// Lower factor, row-major.
    l: Vec<f64>,
    pub jitter: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let split = a.len() / 8 * 8;
    let (ca, ra) = a.split_at(split);
    let (cb, rb) = b[..a.len()].split_at(split);
    for (x, y) in ca.chunks_exact(8).zip(cb.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row-major lower Cholesky factor of the lower triangle of `m` plus `shift * I`.
fn factorize(m: &DMatrix<f64>, shift: f64) -> Option<Vec<f64>> {
    let n = m.nrows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (i * n, j * n);
            let s = m[(i, j)] - dot(&l[ri..ri + j], &l[rj..rj + j]);
            if i == j {
                let d = s + shift;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[ri + i] = d.sqrt();
            } else {
                l[ri + j] = s / l[rj + j];
            }
        }
    }
    Some(l)
}

impl SpdFactor {
    /// Factorizes `m`. On failure, retries with `j * mean(diag)` added to the
    /// diagonal for each `j` in [`JITTER_LADDER`].
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::Dimension(format!("cholesky of a {n}x{} matrix", m.ncols())));
        }
        if let Some(l) = factorize(&m, 0.0) {
            return Ok(Self { n, l, jitter: 0.0 });
        }
        let mean_diag = m.diagonal().mean();
        for rel in JITTER_LADDER {
            let jitter = rel * mean_diag.abs().max(f64::MIN_POSITIVE);
            if let Some(l) = factorize(&m, jitter) {
                log::debug!("cholesky needed jitter {jitter:e} on a {n}x{n} matrix");
                return Ok(Self { n, l, jitter });
            }
        }
        let diag = m.diagonal();
        Err(Error::Numerical(format!(
            "cholesky failed on {n}x{n} matrix after jitter {:e}: diag min {:e}, max {:e}, mean {:e}",
            JITTER_LADDER[JITTER_LADDER.len() - 1] * mean_diag.abs(),
            diag.min(),
            diag.max(),
            mean_diag
        )))
    }

    pub fn l(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.l)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            x[i] = (x[i] - dot(row, &x[..i])) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            x[i] /= self.l[i * n + i];
            let xi = x[i];
            let row = &self.l[i * n..i * n + i];
            for (xk, lik) in x[..i].iter_mut().zip(row) {
                *xk -= lik * xi;
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        // column j of L⁻¹ is stored contiguously in xs[j * n..]
        let mut xs = vec![0.0; n * n];
        for j in 0..n {
            let x = &mut xs[j * n..(j + 1) * n];
            x[j] = 1.0 / self.l[j * n + j];
            for i in j + 1..n {
                let row = &self.l[i * n + j..i * n + i];
                x[i] = -dot(row, &x[j..i]) / self.l[i * n + i];
            }
        }
        let mut inv = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(&xs[i * n + j..(i + 1) * n], &xs[j * n + j..(j + 1) * n]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }
}

/// Log density of `N(mean, cov)` at `x`, by Cholesky.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let factor = SpdFactor::new(cov.clone())?;
    let r = x - mean;
    let alpha = factor.solve(&r);
    let d = x.len() as f64;
    Ok(-0.5 * r.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Lower Cholesky factor of `m`, or `None` if `m` is not numerically positive definite.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    factorize(m, 0.0).map(|l| DMatrix::from_row_slice(m.nrows(), m.nrows(), &l))
}
