//! Covariance functions and the coregionalized multi-output covariance.
//!
//! Every expert `k` has a latent surface `f_k = sum_s c_sk h_s`, where the `h_s`
//! are independent GPs with kernels `g_s`. Stacked covariance matrices use an
//! expert-major layout: the row for (expert `k`, observation `i`) is `k * n + i`,
//! which is the column-stacking of an `n x K` score matrix.

use std::fmt::Debug;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A stationary covariance function over `P`-dimensional pooling covariates.
///
/// Only [`SeArdKernel`] ships with the crate; latent processes may use any
/// implementation.
pub trait Kernel: Debug + Send + Sync {
    fn input_dim(&self) -> usize;

    /// Covariance between two points. Callers guarantee both have `input_dim` entries.
    fn eval(&self, a: &[f64], b: &[f64]) -> f64;

    fn gram(&self, za: &[Vec<f64>], zb: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(za.len(), zb.len(), |i, j| self.eval(&za[i], &zb[j]))
    }
}

/// Squared exponential kernel with one length scale per input.
#[derive(Debug, Clone, PartialEq)]
pub struct SeArdKernel {
    lengthscales: Vec<f64>,
    signal_sd: f64,
}

impl SeArdKernel {
    pub fn new(lengthscales: Vec<f64>, signal_sd: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::Domain("kernel needs at least one length scale".into()));
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Domain(format!("length scales must be positive: {lengthscales:?}")));
        }
        if !(signal_sd.is_finite() && signal_sd > 0.0) {
            return Err(Error::Domain(format!("signal sd must be positive: {signal_sd}")));
        }
        Ok(Self {
            lengthscales,
            signal_sd,
        })
    }

    /// Unit signal sd, as used for the latent processes.
    pub fn unit(lengthscales: Vec<f64>) -> Result<Self> {
        Self::new(lengthscales, 1.0)
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_sd(&self) -> f64 {
        self.signal_sd
    }
}

impl Kernel for SeArdKernel {
    fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            q += d * d;
        }
        self.signal_sd * self.signal_sd * (-0.5 * q).exp()
    }
}

/// SE-ARD kernel value with a dimension check.
pub fn se_ard(zi: &[f64], zj: &[f64], kernel: &SeArdKernel) -> Result<f64> {
    let p = kernel.input_dim();
    if zi.len() != p || zj.len() != p {
        return Err(Error::Dimension(format!(
            "kernel has {p} inputs, points have {} and {}",
            zi.len(),
            zj.len()
        )));
    }
    Ok(kernel.eval(zi, zj))
}

/// Latent kernels plus the `K x K` mixing matrix `C` (latent `s` by expert `k`).
#[derive(Debug)]
pub struct CrossCovSpec {
    kernels: Vec<Box<dyn Kernel>>,
    c: DMatrix<f64>,
}

impl CrossCovSpec {
    pub fn new(kernels: Vec<Box<dyn Kernel>>, c: DMatrix<f64>) -> Result<Self> {
        let k = kernels.len();
        if k == 0 {
            return Err(Error::Dimension("need at least one latent kernel".into()));
        }
        if c.shape() != (k, k) {
            return Err(Error::Dimension(format!(
                "mixing matrix is {:?} for {k} latent kernels",
                c.shape()
            )));
        }
        let p = kernels[0].input_dim();
        if kernels.iter().any(|g| g.input_dim() != p) {
            return Err(Error::Dimension("latent kernels disagree on input dimension".into()));
        }
        Ok(Self { kernels, c })
    }

    pub fn n_experts(&self) -> usize {
        self.c.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.kernels[0].input_dim()
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn kernels(&self) -> &[Box<dyn Kernel>] {
        &self.kernels
    }

    /// Whether `C` has full column rank (smallest singular value above 1e-10),
    /// which the signal scales need to be identifiable.
    pub fn is_identifiable(&self) -> bool {
        let sv = self.c.clone().singular_values();
        sv.min() > 1e-10
    }

    /// Expert-by-expert signal covariance at zero distance, `C^T C`.
    pub fn signal_cov(&self) -> DMatrix<f64> {
        self.c.transpose() * &self.c
    }
}

/// Rows of `z` as owned vectors.
pub fn rows_of(z: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..z.nrows())
        .map(|i| z.row(i).iter().copied().collect())
        .collect()
}

fn check_inputs(z: &DMatrix<f64>, spec: &CrossCovSpec) -> Result<()> {
    if z.ncols() != spec.input_dim() {
        return Err(Error::Dimension(format!(
            "covariates have {} columns, kernels expect {}",
            z.ncols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Combines per-latent Gram matrices into the stacked expert-major covariance.
pub(crate) fn mix_grams(grams: &[DMatrix<f64>], c: &DMatrix<f64>) -> DMatrix<f64> {
    let k = c.ncols();
    let (na, nb) = grams[0].shape();
    let mut out = DMatrix::zeros(k * na, k * nb);
    for e1 in 0..k {
        for e2 in 0..k {
            let mut block = out.view_mut((e1 * na, e2 * nb), (na, nb));
            for (s, g) in grams.iter().enumerate() {
                let w = c[(s, e1)] * c[(s, e2)];
                if w != 0.0 {
                    block.zip_apply(g, |o, v| *o += w * v);
                }
            }
        }
    }
    out
}

/// Cross-covariance between the stacked latent surfaces at `za` and at `zb`.
pub fn cross_cov(za: &DMatrix<f64>, zb: &DMatrix<f64>, spec: &CrossCovSpec) -> Result<DMatrix<f64>> {
    check_inputs(za, spec)?;
    check_inputs(zb, spec)?;
    let ra = rows_of(za);
    let rb = rows_of(zb);
    let grams: Vec<DMatrix<f64>> = spec.kernels.iter().map(|g| g.gram(&ra, &rb)).collect();
    Ok(mix_grams(&grams, &spec.c))
}

/// Adds `sigma ⊗ I_n` to an expert-major `Kn x Kn` matrix in place.
pub(crate) fn add_kron_identity(m: &mut DMatrix<f64>, sigma: &DMatrix<f64>, n: usize) {
    let k = sigma.nrows();
    for e1 in 0..k {
        for e2 in 0..k {
            let s = sigma[(e1, e2)];
            for i in 0..n {
                m[(e1 * n + i, e2 * n + i)] += s;
            }
        }
    }
}

/// Covariance of the stacked observed scores: `G(Z, Z) + sigma ⊗ I_n`.
pub fn marginal_cov(z: &DMatrix<f64>, spec: &CrossCovSpec, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = spec.n_experts();
    if sigma.shape() != (k, k) {
        return Err(Error::Dimension(format!(
            "noise covariance is {:?} for {k} experts",
            sigma.shape()
        )));
    }
    if (sigma - sigma.transpose()).abs().max() > 1e-12 * sigma.abs().max().max(1.0) {
        return Err(Error::Validation("noise covariance is not symmetric".into()));
    }
    if sigma.clone().cholesky().is_none() {
        return Err(Error::Validation("noise covariance is not positive definite".into()));
    }
    let mut m = cross_cov(z, z, spec)?;
    add_kron_identity(&mut m, sigma, z.nrows());
    Ok(m)
}
