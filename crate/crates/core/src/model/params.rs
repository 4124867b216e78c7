use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{CrossCovSpec, Kernel, SeArdKernel};
use crate::linalg::cholesky_lower;

/// Whether the between-expert noise covariance is a full matrix or diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseStructure {
    #[default]
    Full,
    Diagonal,
}

/// One posterior state of the multi-output model.
///
/// Latent process `s` carries the length scales in column `s` of `lengthscales`
/// (`P x K`). Its mixing weights are fixed by `C^T C = diag(τ) Ω_sig diag(τ)`
/// with `C` upper triangular, so latent `s` loads on experts `s..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lengthscales: DMatrix<f64>,
    pub means: Vec<f64>,
    pub signal_sd: Vec<f64>,
    pub signal_corr: DMatrix<f64>,
    pub noise_sd: Vec<f64>,
    pub noise_corr: DMatrix<f64>,
}

impl HyperParams {
    pub fn n_experts(&self) -> usize {
        self.means.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.lengthscales.nrows()
    }

    /// Unit length scales, zero means, unit scales and identity correlations.
    pub fn default_for(k: usize, p: usize) -> Self {
        Self {
            lengthscales: DMatrix::from_element(p, k, 1.0),
            means: vec![0.0; k],
            signal_sd: vec![1.0; k],
            signal_corr: DMatrix::identity(k, k),
            noise_sd: vec![1.0; k],
            noise_corr: DMatrix::identity(k, k),
        }
    }

    /// Checks shapes, positivity, the length-scale bound, and that both
    /// correlation matrices are symmetric positive definite with unit diagonal.
    pub fn validate(&self, lengthscale_upper: f64) -> Result<()> {
        let k = self.n_experts();
        if k == 0 {
            return Err(Error::Validation("hyperparameters need K >= 1".into()));
        }
        if self.lengthscales.ncols() != k
            || self.signal_sd.len() != k
            || self.noise_sd.len() != k
            || self.signal_corr.shape() != (k, k)
            || self.noise_corr.shape() != (k, k)
        {
            return Err(Error::Dimension("hyperparameter blocks disagree on K".into()));
        }
        if self
            .lengthscales
            .iter()
            .any(|l| !(*l > 0.0 && *l < lengthscale_upper))
        {
            return Err(Error::Validation(format!(
                "length scales must lie in (0, {lengthscale_upper})"
            )));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("means must be finite".into()));
        }
        if self
            .signal_sd
            .iter()
            .chain(&self.noise_sd)
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Validation("scales must be positive".into()));
        }
        check_corr(&self.signal_corr, "signal")?;
        check_corr(&self.noise_corr, "noise")?;
        Ok(())
    }

    /// Upper-triangular mixing matrix `C` (latent by expert).
    pub fn mixing(&self) -> Result<DMatrix<f64>> {
        let l = cholesky_lower(&self.signal_corr)
            .ok_or_else(|| Error::Numerical("signal correlation is not positive definite".into()))?;
        let k = self.n_experts();
        let ld = DMatrix::from_fn(k, k, |a, s| self.signal_sd[a] * l[(a, s)]);
        Ok(ld.transpose())
    }

    /// `Σ = diag(σ_ε) Ω_noise diag(σ_ε)`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        let k = self.n_experts();
        DMatrix::from_fn(k, k, |a, b| {
            self.noise_sd[a] * self.noise_corr[(a, b)] * self.noise_sd[b]
        })
    }

    pub fn kernels(&self) -> Result<Vec<SeArdKernel>> {
        (0..self.n_experts())
            .map(|s| SeArdKernel::unit(self.lengthscales.column(s).iter().copied().collect()))
            .collect()
    }

    pub fn cross_cov_spec(&self) -> Result<CrossCovSpec> {
        let kernels = self
            .kernels()?
            .into_iter()
            .map(|k| Box::new(k) as Box<dyn Kernel>)
            .collect();
        CrossCovSpec::new(kernels, self.mixing()?)
    }

    /// Applies an expert permutation: new expert `e` is old expert `perm[e]`.
    pub fn permute_experts(&self, perm: &[usize]) -> Self {
        let k = self.n_experts();
        Self {
            lengthscales: DMatrix::from_fn(self.n_covariates(), k, |p, e| self.lengthscales[(p, perm[e])]),
            means: perm.iter().map(|&e| self.means[e]).collect(),
            signal_sd: perm.iter().map(|&e| self.signal_sd[e]).collect(),
            signal_corr: DMatrix::from_fn(k, k, |a, b| self.signal_corr[(perm[a], perm[b])]),
            noise_sd: perm.iter().map(|&e| self.noise_sd[e]).collect(),
            noise_corr: DMatrix::from_fn(k, k, |a, b| self.noise_corr[(perm[a], perm[b])]),
        }
    }
}

fn check_corr(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let k = m.nrows();
    for a in 0..k {
        if (m[(a, a)] - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("{what} correlation diagonal must be 1")));
        }
        for b in 0..a {
            if (m[(a, b)] - m[(b, a)]).abs() > 1e-12 || m[(a, b)].abs() >= 1.0 {
                return Err(Error::Validation(format!(
                    "{what} correlation must be symmetric with entries in (-1, 1)"
                )));
            }
        }
    }
    if cholesky_lower(m).is_none() {
        return Err(Error::Validation(format!("{what} correlation is not positive definite")));
    }
    Ok(())
}

/// Index map of the flat unconstrained parameter vector.
///
/// Blocks, in order: logit length scales (latent-major, `K*P`), means (`K`),
/// log signal sds (`K`), signal canonical partial correlations (`K(K-1)/2`,
/// row-wise over the strict lower triangle), log noise sds (`K`), and noise
/// canonical partial correlations (absent for diagonal noise).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_experts: usize,
    pub n_covariates: usize,
    pub noise: NoiseStructure,
}

impl ParamLayout {
    pub fn new(n_experts: usize, n_covariates: usize, noise: NoiseStructure) -> Self {
        Self {
            n_experts,
            n_covariates,
            noise,
        }
    }

    pub fn n_corr(&self) -> usize {
        self.n_experts * (self.n_experts - 1) / 2
    }

    pub fn lengthscale(&self, p: usize, s: usize) -> usize {
        s * self.n_covariates + p
    }

    pub fn mean(&self, k: usize) -> usize {
        self.n_experts * self.n_covariates + k
    }

    pub fn signal_sd(&self, k: usize) -> usize {
        self.mean(0) + self.n_experts + k
    }

    pub fn signal_cpc(&self, c: usize) -> usize {
        self.signal_sd(0) + self.n_experts + c
    }

    pub fn noise_sd(&self, k: usize) -> usize {
        self.signal_cpc(0) + self.n_corr() + k
    }

    pub fn noise_cpc(&self, c: usize) -> usize {
        self.noise_sd(0) + self.n_experts + c
    }

    pub fn n_noise_cpc(&self) -> usize {
        match self.noise {
            NoiseStructure::Full => self.n_corr(),
            NoiseStructure::Diagonal => 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.noise_cpc(0) + self.n_noise_cpc()
    }

    /// Human-readable coordinate names, one per unconstrained coordinate.
    pub fn coordinate_names(&self) -> Vec<String> {
        let (k, p) = (self.n_experts, self.n_covariates);
        let mut out = Vec::with_capacity(self.dim());
        for s in 0..k {
            for q in 0..p {
                out.push(format!("logit_l_{}_{}", q + 1, s + 1));
            }
        }
        out.extend((0..k).map(|e| format!("m_{}", e + 1)));
        out.extend((0..k).map(|e| format!("log_tau_{}", e + 1)));
        out.extend(cpc_pairs(k).into_iter().map(|(i, j)| format!("cpc_sig_{}_{}", j + 1, i + 1)));
        out.extend((0..k).map(|e| format!("log_sigma_eps_{}", e + 1)));
        if self.noise == NoiseStructure::Full {
            out.extend(cpc_pairs(k).into_iter().map(|(i, j)| format!("cpc_noise_{}_{}", j + 1, i + 1)));
        }
        out
    }
}

/// `(row, column)` of each canonical partial correlation, in storage order.
pub fn cpc_pairs(k: usize) -> Vec<(usize, usize)> {
    (1..k).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
}

/// Unit-diagonal lower Cholesky factor built from canonical partial
/// correlations `cpc` (each in (-1, 1)), stored as in [`cpc_pairs`].
pub fn corr_cholesky_from_cpc(cpc: &[f64], k: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(k, k);
    l[(0, 0)] = 1.0;
    let mut c = 0;
    for i in 1..k {
        let mut sum_sq: f64 = 0.0;
        for j in 0..i {
            let v = cpc[c] * (1.0 - sum_sq).max(0.0).sqrt();
            l[(i, j)] = v;
            sum_sq += v * v;
            c += 1;
        }
        l[(i, i)] = (1.0 - sum_sq).max(0.0).sqrt();
    }
    l
}

/// Derivatives of [`corr_cholesky_from_cpc`] with respect to each CPC.
pub fn corr_cholesky_tangents(cpc: &[f64], k: usize, l: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let pairs = cpc_pairs(k);
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j0) in &pairs {
        let mut dl = DMatrix::zeros(k, k);
        let first = pairs.iter().position(|&(r, _)| r == i).unwrap();
        let mut sum_sq: f64 = (0..j0).map(|m| l[(i, m)] * l[(i, m)]).sum();
        let mut dsum = 0.0;
        for j in j0..i {
            let root = (1.0 - sum_sq).max(0.0).sqrt();
            let z = cpc[first + j];
            let d = if j == j0 {
                root
            } else if root > 0.0 {
                -z * dsum / (2.0 * root)
            } else {
                0.0
            };
            dl[(i, j)] = d;
            dsum += 2.0 * l[(i, j)] * d;
            sum_sq += l[(i, j)] * l[(i, j)];
        }
        dl[(i, i)] = if l[(i, i)] > 0.0 {
            -dsum / (2.0 * l[(i, i)])
        } else {
            0.0
        };
        out.push(dl);
    }
    out
}

/// Inverse of [`corr_cholesky_from_cpc`] for a unit-diagonal factor.
pub fn cpc_from_corr_cholesky(l: &DMatrix<f64>) -> Vec<f64> {
    let k = l.nrows();
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for i in 1..k {
        let mut sum_sq: f64 = 0.0;
        for j in 0..i {
            let root = (1.0 - sum_sq).max(f64::MIN_POSITIVE).sqrt();
            out.push((l[(i, j)] / root).clamp(-1.0, 1.0));
            sum_sq += l[(i, j)] * l[(i, j)];
        }
    }
    out
}

/// Column index of each CPC, which sets its Jacobian exponent.
pub(crate) fn cpc_columns(k: usize) -> Vec<usize> {
    cpc_pairs(k).into_iter().map(|(_, j)| j).collect()
}

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
pub(crate) fn log1m_tanh_sq(u: f64) -> f64 {
    let a = u.abs();
    (4.0f64).ln() - 2.0 * a - 2.0 * (-2.0 * a).exp().ln_1p()
}

/// `log(sigmoid(u))`, stable for large `|u|`.
pub(crate) fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Maps an unconstrained vector to hyperparameters. Returns the parameters and
/// the log absolute Jacobian determinant of the whole transform, where the
/// correlation blocks contribute the Jacobian onto the correlation matrix itself.
pub fn constrain(layout: &ParamLayout, u: &[f64], lengthscale_upper: f64) -> Result<(HyperParams, f64)> {
    if u.len() != layout.dim() {
        return Err(Error::Dimension(format!(
            "unconstrained vector has {} entries, layout needs {}",
            u.len(),
            layout.dim()
        )));
    }
    let (k, p) = (layout.n_experts, layout.n_covariates);
    let mut log_jac = 0.0;

    let lengthscales = DMatrix::from_fn(p, k, |q, s| {
        let x = u[layout.lengthscale(q, s)];
        lengthscale_upper * sigmoid(x)
    });
    for s in 0..k {
        for q in 0..p {
            let x = u[layout.lengthscale(q, s)];
            log_jac += lengthscale_upper.ln() + log_sigmoid(x) + log_sigmoid(-x);
        }
    }

    let means = (0..k).map(|e| u[layout.mean(e)]).collect();
    let signal_sd = (0..k)
        .map(|e| {
            let x = u[layout.signal_sd(e)];
            log_jac += x;
            x.exp()
        })
        .collect();
    let noise_sd = (0..k)
        .map(|e| {
            let x = u[layout.noise_sd(e)];
            log_jac += x;
            x.exp()
        })
        .collect();

    let cols = cpc_columns(k);
    let mut corr_block = |offset: usize, count: usize| -> DMatrix<f64> {
        if count == 0 {
            return DMatrix::identity(k, k);
        }
        let raw = &u[offset..offset + count];
        let cpc: Vec<f64> = raw.iter().map(|x| x.tanh()).collect();
        for (c, x) in raw.iter().enumerate() {
            let w = 1.0 + 0.5 * (k as f64 - cols[c] as f64 - 2.0);
            log_jac += w * log1m_tanh_sq(*x);
        }
        let l = corr_cholesky_from_cpc(&cpc, k);
        let mut omega = &l * l.transpose();
        for a in 0..k {
            omega[(a, a)] = 1.0;
        }
        omega
    };
    let signal_corr = corr_block(layout.signal_cpc(0), layout.n_corr());
    let noise_corr = corr_block(layout.noise_cpc(0), layout.n_noise_cpc());

    Ok((
        HyperParams {
            lengthscales,
            means,
            signal_sd,
            signal_corr,
            noise_sd,
            noise_corr,
        },
        log_jac,
    ))
}

/// Inverse of [`constrain`].
pub fn unconstrain(layout: &ParamLayout, h: &HyperParams, lengthscale_upper: f64) -> Result<Vec<f64>> {
    h.validate(lengthscale_upper)?;
    let (k, p) = (layout.n_experts, layout.n_covariates);
    if h.n_experts() != k || h.n_covariates() != p {
        return Err(Error::Dimension("hyperparameters do not match layout".into()));
    }
    let mut u = vec![0.0; layout.dim()];
    for s in 0..k {
        for q in 0..p {
            let r = h.lengthscales[(q, s)] / lengthscale_upper;
            u[layout.lengthscale(q, s)] = (r / (1.0 - r)).ln();
        }
    }
    for e in 0..k {
        u[layout.mean(e)] = h.means[e];
        u[layout.signal_sd(e)] = h.signal_sd[e].ln();
        u[layout.noise_sd(e)] = h.noise_sd[e].ln();
    }
    let to_raw = |m: &DMatrix<f64>| -> Result<Vec<f64>> {
        let l = cholesky_lower(m).ok_or_else(|| Error::Numerical("correlation not PD".into()))?;
        Ok(cpc_from_corr_cholesky(&l).into_iter().map(|z| z.atanh()).collect())
    };
    for (c, x) in to_raw(&h.signal_corr)?.into_iter().enumerate() {
        u[layout.signal_cpc(c)] = x;
    }
    match layout.noise {
        NoiseStructure::Full => {
            for (c, x) in to_raw(&h.noise_corr)?.into_iter().enumerate() {
                u[layout.noise_cpc(c)] = x;
            }
        }
        NoiseStructure::Diagonal => {
            if (&h.noise_corr - DMatrix::<f64>::identity(k, k)).abs().max() > 1e-12 {
                return Err(Error::Validation("diagonal noise layout needs identity noise correlation".into()));
            }
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_vector_maps_to_midpoint() {
        let layout = ParamLayout::new(3, 2, NoiseStructure::Full);
        let (h, _) = constrain(&layout, &vec![0.0; layout.dim()], 100.0).unwrap();
        assert!(h.lengthscales.iter().all(|l| (*l - 50.0).abs() < 1e-12));
        assert!(h.signal_sd.iter().all(|t| *t == 1.0));
        assert_eq!(h.signal_corr, DMatrix::identity(3, 3));
        assert_eq!(h.noise_corr, DMatrix::identity(3, 3));
    }

    #[test]
    fn log_sd_coordinate_jacobian_is_coordinate() {
        let layout = ParamLayout::new(1, 1, NoiseStructure::Full);
        let mut u = vec![0.0; layout.dim()];
        let (_, base) = constrain(&layout, &u, 100.0).unwrap();
        u[layout.signal_sd(0)] = 0.3;
        let (h, j) = constrain(&layout, &u, 100.0).unwrap();
        assert_relative_eq!(h.signal_sd[0], 0.3f64.exp());
        assert_relative_eq!(j - base, 0.3, epsilon = 1e-14);
    }

    #[test]
    fn layout_dimensions() {
        assert_eq!(ParamLayout::new(2, 2, NoiseStructure::Full).dim(), 12);
        assert_eq!(ParamLayout::new(2, 2, NoiseStructure::Diagonal).dim(), 11);
        assert_eq!(ParamLayout::new(1, 2, NoiseStructure::Full).dim(), 5);
        let l = ParamLayout::new(3, 4, NoiseStructure::Full);
        assert_eq!(l.coordinate_names().len(), l.dim());
    }

    fn random_u(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn round_trip_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for noise in [NoiseStructure::Full, NoiseStructure::Diagonal] {
            let layout = ParamLayout::new(3, 2, noise);
            for _ in 0..500 {
                let u = random_u(&mut rng, layout.dim());
                let (h, _) = constrain(&layout, &u, 100.0).unwrap();
                h.validate(100.0).unwrap();
                let back = unconstrain(&layout, &h, 100.0).unwrap();
                let (h2, _) = constrain(&layout, &back, 100.0).unwrap();
                assert!((&h.lengthscales - &h2.lengthscales).abs().max() < 1e-10);
                assert!((&h.signal_corr - &h2.signal_corr).abs().max() < 1e-10);
                assert!((&h.noise_corr - &h2.noise_corr).abs().max() < 1e-10);
                for (a, b) in u.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn mixing_reproduces_signal_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = ParamLayout::new(3, 1, NoiseStructure::Full);
        let (h, _) = constrain(&layout, &random_u(&mut rng, layout.dim()), 100.0).unwrap();
        let c = h.mixing().unwrap();
        for s in 0..3 {
            for e in 0..s {
                assert_eq!(c[(s, e)], 0.0);
            }
        }
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(h.signal_sd.clone()));
        assert_relative_eq!(c.transpose() * &c, &d * &h.signal_corr * &d, epsilon = 1e-12);
    }

    /// Off-diagonal correlation entries as a function of the raw coordinates.
    fn offdiag_of_raw(raw: &[f64], k: usize) -> Vec<f64> {
        let cpc: Vec<f64> = raw.iter().map(|x| x.tanh()).collect();
        let l = corr_cholesky_from_cpc(&cpc, k);
        let om = &l * l.transpose();
        cpc_pairs(k).into_iter().map(|(i, j)| om[(i, j)]).collect()
    }

    #[test]
    fn correlation_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [2usize, 3, 4] {
            let layout = ParamLayout::new(k, 1, NoiseStructure::Diagonal);
            let nc = layout.n_corr();
            for _ in 0..5 {
                let raw: Vec<f64> = (0..nc).map(|_| rng.random_range(-1.5..1.5)).collect();
                let h = 1e-6;
                let mut jac = DMatrix::zeros(nc, nc);
                for c in 0..nc {
                    let mut up = raw.clone();
                    let mut dn = raw.clone();
                    up[c] += h;
                    dn[c] -= h;
                    let (fu, fd) = (offdiag_of_raw(&up, k), offdiag_of_raw(&dn, k));
                    for r in 0..nc {
                        jac[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
                    }
                }
                let fd_logdet = jac.determinant().abs().ln();
                let mut u = vec![0.0; layout.dim()];
                u[layout.signal_cpc(0)..layout.signal_cpc(0) + nc].copy_from_slice(&raw);
                let (_, lj) = constrain(&layout, &u, 100.0).unwrap();
                let (_, lj0) = constrain(&layout, &vec![0.0; layout.dim()], 100.0).unwrap();
                assert_relative_eq!(lj - lj0, fd_logdet, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn cholesky_tangents_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 4;
        let cpc: Vec<f64> = (0..6).map(|_| rng.random_range(-0.9..0.9)).collect();
        let l = corr_cholesky_from_cpc(&cpc, k);
        let tang = corr_cholesky_tangents(&cpc, k, &l);
        for c in 0..cpc.len() {
            let h = 1e-6;
            let mut up = cpc.clone();
            let mut dn = cpc.clone();
            up[c] += h;
            dn[c] -= h;
            let fd = (corr_cholesky_from_cpc(&up, k) - corr_cholesky_from_cpc(&dn, k)) / (2.0 * h);
            assert!((fd - &tang[c]).abs().max() < 1e-8, "cpc {c}");
        }
    }

    #[test]
    fn permutation_relabels_blocks() {
        let h = HyperParams {
            lengthscales: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            means: vec![0.1, 0.2],
            signal_sd: vec![1.0, 2.0],
            signal_corr: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
            noise_sd: vec![0.5, 0.7],
            noise_corr: DMatrix::identity(2, 2),
        };
        let p = h.permute_experts(&[1, 0]);
        assert_eq!(p.means, vec![0.2, 0.1]);
        assert_eq!(p.lengthscales[(0, 0)], 2.0);
        assert_eq!(p.permute_experts(&[1, 0]), h);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut h = HyperParams::default_for(2, 1);
        h.validate(100.0).unwrap();
        h.lengthscales[(0, 0)] = 100.0;
        assert!(h.validate(100.0).is_err());
        let mut h = HyperParams::default_for(2, 1);
        h.signal_corr[(0, 1)] = 0.5;
        assert!(h.validate(100.0).is_err());
    }
}
