//! Gaussian conditioning at a query point, local ELPD draws, and
//! best-expert probabilities.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels::{add_kron_identity, cross_cov};
use crate::linalg::SpdFactor;
use crate::model::HyperParams;
use crate::panel::{elpd_from_latent, TransformedPanel};

/// Posterior of the latent surfaces `f(z*)` on the cube-root scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Joint draws of local ELPD `η(z*)`, one row per posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct AbilityDraws {
    pub eta: DMatrix<f64>,
    pub z_star: Vec<f64>,
    pub a_star: Vec<f64>,
}

impl AbilityDraws {
    pub fn n_draws(&self) -> usize {
        self.eta.nrows()
    }

    pub fn n_experts(&self) -> usize {
        self.eta.ncols()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.eta.column_iter().map(|c| c.mean()).collect()
    }

    /// Sample standard deviation per expert (zero for a single draw).
    pub fn sd(&self) -> Vec<f64> {
        let m = self.n_draws() as f64;
        self.eta
            .column_iter()
            .map(|c| {
                if m < 2.0 {
                    return 0.0;
                }
                let mu = c.mean();
                (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            })
            .collect()
    }

    /// Pearson correlation matrix of the draws. Constant columns get zero
    /// off-diagonal correlation.
    pub fn correlation(&self) -> DMatrix<f64> {
        let k = self.n_experts();
        let means = self.mean();
        let centered = DMatrix::from_fn(self.n_draws(), k, |i, j| self.eta[(i, j)] - means[j]);
        let cov = centered.transpose() * &centered;
        DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                1.0
            } else {
                let d = (cov[(a, a)] * cov[(b, b)]).sqrt();
                if d > 0.0 {
                    cov[(a, b)] / d
                } else {
                    0.0
                }
            }
        })
    }
}

fn check_query(z_star: &[f64], panel: &TransformedPanel, h: &HyperParams) -> Result<()> {
    if z_star.len() != panel.n_covariates() {
        return Err(Error::Dimension(format!(
            "query point has {} covariates, panel has {}",
            z_star.len(),
            panel.n_covariates()
        )));
    }
    if z_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("query point is not finite: {z_star:?}")));
    }
    if h.n_experts() != panel.n_experts() || h.n_covariates() != panel.n_covariates() {
        return Err(Error::Dimension(format!(
            "hyperparameters are for K={}, P={}; panel has K={}, P={}",
            h.n_experts(),
            h.n_covariates(),
            panel.n_experts(),
            panel.n_covariates()
        )));
    }
    Ok(())
}

/// Conditions the latent surfaces at `z_star` on the panel's transformed scores.
pub fn latent_posterior_at(z_star: &[f64], panel: &TransformedPanel, h: &HyperParams) -> Result<LatentPosterior> {
    check_query(z_star, panel, h)?;
    let k = panel.n_experts();
    let spec = h.cross_cov_spec()?;
    let zs = DMatrix::from_row_slice(1, z_star.len(), z_star);
    let z = panel.z();

    let mut train = cross_cov(z, z, &spec)?;
    add_kron_identity(&mut train, &h.noise_cov(), panel.n());
    let factor = SpdFactor::new(train)?;
    let cross = cross_cov(&zs, z, &spec)?;
    let prior = cross_cov(&zs, &zs, &spec)?;

    let n = panel.n();
    let y = DVector::from_vec(panel.stacked());
    let mu = DVector::from_fn(n * k, |r, _| h.means[r / n]);
    let alpha = factor.solve(&(y - mu));
    let mean = DVector::from_fn(k, |e, _| h.means[e]) + &cross * alpha;

    let v = factor.solve_mat(&cross.transpose());
    let mut cov = prior - &cross * v;
    cov = 0.5 * (&cov + cov.transpose());
    let cov = clip_psd(cov)?;
    Ok(LatentPosterior { mean, cov })
}

/// Clips small negative eigenvalues to zero. Larger violations are errors.
fn clip_psd(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = cov.nrows();
    let eig = cov.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(cov);
    }
    let tol = 1e-8 * cov.trace().abs() / k as f64;
    if min < -tol - f64::EPSILON {
        return Err(Error::Numerical(format!(
            "posterior covariance has eigenvalue {min:e}, below tolerance {tol:e}"
        )));
    }
    log::warn!("clipping posterior covariance eigenvalue {min:e} to zero");
    let lam = eig.eigenvalues.map(|l| l.max(0.0));
    let u = &eig.eigenvectors;
    Ok(u * DMatrix::from_diagonal(&lam) * u.transpose())
}

/// Draws `f ~ N(mean, cov)` through a symmetric eigendecomposition, which
/// tolerates singular covariances.
fn sample_latent(post: &LatentPosterior, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let k = post.mean.len();
    let eig = post.cov.clone().symmetric_eigen();
    let z: DVector<f64> = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
    let scaled = DVector::from_fn(k, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * z[i]);
    &post.mean + &eig.eigenvectors * scaled
}

/// RNG for draw `j`: stream `j` of `seed`.
pub fn draw_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// One joint draw of local ELPD per hyperparameter state.
pub fn sample_ability(
    z_star: &[f64],
    a_star: &[f64],
    panel: &TransformedPanel,
    params: &[HyperParams],
    seed: u64,
) -> Result<AbilityDraws> {
    let k = panel.n_experts();
    if a_star.len() != k {
        return Err(Error::Dimension(format!("a* has {} entries for {k} experts", a_star.len())));
    }
    if params.is_empty() {
        return Err(Error::Validation("need at least one hyperparameter draw".into()));
    }
    let rows: Vec<Vec<f64>> = params
        .par_iter()
        .enumerate()
        .map(|(j, h)| {
            let post = latent_posterior_at(z_star, panel, h)?;
            let mut rng = draw_rng(seed, j);
            let f = sample_latent(&post, &mut rng);
            Ok((0..k)
                .map(|e| {
                    let s = h.noise_sd[e];
                    elpd_from_latent(a_star[e], f[e], s * s)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let eta = DMatrix::from_fn(rows.len(), k, |i, e| rows[i][e]);
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite ELPD draw".into()));
    }
    Ok(AbilityDraws {
        eta,
        z_star: z_star.to_vec(),
        a_star: a_star.to_vec(),
    })
}

/// Posterior probability that each expert has the highest local ELPD.
/// Rows with tied maxima split their mass equally.
pub fn psi(ability: &AbilityDraws) -> Vec<f64> {
    psi_from_rows(&ability.eta)
}

pub fn psi_from_rows(eta: &DMatrix<f64>) -> Vec<f64> {
    let (m, k) = eta.shape();
    let mut out = vec![0.0; k];
    if m == 0 {
        return out;
    }
    for row in eta.row_iter() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..k).filter(|&e| row[e] == max).collect();
        let share = 1.0 / winners.len() as f64;
        for e in winners {
            out[e] += share;
        }
    }
    out.iter_mut().for_each(|v| *v /= m as f64);
    out
}

/// `P(η₂ > η₁)` for a bivariate Gaussian with means `mu1, mu2`, sds `sd1, sd2`
/// and correlation `rho`.
pub fn prob_second_best_gaussian(mu1: f64, mu2: f64, sd1: f64, sd2: f64, rho: f64) -> Result<f64> {
    if !(sd1 > 0.0 && sd2 > 0.0 && sd1.is_finite() && sd2.is_finite()) {
        return Err(Error::Domain(format!("sds must be positive, got {sd1} and {sd2}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    if !(mu1.is_finite() && mu2.is_finite()) {
        return Err(Error::Domain("means must be finite".into()));
    }
    let d = mu2 - mu1;
    let var = sd1 * sd1 + sd2 * sd2 - 2.0 * rho * sd1 * sd2;
    if var <= f64::EPSILON * (sd1 * sd1 + sd2 * sd2) {
        return Ok(if d > 0.0 {
            1.0
        } else if d < 0.0 {
            0.0
        } else {
            0.5
        });
    }
    Ok(Normal::standard().cdf(d / var.sqrt()))
}
