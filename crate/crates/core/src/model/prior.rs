use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use super::params::{HyperParams, NoiseStructure};
use crate::linalg::cholesky_lower;

/// Prior settings and structural switches of the multi-output model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Length scales live on `(0, lengthscale_upper)`.
    pub lengthscale_upper: f64,
    /// Scale of the truncated Cauchy(0, scale) length-scale prior.
    pub lengthscale_cauchy_scale: f64,
    /// LKJ shape for both correlation matrices.
    pub lkj_shape: f64,
    /// Half-normal scale on the signal standard deviations.
    pub signal_sd_scale: f64,
    /// Half-normal scale on the noise standard deviations.
    pub noise_sd_scale: f64,
    /// Normal(0, sd) prior on each constant mean.
    pub mean_prior_sd: f64,
    pub noise: NoiseStructure,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lengthscale_upper: 100.0,
            lengthscale_cauchy_scale: 5.0,
            lkj_shape: 3.0,
            signal_sd_scale: 1.0,
            noise_sd_scale: 1.0,
            mean_prior_sd: 10.0,
            noise: NoiseStructure::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("lengthscale_upper", self.lengthscale_upper),
            ("lengthscale_cauchy_scale", self.lengthscale_cauchy_scale),
            ("lkj_shape", self.lkj_shape),
            ("signal_sd_scale", self.signal_sd_scale),
            ("noise_sd_scale", self.noise_sd_scale),
            ("mean_prior_sd", self.mean_prior_sd),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(crate::Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Cauchy(0, scale) truncated to `(0, upper)`.
pub fn truncated_cauchy_ln_pdf(x: f64, scale: f64, upper: f64) -> f64 {
    if !(x > 0.0 && x < upper) {
        return f64::NEG_INFINITY;
    }
    let r = x / scale;
    -(scale * (1.0 + r * r)).ln() - (upper / scale).atan().ln()
}

pub fn half_normal_ln_pdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    (2.0 / (2.0 * PI).sqrt()).ln() - scale.ln() - 0.5 * (x / scale).powi(2)
}

pub fn normal_ln_pdf(x: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * (x / sd).powi(2)
}

/// Log normalizing constant of the LKJ(shape) density in dimension `k`.
///
/// Built from the Beta marginals of the canonical partial correlations: the
/// CPC in column `j` is a symmetric Beta(b, b) on (-1, 1) with
/// `b = shape + (k - 2 - j) / 2`.
pub fn lkj_ln_const(shape: f64, k: usize) -> f64 {
    let mut out = 0.0;
    for j in 0..k.saturating_sub(1) {
        let b = shape + 0.5 * (k as f64 - 2.0 - j as f64);
        let count = (k - 1 - j) as f64;
        out += count * (-ln_beta(b, b) - (2.0 * b - 1.0) * 2f64.ln());
    }
    out
}

/// LKJ(shape) log density of a correlation matrix.
pub fn lkj_ln_pdf(omega: &DMatrix<f64>, shape: f64) -> f64 {
    let k = omega.nrows();
    if k == 1 {
        return 0.0;
    }
    match cholesky_lower(omega) {
        Some(l) => {
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            lkj_ln_const(shape, k) + (shape - 1.0) * log_det
        }
        None => f64::NEG_INFINITY,
    }
}

/// Joint log prior density of one hyperparameter state, normalizing constants
/// included. Out-of-support values give `-inf`.
pub fn log_prior(h: &HyperParams, cfg: &ModelConfig) -> f64 {
    let mut lp = 0.0;
    for l in h.lengthscales.iter() {
        lp += truncated_cauchy_ln_pdf(*l, cfg.lengthscale_cauchy_scale, cfg.lengthscale_upper);
    }
    for m in &h.means {
        lp += normal_ln_pdf(*m, cfg.mean_prior_sd);
    }
    for t in &h.signal_sd {
        lp += if *t > 0.0 {
            half_normal_ln_pdf(*t, cfg.signal_sd_scale)
        } else {
            f64::NEG_INFINITY
        };
    }
    for s in &h.noise_sd {
        lp += if *s > 0.0 {
            half_normal_ln_pdf(*s, cfg.noise_sd_scale)
        } else {
            f64::NEG_INFINITY
        };
    }
    lp += lkj_ln_pdf(&h.signal_corr, cfg.lkj_shape);
    if cfg.noise == NoiseStructure::Full {
        lp += lkj_ln_pdf(&h.noise_corr, cfg.lkj_shape);
    }
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lkj_two_dim_at_zero_correlation() {
        let omega = DMatrix::identity(2, 2);
        let v = lkj_ln_pdf(&omega, 3.0);
        assert_relative_eq!(v.exp(), 0.9375, epsilon = 1e-14);
        assert_relative_eq!(v, -0.064_538_521_137_571_2, epsilon = 1e-12);
    }

    #[test]
    fn lkj_two_dim_matches_beta() {
        // r = 2x - 1 with x ~ Beta(3, 3)
        for r in [-0.8, -0.1, 0.4, 0.95] {
            let om = DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]);
            let x: f64 = (r + 1.0) / 2.0;
            let beta_pdf = 30.0 * x * x * (1.0 - x) * (1.0 - x);
            assert_relative_eq!(lkj_ln_pdf(&om, 3.0), (0.5 * beta_pdf).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn lkj_uniform_three_dim_volume() {
        // The set of 3x3 correlation matrices has volume π²/2.
        assert_relative_eq!(lkj_ln_const(1.0, 3), -(PI * PI / 2.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn lkj_two_dim_integrates_to_one() {
        let n = 20_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let r = -1.0 + (i as f64 + 0.5) * h;
                let om = DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]);
                lkj_ln_pdf(&om, 3.0).exp() * h
            })
            .sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn truncated_cauchy_support_and_mass() {
        assert_eq!(truncated_cauchy_ln_pdf(100.0, 5.0, 100.0), f64::NEG_INFINITY);
        assert_eq!(truncated_cauchy_ln_pdf(0.0, 5.0, 100.0), f64::NEG_INFINITY);
        let n = 200_000;
        let h = 100.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| truncated_cauchy_ln_pdf((i as f64 + 0.5) * h, 5.0, 100.0).exp() * h)
            .sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn half_normal_at_zero() {
        assert_relative_eq!(half_normal_ln_pdf(1e-300, 1.0), -0.225_791_352_644_727_4, epsilon = 1e-14);
        assert_eq!(half_normal_ln_pdf(-1.0, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn boundary_lengthscale_gives_neg_inf_prior() {
        let mut h = HyperParams::default_for(2, 2);
        let cfg = ModelConfig::default();
        assert!(log_prior(&h, &cfg).is_finite());
        h.lengthscales[(1, 0)] = 100.0;
        assert_eq!(log_prior(&h, &cfg), f64::NEG_INFINITY);
    }
}
