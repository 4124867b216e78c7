//! Hyperparameters, priors, and the marginal log posterior of the
//! multi-output GP on cube-root scores, with the latent surface integrated out.

mod params;
mod prior;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

pub use params::{
    constrain, corr_cholesky_from_cpc, corr_cholesky_tangents, cpc_from_corr_cholesky, cpc_pairs,
    unconstrain, HyperParams, NoiseStructure, ParamLayout,
};
pub use prior::{
    half_normal_ln_pdf, lkj_ln_const, lkj_ln_pdf, log_prior, normal_ln_pdf, truncated_cauchy_ln_pdf,
    ModelConfig,
};

use crate::error::{Error, Result};
use crate::kernels::{add_kron_identity, mix_grams};
use crate::linalg::SpdFactor;
use crate::panel::TransformedPanel;
use crate::sampler::{hmc_sample, HmcConfig, PosteriorDraws};
use params::{cpc_columns, sigmoid};

/// The marginal posterior of the hyperparameters for one transformed panel.
///
/// Squared covariate differences are cached so each evaluation only pays for
/// the exponentials and the factorization.
#[derive(Debug, Clone)]
pub struct MultiGpModel {
    panel: TransformedPanel,
    y: DVector<f64>,
    sq_diff: Vec<DMatrix<f64>>,
    layout: ParamLayout,
    cfg: ModelConfig,
}

impl MultiGpModel {
    pub fn new(panel: TransformedPanel, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = panel.n();
        let z = panel.z();
        let sq_diff = (0..panel.n_covariates())
            .map(|p| DMatrix::from_fn(n, n, |i, j| (z[(i, p)] - z[(j, p)]).powi(2)))
            .collect();
        let layout = ParamLayout::new(panel.n_experts(), panel.n_covariates(), cfg.noise);
        let y = DVector::from_vec(panel.stacked());
        Ok(Self {
            panel,
            y,
            sq_diff,
            layout,
            cfg,
        })
    }

    pub fn panel(&self) -> &TransformedPanel {
        &self.panel
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn check(&self, h: &HyperParams) -> Result<()> {
        if h.n_experts() != self.panel.n_experts() || h.n_covariates() != self.panel.n_covariates() {
            return Err(Error::Dimension(format!(
                "hyperparameters are for K={}, P={}; panel has K={}, P={}",
                h.n_experts(),
                h.n_covariates(),
                self.panel.n_experts(),
                self.panel.n_covariates()
            )));
        }
        Ok(())
    }

    fn gram(&self, lengthscales: &[f64]) -> DMatrix<f64> {
        let n = self.panel.n();
        let mut q = DMatrix::zeros(n, n);
        for (d, l) in self.sq_diff.iter().zip(lengthscales) {
            let f = -0.5 / (l * l);
            q.zip_apply(d, |o, v| *o += f * v);
        }
        q.map(f64::exp)
    }

    fn grams(&self, h: &HyperParams) -> Vec<DMatrix<f64>> {
        (0..h.n_experts())
            .map(|s| {
                let ls: Vec<f64> = h.lengthscales.column(s).iter().copied().collect();
                self.gram(&ls)
            })
            .collect()
    }

    fn mean_vector(&self, h: &HyperParams) -> DVector<f64> {
        let n = self.panel.n();
        DVector::from_fn(n * h.n_experts(), |r, _| h.means[r / n])
    }

    /// Stacked marginal covariance `G(Z, Z) + Σ ⊗ I_n` for `h`.
    pub fn marginal_cov(&self, h: &HyperParams) -> Result<DMatrix<f64>> {
        self.check(h)?;
        let mut m = mix_grams(&self.grams(h), &h.mixing()?);
        add_kron_identity(&mut m, &h.noise_cov(), self.panel.n());
        Ok(m)
    }

    /// Gaussian log marginal likelihood of the stacked transformed scores.
    pub fn log_likelihood(&self, h: &HyperParams) -> Result<f64> {
        let factor = SpdFactor::new(self.marginal_cov(h)?)?;
        let r = &self.y - self.mean_vector(h);
        let alpha = factor.solve(&r);
        Ok(gaussian_ll(&r, &alpha, factor.log_det()))
    }

    /// Log marginal likelihood plus log prior.
    pub fn log_posterior(&self, h: &HyperParams) -> Result<f64> {
        let lp = log_prior(h, &self.cfg);
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        Ok(self.log_likelihood(h)? + lp)
    }

    /// Log density on the unconstrained scale (posterior plus log Jacobian).
    pub fn log_density(&self, u: &[f64]) -> Result<f64> {
        let (h, log_jac) = constrain(&self.layout, u, self.cfg.lengthscale_upper)?;
        Ok(self.log_posterior(&h)? + log_jac)
    }

    /// Unconstrained log density and its gradient.
    pub fn log_density_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let layout = self.layout;
        let cfg = &self.cfg;
        let (h, log_jac) = constrain(&layout, u, cfg.lengthscale_upper)?;
        let lp = log_prior(&h, cfg);
        if lp == f64::NEG_INFINITY {
            return Ok((f64::NEG_INFINITY, vec![0.0; u.len()]));
        }

        let (k, p, n) = (layout.n_experts, layout.n_covariates, self.panel.n());
        let grams = self.grams(&h);
        let c = h.mixing()?;
        let sigma = h.noise_cov();
        let mut kmat = mix_grams(&grams, &c);
        add_kron_identity(&mut kmat, &sigma, n);
        let factor = SpdFactor::new(kmat)?;
        let r = &self.y - self.mean_vector(&h);
        let alpha = factor.solve(&r);
        let value = gaussian_ll(&r, &alpha, factor.log_det()) + lp + log_jac;

        // dlogN = ½ tr(W dK) with W = ααᵀ − K⁻¹
        let mut w = factor.inverse();
        w.ger(1.0, &alpha, &alpha, -1.0);

        let mut grad = vec![0.0; u.len()];

        // s_blocks[s][(a, b)] = <W_ab, G_s>
        let mut s_blocks = vec![DMatrix::zeros(k, k); k];
        for a in 0..k {
            for b in 0..k {
                let wab = w.view((a * n, b * n), (n, n));
                for (s, g) in grams.iter().enumerate() {
                    s_blocks[s][(a, b)] = wab.dot(g);
                }
            }
        }

        // length scales
        for (s, g) in grams.iter().enumerate() {
            let mut v = DMatrix::zeros(n, n);
            for a in 0..k {
                for b in 0..k {
                    let bw = c[(s, a)] * c[(s, b)];
                    if bw != 0.0 {
                        v.zip_apply(&w.view((a * n, b * n), (n, n)), |o, x| *o += bw * x);
                    }
                }
            }
            let vg = v.component_mul(g);
            for q in 0..p {
                let l = h.lengthscales[(q, s)];
                let dll = 0.5 * vg.dot(&self.sq_diff[q]) / (l * l * l);
                let dl_du = l * (1.0 - l / cfg.lengthscale_upper);
                let gam = cfg.lengthscale_cauchy_scale;
                let dprior = -2.0 * l / (gam * gam + l * l);
                let djac = 1.0 - 2.0 * sigmoid(u[layout.lengthscale(q, s)]);
                grad[layout.lengthscale(q, s)] = (dll + dprior) * dl_du + djac;
            }
        }

        // means
        for e in 0..k {
            let dll: f64 = alpha.rows(e * n, n).sum();
            grad[layout.mean(e)] = dll - h.means[e] / (cfg.mean_prior_sd * cfg.mean_prior_sd);
        }

        // signal scale and correlation: dlogN = Σ_{a,s} R[a][s] dLD[a][s], LD = Cᵀ
        let rmat = DMatrix::from_fn(k, k, |a, s| {
            (0..k).map(|b| s_blocks[s][(a, b)] * c[(s, b)]).sum::<f64>()
        });
        for e in 0..k {
            let dll: f64 = (0..k).map(|s| rmat[(e, s)] * c[(s, e)]).sum();
            let t = h.signal_sd[e];
            grad[layout.signal_sd(e)] = dll - t * t / (cfg.signal_sd_scale * cfg.signal_sd_scale) + 1.0;
        }
        let cols = cpc_columns(k);
        let cpc_weight = |c: usize, prior_lkj: bool| -> f64 {
            let lkj = if prior_lkj { cfg.lkj_shape - 1.0 } else { 0.0 };
            lkj + 1.0 + 0.5 * (k as f64 - cols[c] as f64 - 2.0)
        };
        if layout.n_corr() > 0 {
            let raw = &u[layout.signal_cpc(0)..layout.signal_cpc(0) + layout.n_corr()];
            let cpc: Vec<f64> = raw.iter().map(|x| x.tanh()).collect();
            let lo = corr_cholesky_from_cpc(&cpc, k);
            for (ci, dl) in corr_cholesky_tangents(&cpc, k, &lo).iter().enumerate() {
                let z = cpc[ci];
                let mut dll = 0.0;
                for a in 0..k {
                    for s in 0..=a {
                        dll += rmat[(a, s)] * h.signal_sd[a] * dl[(a, s)];
                    }
                }
                grad[layout.signal_cpc(ci)] = dll * (1.0 - z * z) - 2.0 * z * cpc_weight(ci, true);
            }
        }

        // noise: dlogN = ½ Σ T_ab dΣ_ab with T_ab = Σ_i W_(a,i),(b,i)
        let tmat = DMatrix::from_fn(k, k, |a, b| (0..n).map(|i| w[(a * n + i, b * n + i)]).sum::<f64>());
        for e in 0..k {
            let dll: f64 = (0..k).map(|b| tmat[(e, b)] * sigma[(e, b)]).sum();
            let s = h.noise_sd[e];
            grad[layout.noise_sd(e)] = dll - s * s / (cfg.noise_sd_scale * cfg.noise_sd_scale) + 1.0;
        }
        if layout.n_noise_cpc() > 0 {
            let raw = &u[layout.noise_cpc(0)..layout.noise_cpc(0) + layout.n_noise_cpc()];
            let cpc: Vec<f64> = raw.iter().map(|x| x.tanh()).collect();
            let lo = corr_cholesky_from_cpc(&cpc, k);
            for (ci, dl) in corr_cholesky_tangents(&cpc, k, &lo).iter().enumerate() {
                let z = cpc[ci];
                let dlo = dl * lo.transpose();
                let mut dll = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        dll += tmat[(a, b)] * h.noise_sd[a] * h.noise_sd[b] * dlo[(a, b)];
                    }
                }
                grad[layout.noise_cpc(ci)] = dll * (1.0 - z * z) - 2.0 * z * cpc_weight(ci, true);
            }
        }

        Ok((value, grad))
    }
}

/// Sampler output with every state mapped to constrained hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub layout: ParamLayout,
    pub draws: PosteriorDraws,
    pub params: Vec<HyperParams>,
}

impl ModelFit {
    pub fn from_draws(layout: ParamLayout, draws: PosteriorDraws, lengthscale_upper: f64) -> Result<Self> {
        let params = draws
            .draws
            .iter()
            .map(|u| constrain(&layout, u, lengthscale_upper).map(|(h, _)| h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layout, draws, params })
    }

    /// Posterior median of the length scale for covariate `p` on latent `s`.
    pub fn lengthscale_median(&self, p: usize, s: usize) -> f64 {
        let mut v: Vec<f64> = self.params.iter().map(|h| h.lengthscales[(p, s)]).collect();
        median(&mut v)
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Samples the hyperparameter posterior of `panel` with HMC.
pub fn fit(panel: &TransformedPanel, cfg: &ModelConfig, hmc: &HmcConfig) -> Result<ModelFit> {
    let model = MultiGpModel::new(panel.clone(), *cfg)?;
    let draws = hmc_sample(&model, hmc)?;
    ModelFit::from_draws(*model.layout(), draws, cfg.lengthscale_upper)
}

fn gaussian_ll(r: &DVector<f64>, alpha: &DVector<f64>, log_det: f64) -> f64 {
    -0.5 * r.dot(alpha) - 0.5 * log_det - 0.5 * r.len() as f64 * (2.0 * PI).ln()
}

/// `log N(vec ℓ''; μ, G(Z,Z) + Σ ⊗ I_n) + log p(h)`.
pub fn log_marginal_posterior(panel: &TransformedPanel, h: &HyperParams, cfg: &ModelConfig) -> Result<f64> {
    MultiGpModel::new(panel.clone(), *cfg)?.log_posterior(h)
}

/// Gradient of the unconstrained log density (posterior composed with the
/// constraining transform, plus its log Jacobian).
pub fn grad_log_marginal_posterior(panel: &TransformedPanel, u: &[f64], cfg: &ModelConfig) -> Result<Vec<f64>> {
    Ok(MultiGpModel::new(panel.clone(), *cfg)?.log_density_and_grad(u)?.1)
}

/// Assembles hyperparameters from constrained values and checks every invariant.
pub fn hyperparams_from_parts(
    lengthscales: DMatrix<f64>,
    means: Vec<f64>,
    signal_sd: Vec<f64>,
    signal_corr: DMatrix<f64>,
    noise_sd: Vec<f64>,
    noise_corr: DMatrix<f64>,
    lengthscale_upper: f64,
) -> Result<HyperParams> {
    let h = HyperParams {
        lengthscales,
        means,
        signal_sd,
        signal_corr,
        noise_sd,
        noise_corr,
    };
    h.validate(lengthscale_upper)?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_panel(rng: &mut ChaCha8Rng, n: usize, k: usize, p: usize) -> TransformedPanel {
        let z = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let v = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.2..1.8));
        TransformedPanel::new(z, v, (0..k).map(|e| format!("e{e}")).collect()).unwrap()
    }

    #[test]
    fn scalar_case_matches_normal_density() {
        let panel = TransformedPanel::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 0.0),
            vec!["e".into()],
        )
        .unwrap();
        let cfg = ModelConfig::default();
        let h = HyperParams::default_for(1, 1);
        let model = MultiGpModel::new(panel.clone(), cfg).unwrap();
        assert_relative_eq!(model.log_likelihood(&h).unwrap(), -0.5 * (4.0 * PI).ln(), epsilon = 1e-14);
        let post = log_marginal_posterior(&panel, &h, &cfg).unwrap();
        assert_relative_eq!(post, -1.265_512_123_484_645_4 + log_prior(&h, &cfg), epsilon = 1e-13);
    }

    #[test]
    fn zero_residual_mean_gradient_is_prior_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, k, p) = (6, 2, 2);
        let m = [0.7, 1.3];
        let z = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let v = DMatrix::from_fn(n, k, |_, e| m[e]);
        let panel = TransformedPanel::new(z, v, vec!["a".into(), "b".into()]).unwrap();
        let cfg = ModelConfig::default();
        let model = MultiGpModel::new(panel, cfg).unwrap();
        let mut u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for e in 0..k {
            u[model.layout().mean(e)] = m[e];
        }
        let (_, g) = model.log_density_and_grad(&u).unwrap();
        for e in 0..k {
            assert_relative_eq!(g[model.layout().mean(e)], -m[e] / 100.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for noise in [NoiseStructure::Full, NoiseStructure::Diagonal] {
            for k in [1usize, 2, 3] {
                let panel = random_panel(&mut rng, 7, k, 2);
                let cfg = ModelConfig {
                    noise,
                    ..ModelConfig::default()
                };
                let model = MultiGpModel::new(panel, cfg).unwrap();
                let u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
                let (_, g) = model.log_density_and_grad(&u).unwrap();
                for i in 0..u.len() {
                    let h = 1e-5;
                    let mut up = u.clone();
                    let mut dn = u.clone();
                    up[i] += h;
                    dn[i] -= h;
                    let fd = (model.log_density(&up).unwrap() - model.log_density(&dn).unwrap()) / (2.0 * h);
                    assert!(
                        (fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                        "K={k} {noise:?} coord {i}: analytic {} vs fd {fd}",
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn value_agrees_between_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let panel = random_panel(&mut rng, 5, 2, 2);
        let model = MultiGpModel::new(panel, ModelConfig::default()).unwrap();
        let u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (v, _) = model.log_density_and_grad(&u).unwrap();
        assert_relative_eq!(v, model.log_density(&u).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn out_of_support_gives_neg_inf() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let panel = random_panel(&mut rng, 3, 1, 1);
        let model = MultiGpModel::new(panel, ModelConfig::default()).unwrap();
        let mut u = vec![0.0; model.dim()];
        u[0] = 800.0;
        assert_eq!(model.log_density(&u).unwrap(), f64::NEG_INFINITY);
    }
}
