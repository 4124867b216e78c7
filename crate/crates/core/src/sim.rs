//! Synthetic pseudo log scores and the replicated multi- vs single-output study.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mvn_log_density, SpdFactor};
use crate::model::{fit, median, ModelConfig, ModelFit};
use crate::panel::{transform_scores, ScorePanel};
use crate::predict::{draw_rng, sample_ability, AbilityDraws};
use crate::sampler::HmcConfig;

/// Two experts whose pseudo log scores degrade quadratically in their own covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub b: f64,
    pub z_correlation: f64,
    pub n_datasets: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            b: 1.0 / 3.0,
            z_correlation: 0.7,
            n_datasets: 20,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.b.is_finite() && self.b > 0.0) {
            return Err(Error::Config(format!("b must be positive, got {}", self.b)));
        }
        if !(self.z_correlation.abs() < 1.0) {
            return Err(Error::Config(format!(
                "z_correlation must lie in (-1, 1), got {}",
                self.z_correlation
            )));
        }
        if self.n_datasets == 0 {
            return Err(Error::Config("n_datasets must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws one dataset. Returns the panel (normalization constants 0) and the
/// true local ELPD `-b (1 + z_ik²)` per row and expert.
pub fn gen_dataset<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(ScorePanel, DMatrix<f64>)> {
    cfg.validate()?;
    let n = cfg.n;
    let rho = cfg.z_correlation;
    let s = (1.0 - rho * rho).sqrt();
    let mut z = DMatrix::zeros(n, 2);
    let mut l = DMatrix::zeros(n, 2);
    for i in 0..n {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        z[(i, 0)] = e1;
        z[(i, 1)] = rho * e1 + s * e2;
        for k in 0..2 {
            l[(i, k)] = -cfg.b * (y - z[(i, k)]).powi(2);
        }
    }
    let truth = z.map(|v| -cfg.b * (1.0 + v * v));
    let panel = ScorePanel::new(z, l, None, vec!["expert_1".into(), "expert_2".into()])?;
    Ok((panel, truth))
}

/// How the density of η draws is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMethod {
    #[default]
    Gaussian,
    Kde,
}

fn sample_moments(eta: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (m, k) = eta.shape();
    let mean = DVector::from_fn(k, |j, _| eta.column(j).mean());
    let centered = DMatrix::from_fn(m, k, |i, j| eta[(i, j)] - mean[j]);
    let cov = centered.transpose() * centered / (m as f64 - 1.0);
    (mean, cov)
}

/// Log density at `eta_true` of a Gaussian moment-matched to the draws, with
/// covariance ridge `1e-8 · trace / K`.
pub fn joint_truth_density(ability: &AbilityDraws, eta_true: &[f64]) -> Result<f64> {
    joint_truth_density_with(ability, eta_true, DensityMethod::Gaussian)
}

pub fn joint_truth_density_with(ability: &AbilityDraws, eta_true: &[f64], method: DensityMethod) -> Result<f64> {
    let (m, k) = ability.eta.shape();
    if eta_true.len() != k {
        return Err(Error::Dimension(format!("truth has {} entries for {k} experts", eta_true.len())));
    }
    if m < k + 2 {
        return Err(Error::Validation(format!("need at least {} draws, got {m}", k + 2)));
    }
    let (mean, mut cov) = sample_moments(&ability.eta);
    let ridge = 1e-8 * cov.trace() / k as f64;
    for i in 0..k {
        cov[(i, i)] += ridge;
    }
    let x = DVector::from_column_slice(eta_true);
    match method {
        DensityMethod::Gaussian => {
            if cov.clone().cholesky().is_none() {
                return Err(Error::Numerical("sample covariance of η draws is singular".into()));
            }
            mvn_log_density(&x, &mean, &cov)
        }
        DensityMethod::Kde => kde_log_density(&ability.eta, &x, &cov),
    }
}

/// Gaussian KDE with Scott's bandwidth matrix `m^(-2/(k+4)) · cov`.
fn kde_log_density(eta: &DMatrix<f64>, x: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let (m, k) = eta.shape();
    let h = cov * (m as f64).powf(-2.0 / (k as f64 + 4.0));
    let factor = SpdFactor::new(h)?;
    let norm = -0.5 * factor.log_det() - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
    let terms: Vec<f64> = eta
        .row_iter()
        .map(|row| {
            let r = x - row.transpose();
            -0.5 * r.dot(&factor.solve(&r)) + norm
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() - (m as f64).ln())
}

/// Fitting settings shared by every replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub model: ModelConfig,
    pub hmc: HmcConfig,
    pub rhat_threshold: f64,
    pub density: DensityMethod,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            hmc: HmcConfig {
                n_chains: 2,
                n_warmup: 300,
                n_draws: 300,
                ..HmcConfig::default()
            },
            rhat_threshold: 1.2,
            density: DensityMethod::Gaussian,
        }
    }
}

/// Outcome of one replicate dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub z_correlation: f64,
    pub replicate: usize,
    pub held_out: usize,
    pub z_star: Vec<f64>,
    pub eta_true: Vec<f64>,
    pub score_multi: f64,
    pub score_single: f64,
    pub max_rhat_multi: f64,
    pub max_rhat_single: f64,
    pub flagged: bool,
    /// Posterior medians of the multi-output length scales, indexed
    /// `[covariate][latent]`.
    pub lengthscale_median: [[f64; 2]; 2],
}

impl ReplicateResult {
    pub fn score_diff(&self) -> f64 {
        self.score_multi - self.score_single
    }

    /// Each expert's own covariate has the shorter length scale.
    pub fn relevance_recovered(&self) -> bool {
        let l = &self.lengthscale_median;
        l[0][0] < l[1][0] && l[1][1] < l[0][1]
    }
}

/// Aggregates over the non-flagged replicates of one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub z_correlation: f64,
    pub n_replicates: usize,
    pub n_flagged: usize,
    pub mean_multi: f64,
    pub mean_single: f64,
    pub mean_diff: f64,
    pub multi_win_rate: f64,
    pub frac_l11_lt_l21: f64,
    pub frac_l22_lt_l12: f64,
    pub frac_relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub replicates: Vec<ReplicateResult>,
    pub arms: Vec<ArmSummary>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn fraction(rows: &[&ReplicateResult], pred: impl Fn(&ReplicateResult) -> bool) -> f64 {
    mean_of(rows.iter().map(|r| pred(r) as u8 as f64))
}

pub fn summarize_arm(z_correlation: f64, rows: &[ReplicateResult]) -> ArmSummary {
    let kept: Vec<&ReplicateResult> = rows.iter().filter(|r| !r.flagged).collect();
    ArmSummary {
        z_correlation,
        n_replicates: rows.len(),
        n_flagged: rows.len() - kept.len(),
        mean_multi: mean_of(kept.iter().map(|r| r.score_multi)),
        mean_single: mean_of(kept.iter().map(|r| r.score_single)),
        mean_diff: mean_of(kept.iter().map(|r| r.score_diff())),
        multi_win_rate: fraction(&kept, |r| r.score_multi > r.score_single),
        frac_l11_lt_l21: fraction(&kept, |r| r.lengthscale_median[0][0] < r.lengthscale_median[1][0]),
        frac_l22_lt_l12: fraction(&kept, |r| r.lengthscale_median[1][1] < r.lengthscale_median[0][1]),
        frac_relevance: fraction(&kept, |r| r.relevance_recovered()),
    }
}

fn max_rhat(f: &ModelFit) -> f64 {
    f.draws.diagnostics.rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Runs replicate `r` of one arm: simulate, hold out one row, fit the
/// multi-output model and one single-output model per expert, and score the
/// true local ELPD at the held-out point.
pub fn run_replicate(sim: &SimConfig, settings: &StudySettings, r: usize) -> Result<ReplicateResult> {
    let mut rng: ChaCha8Rng = draw_rng(sim.seed, r);
    let (panel, truth) = gen_dataset(sim, &mut rng)?;
    let held_out = rng.random_range(0..sim.n);
    let train_rows: Vec<usize> = (0..sim.n).filter(|&i| i != held_out).collect();
    let train = transform_scores(&panel.select_rows(&train_rows));
    let z_star: Vec<f64> = panel.z().row(held_out).iter().copied().collect();
    let eta_true: Vec<f64> = truth.row(held_out).iter().copied().collect();
    let with_seed = |seed: u64| HmcConfig { seed, ..settings.hmc };

    let multi = fit(&train, &settings.model, &with_seed(rng.next_u64()))?;
    let ability = sample_ability(&z_star, &[0.0, 0.0], &train, &multi.params, rng.next_u64())?;
    let score_multi = joint_truth_density_with(&ability, &eta_true, settings.density)?;

    let mut score_single = 0.0;
    let mut max_rhat_single = f64::NEG_INFINITY;
    for k in 0..2 {
        let single_panel = transform_scores(&panel.select_rows(&train_rows).select_expert(k));
        let single = fit(&single_panel, &settings.model, &with_seed(rng.next_u64()))?;
        let ab = sample_ability(&z_star, &[0.0], &single_panel, &single.params, rng.next_u64())?;
        score_single += joint_truth_density_with(&ab, &eta_true[k..=k], settings.density)?;
        max_rhat_single = max_rhat_single.max(max_rhat(&single));
    }

    let max_rhat_multi = max_rhat(&multi);
    let flagged = !(max_rhat_multi <= settings.rhat_threshold && max_rhat_single <= settings.rhat_threshold);
    if flagged {
        log::warn!(
            "replicate {r} (z correlation {}) flagged: max R-hat {max_rhat_multi:.3} multi, {max_rhat_single:.3} single",
            sim.z_correlation
        );
    }
    let mut ls = [[0.0; 2]; 2];
    for (p, row) in ls.iter_mut().enumerate() {
        for (s, v) in row.iter_mut().enumerate() {
            *v = multi.lengthscale_median(p, s);
        }
    }
    Ok(ReplicateResult {
        z_correlation: sim.z_correlation,
        replicate: r,
        held_out,
        z_star,
        eta_true,
        score_multi,
        score_single,
        max_rhat_multi,
        max_rhat_single,
        flagged,
        lengthscale_median: ls,
    })
}

/// Runs every replicate of every arm in parallel and aggregates per arm.
pub fn run_study(arms: &[SimConfig], settings: &StudySettings) -> Result<StudyResult> {
    if arms.is_empty() {
        return Err(Error::Config("study needs at least one arm".into()));
    }
    for a in arms {
        a.validate()?;
    }
    settings.model.validate()?;
    settings.hmc.validate()?;
    if !(settings.rhat_threshold >= 1.0) {
        return Err(Error::Config(format!(
            "rhat_threshold must be at least 1, got {}",
            settings.rhat_threshold
        )));
    }
    let jobs: Vec<(usize, usize)> = arms
        .iter()
        .enumerate()
        .flat_map(|(a, cfg)| (0..cfg.n_datasets).map(move |r| (a, r)))
        .collect();
    let replicates: Vec<ReplicateResult> = jobs
        .par_iter()
        .map(|&(a, r)| {
            run_replicate(&arms[a], settings, r).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("arm {a}, replicate {r}: {m}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let summaries = arms
        .iter()
        .enumerate()
        .map(|(a, cfg)| {
            let rows: Vec<ReplicateResult> = jobs
                .iter()
                .zip(&replicates)
                .filter(|((arm, _), _)| *arm == a)
                .map(|(_, r)| r.clone())
                .collect();
            summarize_arm(cfg.z_correlation, &rows)
        })
        .collect();
    Ok(StudyResult {
        replicates,
        arms: summaries,
    })
}

/// Median of a slice (NaN when empty).
pub fn median_of(v: &[f64]) -> f64 {
    median(&mut v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperParams, MultiGpModel};
    use rand::SeedableRng;

    fn cfg(n: usize, rho: f64) -> SimConfig {
        SimConfig {
            n,
            z_correlation: rho,
            ..SimConfig::default()
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn score_mean_at_zero_covariate() {
        // with z = 0, ℓ' = b y² has mean b and variance 2b²
        let b = 1.0 / 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 1_000_000;
        let draws: Vec<f64> = (0..m)
            .map(|_| {
                let y: f64 = rng.sample(StandardNormal);
                b * y * y
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / m as f64;
        let mcse = (2.0 * b * b / m as f64).sqrt();
        assert!((mean - b).abs() < 3.0 * mcse, "{mean}");
    }

    #[test]
    fn covariate_correlation() {
        let (p, _) = gen_dataset(&cfg(100_000, 0.7), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let z = p.z();
        let c0: Vec<f64> = z.column(0).iter().copied().collect();
        let c1: Vec<f64> = z.column(1).iter().copied().collect();
        assert!((corr(&c0, &c1) - 0.7).abs() < 0.01);
        let (p, _) = gen_dataset(&cfg(100_000, 0.0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c0: Vec<f64> = p.z().column(0).iter().copied().collect();
        let c1: Vec<f64> = p.z().column(1).iter().copied().collect();
        assert!(corr(&c0, &c1).abs() < 0.01);
    }

    #[test]
    fn scores_scale_linearly_in_b() {
        let base = cfg(50, 0.7);
        let doubled = SimConfig { b: 2.0 * base.b, ..base };
        let (p1, _) = gen_dataset(&base, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (p2, _) = gen_dataset(&doubled, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p1.z(), p2.z());
        for (a, b) in p1.scores().iter().zip(p2.scores().iter()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn truth_is_bounded_by_minus_b() {
        let c = cfg(500, 0.7);
        let (p, truth) = gen_dataset(&c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (t, z) in truth.iter().zip(p.z().iter()) {
            assert!(*t <= -c.b);
            assert_eq!(*t == -c.b, *z == 0.0);
        }
        assert!(p.norm().iter().all(|a| *a == 0.0));
    }

    fn ability(eta: DMatrix<f64>) -> AbilityDraws {
        let k = eta.ncols();
        AbilityDraws {
            eta,
            z_star: vec![0.0; 2],
            a_star: vec![0.0; k],
        }
    }

    #[test]
    fn truth_density_of_standard_noise() {
        let truth = [0.3, -1.2];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 100_000;
        let eta = DMatrix::from_fn(m, 2, |_, k| truth[k] + rng.sample::<f64, _>(StandardNormal));
        let v = joint_truth_density(&ability(eta), &truth).unwrap();
        let want = -(2.0 * std::f64::consts::PI).ln();
        assert!((v - want).abs() < 0.02, "{v} vs {want}");
    }

    #[test]
    fn truth_density_decreases_into_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eta = DMatrix::from_fn(2000, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = ability(eta);
        let mut last = f64::INFINITY;
        for d in [0.0, 2.0, 5.0, 10.0] {
            let v = joint_truth_density(&a, &[d, d]).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < -90.0);
    }

    #[test]
    fn scalar_truth_density_is_normal() {
        let eta = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let v = joint_truth_density(&ability(eta), &[2.0]).unwrap();
        // mean 3, sample variance 2.5 (ridged by 1e-8 · 2.5)
        let var = 2.5 * (1.0 + 1e-8);
        let want = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 / var;
        assert!((v - want).abs() < 1e-12);
        let few = ability(DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        assert!(joint_truth_density(&few, &[0.0]).is_err());
        let flat = ability(DMatrix::from_element(5, 2, 1.0));
        assert!(joint_truth_density(&flat, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn kde_density_matches_direct_sum() {
        let eta = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 3.0, 4.0]);
        let a = ability(eta);
        // sample variance 10/3, Scott factor 4^(-2/5)
        let h2 = 10.0 / 3.0 * (1.0 + 1e-8) * 4f64.powf(-0.4);
        let x = 1.5;
        let want = ([0.0, 1.0, 3.0, 4.0].iter())
            .map(|c: &f64| (-(x - c) * (x - c) / (2.0 * h2)).exp() / (2.0 * std::f64::consts::PI * h2).sqrt())
            .sum::<f64>()
            .ln()
            - 4f64.ln();
        let got = joint_truth_density_with(&a, &[x], DensityMethod::Kde).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn kde_density_of_gaussian_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 5000;
        let eta = DMatrix::from_fn(m, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = joint_truth_density_with(&ability(eta), &[0.5, 0.0], DensityMethod::Kde).unwrap();
        // smoothing inflates the variance by the squared Scott factor
        let s2 = 1.0 + (m as f64).powf(-1.0 / 3.0);
        let want = -(2.0 * std::f64::consts::PI * s2).ln() - 0.125 / s2;
        assert!((v - want).abs() < 0.15, "{v} vs {want}");
    }

    /// Scalar GP log marginal written out with a general inverse and determinant.
    fn scalar_gp_oracle(z: &DMatrix<f64>, y: &[f64], ls: &[f64], sd: f64, mean: f64, noise: f64) -> f64 {
        let n = y.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let q: f64 = (0..z.ncols()).map(|p| ((z[(i, p)] - z[(j, p)]) / ls[p]).powi(2)).sum();
            sd * sd * (-0.5 * q).exp() + if i == j { noise * noise } else { 0.0 }
        });
        let r = DVector::from_fn(n, |i, _| y[i] - mean);
        let det = k.clone().lu().determinant();
        let inv = k.try_inverse().unwrap();
        -0.5 * (r.transpose() * inv * &r)[(0, 0)] - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn single_output_path_matches_scalar_oracle() {
        let (p, _) = gen_dataset(&cfg(25, 0.7), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for k in 0..2 {
            let t = transform_scores(&p.select_expert(k));
            let model = MultiGpModel::new(t.clone(), ModelConfig::default()).unwrap();
            let mut h = HyperParams::default_for(1, 2);
            h.lengthscales = DMatrix::from_column_slice(2, 1, &[0.8, 3.0]);
            h.means = vec![0.6];
            h.signal_sd = vec![0.7];
            h.noise_sd = vec![0.4];
            let got = model.log_likelihood(&h).unwrap();
            let y: Vec<f64> = t.values().iter().copied().collect();
            let want = scalar_gp_oracle(t.z(), &y, &[0.8, 3.0], 0.7, 0.6, 0.4);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1, 0.0).validate().is_err());
        assert!(cfg(10, 1.0).validate().is_err());
        assert!(SimConfig { b: 0.0, ..cfg(10, 0.0) }.validate().is_err());
        assert!(SimConfig { n_datasets: 0, ..cfg(10, 0.0) }.validate().is_err());
    }

    #[test]
    fn smoke_study_emits_finite_row() {
        let sim = SimConfig {
            n: 20,
            n_datasets: 1,
            seed: 3,
            ..SimConfig::default()
        };
        let settings = StudySettings {
            hmc: HmcConfig {
                n_chains: 2,
                n_warmup: 60,
                n_draws: 40,
                ..HmcConfig::default()
            },
            ..StudySettings::default()
        };
        let out = run_study(&[sim], &settings).unwrap();
        assert_eq!(out.replicates.len(), 1);
        let r = &out.replicates[0];
        assert!(r.score_multi.is_finite() && r.score_single.is_finite());
        assert!(r.lengthscale_median.iter().flatten().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(out.arms.len(), 1);
        assert_eq!(out.arms[0].n_replicates, 1);
        let again = run_study(&[sim], &settings).unwrap();
        assert_eq!(format!("{out:?}"), format!("{again:?}"));
    }
}
