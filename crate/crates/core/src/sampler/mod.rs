//! Gradient-based MCMC over an unconstrained parameter space.
//!
//! [`hmc_sample`] runs multinomial-sampling HMC with trajectory doubling and a
//! U-turn stop, dual-averaging step size adaptation and windowed diagonal metric
//! adaptation. [`rwm_sample`] is a gradient-free random-walk Metropolis used as
//! an independent cross-check. Both are generic over [`LogDensity`] and run each
//! chain on its own RNG stream derived from `(seed, chain)`, so output does not
//! depend on thread scheduling.

mod adapt;
pub mod diagnostics;
mod nuts;
mod rwm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{bulk_ess, ess, mcse_mean, split_rhat};
pub use nuts::{hamiltonian, leapfrog, PhasePoint};

use crate::error::{Error, Result};
use crate::model::MultiGpModel;

/// Hamiltonian error above which a transition is flagged divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Fraction of divergent post-warmup transitions that triggers a warning.
pub const DIVERGENCE_WARN_RATE: f64 = 0.2;

/// A log density on `R^dim`, up to an additive constant.
///
/// Returning `Ok(-inf)` or an error marks a point outside the usable region;
/// samplers treat it as a rejection.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> Result<f64>;

    fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl LogDensity for MultiGpModel {
    fn dim(&self) -> usize {
        MultiGpModel::dim(self)
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        MultiGpModel::log_density(self, x)
    }

    fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        MultiGpModel::log_density_and_grad(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 500,
            n_draws: 500,
            target_accept: 0.8,
            max_leapfrog: 256,
            seed: 1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_draws == 0 || self.n_warmup == 0 || self.max_leapfrog == 0 {
            return Err(Error::Config("sampler counts must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        Ok(())
    }

    /// Largest tree depth whose trajectory fits in `max_leapfrog` steps.
    pub fn max_depth(&self) -> usize {
        (usize::BITS - 1 - self.max_leapfrog.leading_zeros()) as usize
    }
}

/// Per-chain sampler statistics after warmup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainStats {
    pub acceptance: f64,
    pub step_size: f64,
    pub divergences: usize,
    pub mean_leapfrog: f64,
    pub inv_metric: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub chains: Vec<ChainStats>,
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub divergence_rate: f64,
    /// Set when more than [`DIVERGENCE_WARN_RATE`] of post-warmup transitions diverged.
    pub divergence_warning: bool,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess_bulk.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Post-warmup draws, chain-major: draw `d` of chain `c` is row `c * n_draws + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub dim: usize,
    pub n_chains: usize,
    pub n_draws: usize,
    pub draws: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Draws of coordinate `i`, one vector per chain.
    pub fn coordinate_chains(&self, i: usize) -> Vec<Vec<f64>> {
        self.draws
            .chunks(self.n_draws)
            .map(|chain| chain.iter().map(|x| x[i]).collect())
            .collect()
    }

    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|x| x[i]).collect()
    }

    fn assemble(dim: usize, per_chain: Vec<(Vec<Vec<f64>>, ChainStats)>, n_draws: usize) -> Self {
        let n_chains = per_chain.len();
        let mut draws = Vec::with_capacity(n_chains * n_draws);
        let mut chains = Vec::with_capacity(n_chains);
        for (d, s) in per_chain {
            draws.extend(d);
            chains.push(s);
        }
        let mut out = Self {
            dim,
            n_chains,
            n_draws,
            draws,
            diagnostics: Diagnostics {
                chains,
                rhat: vec![],
                ess_bulk: vec![],
                divergence_rate: 0.0,
                divergence_warning: false,
            },
        };
        let rhat = (0..dim).map(|i| split_rhat(&out.coordinate_chains(i))).collect();
        let ess_bulk = (0..dim).map(|i| bulk_ess(&out.coordinate_chains(i))).collect();
        let div: usize = out.diagnostics.chains.iter().map(|c| c.divergences).sum();
        let rate = div as f64 / (n_chains * n_draws) as f64;
        out.diagnostics.rhat = rhat;
        out.diagnostics.ess_bulk = ess_bulk;
        out.diagnostics.divergence_rate = rate;
        out.diagnostics.divergence_warning = rate > DIVERGENCE_WARN_RATE;
        if out.diagnostics.divergence_warning {
            log::warn!("{:.1}% of post-warmup transitions diverged", 100.0 * rate);
        }
        out
    }
}

/// RNG for one chain: a fixed stream of the seed.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Zero vector with Uniform(-0.1, 0.1) jitter, redrawn until the target is finite.
fn initial_point<T: LogDensity + ?Sized>(target: &T, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    const TRIES: usize = 100;
    for _ in 0..TRIES {
        let x: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-0.1..0.1)).collect();
        if let Ok((lp, g)) = target.log_density_and_grad(&x) {
            if lp.is_finite() && g.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
    }
    Err(Error::Numerical(format!(
        "target not finite at {TRIES} jittered initial points near zero"
    )))
}

/// Samples `target` with adaptive multinomial HMC.
pub fn hmc_sample<T: LogDensity + ?Sized>(target: &T, cfg: &HmcConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let per_chain: Result<Vec<_>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = chain_rng(cfg.seed, c);
            let init = initial_point(target, &mut rng)?;
            nuts::run_chain(target, cfg, c, init, &mut rng)
        })
        .collect();
    Ok(PosteriorDraws::assemble(target.dim(), per_chain?, cfg.n_draws))
}

/// Samples `target` with adaptive random-walk Metropolis (no gradients used
/// after initialization).
pub fn rwm_sample<T: LogDensity + ?Sized>(target: &T, cfg: &HmcConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let per_chain: Result<Vec<_>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = chain_rng(cfg.seed, c);
            let init = initial_point(target, &mut rng)?;
            rwm::run_chain(target, cfg, init, &mut rng)
        })
        .collect();
    Ok(PosteriorDraws::assemble(target.dim(), per_chain?, cfg.n_draws))
}
