use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapt::Welford;
use super::{ChainStats, HmcConfig, LogDensity};
use crate::error::Result;

fn value<T: LogDensity + ?Sized>(target: &T, x: &[f64]) -> Result<f64> {
    match target.log_density(x) {
        Ok(v) if v.is_nan() => Ok(f64::NEG_INFINITY),
        Ok(v) => Ok(v),
        Err(e) if e.is_numerical() => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Random-walk Metropolis with a diagonal proposal. During warmup the global
/// log scale follows a Robbins-Monro recursion toward the optimal acceptance
/// rate, and the per-coordinate proposal variance is re-estimated once at the
/// warmup midpoint.
pub(super) fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &HmcConfig,
    init: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, ChainStats)> {
    let dim = target.dim();
    let goal = if dim == 1 { 0.44 } else { 0.234 };
    let mut log_scale = (2.38 / (dim as f64).sqrt()).ln();
    let mut var = vec![1.0; dim];
    let mut x = init;
    let mut lp = value(target, &x)?;
    let mut welford = Welford::new(dim);
    let half = cfg.n_warmup / 2;

    let step = |x: &mut Vec<f64>, lp: &mut f64, scale: f64, var: &[f64], rng: &mut ChaCha8Rng| -> Result<bool> {
        let prop: Vec<f64> = x
            .iter()
            .zip(var)
            .map(|(xi, v)| {
                let z: f64 = rng.sample(StandardNormal);
                xi + scale * v.sqrt() * z
            })
            .collect();
        let lp_prop = value(target, &prop)?;
        let log_u: f64 = rng.random::<f64>().ln();
        if lp_prop > f64::NEG_INFINITY && log_u < lp_prop - *lp {
            *x = prop;
            *lp = lp_prop;
            Ok(true)
        } else {
            Ok(false)
        }
    };

    let default_log_scale = log_scale;
    let mut since_reset = 0usize;
    for i in 0..cfg.n_warmup {
        let accepted = step(&mut x, &mut lp, log_scale.exp(), &var, rng)?;
        since_reset += 1;
        let rate = 1.0 / (since_reset as f64).powf(0.6);
        log_scale += rate * (accepted as u8 as f64 - goal);
        if i >= half / 2 {
            welford.add(&x);
        }
        if i + 1 == half && welford.count() >= 20 {
            var = welford.regularized_variance();
            log_scale = default_log_scale;
            since_reset = 0;
        }
    }

    let scale = log_scale.exp();
    let mut draws = Vec::with_capacity(cfg.n_draws);
    let mut accepts = 0usize;
    for _ in 0..cfg.n_draws {
        accepts += step(&mut x, &mut lp, scale, &var, rng)? as usize;
        draws.push(x.clone());
    }
    Ok((
        draws,
        ChainStats {
            acceptance: accepts as f64 / cfg.n_draws as f64,
            step_size: scale,
            divergences: 0,
            mean_leapfrog: 0.0,
            inv_metric: var,
        },
    ))
}
