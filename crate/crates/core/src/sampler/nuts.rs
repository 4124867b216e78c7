use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapt::{DualAveraging, Welford, WindowSchedule};
use super::{ChainStats, HmcConfig, LogDensity, DIVERGENCE_THRESHOLD};
use crate::error::{Error, Result};

/// Position, momentum, and cached log density and gradient.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

/// Kinetic plus potential energy under a diagonal inverse metric.
pub fn hamiltonian(z: &PhasePoint, inv_metric: &[f64]) -> f64 {
    let kinetic: f64 = z.p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>() * 0.5;
    -z.logp + kinetic
}

fn evaluate<T: LogDensity + ?Sized>(target: &T, q: &[f64], chain: usize) -> Result<(f64, Vec<f64>)> {
    match target.log_density_and_grad(q) {
        Ok((lp, g)) if lp.is_finite() => {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    chain,
                    position: q.to_vec(),
                });
            }
            Ok((lp, g))
        }
        // -inf, NaN or a numerical failure: the point is unusable
        Ok((_, g)) => Ok((f64::NEG_INFINITY, g)),
        Err(e) if e.is_numerical() => Ok((f64::NEG_INFINITY, vec![0.0; q.len()])),
        Err(e) => Err(e),
    }
}

/// One leapfrog step of size `eps` (negative to integrate backward).
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    z: &PhasePoint,
    inv_metric: &[f64],
    eps: f64,
) -> Result<PhasePoint> {
    leapfrog_chain(target, z, inv_metric, eps, 0)
}

fn leapfrog_chain<T: LogDensity + ?Sized>(
    target: &T,
    z: &PhasePoint,
    inv_metric: &[f64],
    eps: f64,
    chain: usize,
) -> Result<PhasePoint> {
    let mut p: Vec<f64> = z.p.iter().zip(&z.grad).map(|(p, g)| p + 0.5 * eps * g).collect();
    let q: Vec<f64> = z
        .q
        .iter()
        .zip(&p)
        .zip(inv_metric)
        .map(|((q, p), m)| q + eps * m * p)
        .collect();
    let (logp, grad) = evaluate(target, &q, chain)?;
    if logp.is_finite() {
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
    }
    Ok(PhasePoint { q, p, logp, grad })
}

fn sample_momentum(rng: &mut ChaCha8Rng, inv_metric: &[f64]) -> Vec<f64> {
    inv_metric
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            z / m.sqrt()
        })
        .collect()
}

fn velocity(p: &[f64], inv_metric: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_metric).map(|(p, m)| p * m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// No U-turn between the two ends (velocities) for summed momentum `rho`.
fn no_u_turn(v_minus: &[f64], v_plus: &[f64], rho: &[f64]) -> bool {
    dot(v_plus, rho) > 0.0 && dot(v_minus, rho) > 0.0
}

struct Sampler<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    inv_metric: Vec<f64>,
    eps: f64,
    max_depth: usize,
    chain: usize,
}

struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

/// Endpoint data returned by a subtree build.
struct Subtree {
    propose: PhasePoint,
    log_sum_weight: f64,
    rho: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    v_beg: Vec<f64>,
    v_end: Vec<f64>,
    valid: bool,
}

impl<'a, T: LogDensity + ?Sized> Sampler<'a, T> {
    /// Extends the trajectory from `edge` by `2^depth` steps in direction `sign`.
    /// `edge` is updated to the new outermost point.
    fn build_tree(
        &self,
        depth: usize,
        edge: &mut PhasePoint,
        sign: f64,
        h0: f64,
        stats: &mut TreeStats,
        rng: &mut ChaCha8Rng,
    ) -> Result<Subtree> {
        if depth == 0 {
            let next = leapfrog_chain(self.target, edge, &self.inv_metric, sign * self.eps, self.chain)?;
            stats.n_leapfrog += 1;
            let mut h = hamiltonian(&next, &self.inv_metric);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            let divergent = h - h0 > DIVERGENCE_THRESHOLD;
            if divergent {
                stats.divergent = true;
            }
            let lw = h0 - h;
            stats.sum_metro_prob += if lw > 0.0 { 1.0 } else { lw.exp() };
            let v = velocity(&next.p, &self.inv_metric);
            let p = next.p.clone();
            *edge = next.clone();
            return Ok(Subtree {
                propose: next,
                log_sum_weight: lw,
                rho: p.clone(),
                p_beg: p.clone(),
                p_end: p,
                v_beg: v.clone(),
                v_end: v,
                valid: !divergent,
            });
        }

        let init = self.build_tree(depth - 1, edge, sign, h0, stats, rng)?;
        if !init.valid {
            return Ok(init);
        }
        let fin = self.build_tree(depth - 1, edge, sign, h0, stats, rng)?;
        if !fin.valid {
            return Ok(Subtree { valid: false, ..fin });
        }

        let lsw = log_sum_exp(init.log_sum_weight, fin.log_sum_weight);
        let propose = if fin.log_sum_weight > lsw || rng.random::<f64>() < (fin.log_sum_weight - lsw).exp() {
            fin.propose
        } else {
            init.propose
        };
        let rho = add(&init.rho, &fin.rho);
        let mut persist = no_u_turn(&init.v_beg, &fin.v_end, &rho);
        let rho_ext = add(&init.rho, &fin.p_beg);
        persist &= no_u_turn(&init.v_beg, &fin.v_beg, &rho_ext);
        let rho_ext = add(&fin.rho, &init.p_end);
        persist &= no_u_turn(&init.v_end, &fin.v_end, &rho_ext);

        Ok(Subtree {
            propose,
            log_sum_weight: lsw,
            rho,
            p_beg: init.p_beg,
            p_end: fin.p_end,
            v_beg: init.v_beg,
            v_end: fin.v_end,
            valid: persist,
        })
    }

    /// One multinomial transition from `current`. Returns the new point,
    /// acceptance statistic, leapfrog count and divergence flag.
    fn transition(&self, current: &PhasePoint, rng: &mut ChaCha8Rng) -> Result<(PhasePoint, f64, usize, bool)> {
        let mut z0 = current.clone();
        z0.p = sample_momentum(rng, &self.inv_metric);
        let h0 = hamiltonian(&z0, &self.inv_metric);
        let v0 = velocity(&z0.p, &self.inv_metric);

        let mut fwd = z0.clone();
        let mut bck = z0.clone();
        let mut sample = z0.clone();
        // momenta and velocities at the two outer ends of the trajectory
        let (mut p_ff, mut v_ff) = (z0.p.clone(), v0.clone());
        let (mut p_bb, mut v_bb) = (z0.p.clone(), v0);
        let mut rho = z0.p.clone();
        let mut log_sum_weight = 0.0;
        let mut stats = TreeStats {
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        };

        for depth in 0..self.max_depth {
            let forward = rng.random::<f64>() > 0.5;
            let (sub, persist) = if forward {
                let sub = self.build_tree(depth, &mut fwd, 1.0, h0, &mut stats, rng)?;
                let persist = sub.valid && self.merged_ok(&rho, &v_bb, &p_ff, &v_ff, &sub);
                p_ff = sub.p_end.clone();
                v_ff = sub.v_end.clone();
                (sub, persist)
            } else {
                let sub = self.build_tree(depth, &mut bck, -1.0, h0, &mut stats, rng)?;
                let persist = sub.valid && self.merged_ok(&rho, &v_ff, &p_bb, &v_bb, &sub);
                p_bb = sub.p_end.clone();
                v_bb = sub.v_end.clone();
                (sub, persist)
            };
            if !sub.valid {
                break;
            }
            if sub.log_sum_weight > log_sum_weight
                || rng.random::<f64>() < (sub.log_sum_weight - log_sum_weight).exp()
            {
                sample = sub.propose.clone();
            }
            log_sum_weight = log_sum_exp(log_sum_weight, sub.log_sum_weight);
            rho = add(&rho, &sub.rho);
            if !persist {
                break;
            }
        }
        let accept = if stats.n_leapfrog > 0 {
            stats.sum_metro_prob / stats.n_leapfrog as f64
        } else {
            0.0
        };
        Ok((sample, accept, stats.n_leapfrog, stats.divergent))
    }

    /// U-turn checks after joining `sub` onto the old trajectory. `far` is the
    /// old end away from the join, `near` the old end at the join.
    fn merged_ok(
        &self,
        rho_old: &[f64],
        v_far: &[f64],
        p_near: &[f64],
        v_near: &[f64],
        sub: &Subtree,
    ) -> bool {
        let rho = add(rho_old, &sub.rho);
        no_u_turn(v_far, &sub.v_end, &rho)
            && no_u_turn(v_far, &sub.v_beg, &add(rho_old, &sub.p_beg))
            && no_u_turn(v_near, &sub.v_end, &add(&sub.rho, p_near))
    }

    /// Doubles or halves the step size until a single leapfrog step crosses
    /// an acceptance probability of 0.8.
    fn init_step_size(&mut self, z: &PhasePoint, rng: &mut ChaCha8Rng) -> Result<()> {
        let target = 0.8f64.ln();
        let mut direction = 0.0;
        for _ in 0..100 {
            let mut z0 = z.clone();
            z0.p = sample_momentum(rng, &self.inv_metric);
            let h0 = hamiltonian(&z0, &self.inv_metric);
            let z1 = leapfrog_chain(self.target, &z0, &self.inv_metric, self.eps, self.chain)?;
            let mut h = hamiltonian(&z1, &self.inv_metric);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            let delta = h0 - h;
            if direction == 0.0 {
                direction = if delta > target { 1.0 } else { -1.0 };
            } else if (direction > 0.0 && delta <= target) || (direction < 0.0 && delta >= target) {
                break;
            }
            self.eps = if direction > 0.0 { 2.0 * self.eps } else { 0.5 * self.eps };
            if self.eps > 1e7 || self.eps < 1e-12 {
                self.eps = self.eps.clamp(1e-12, 1e7);
                break;
            }
        }
        Ok(())
    }
}

/// Runs warmup then sampling for one chain.
pub(super) fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &HmcConfig,
    chain: usize,
    init: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, ChainStats)> {
    let dim = target.dim();
    let (logp, grad) = evaluate(target, &init, chain)?;
    let mut current = PhasePoint {
        q: init,
        p: vec![0.0; dim],
        logp,
        grad,
    };
    let mut s = Sampler {
        target,
        inv_metric: vec![1.0; dim],
        eps: 1.0,
        max_depth: cfg.max_depth(),
        chain,
    };
    s.init_step_size(&current, rng)?;
    let mut da = DualAveraging::new(s.eps, cfg.target_accept);
    let mut windows = WindowSchedule::new(cfg.n_warmup);
    let mut welford = Welford::new(dim);

    for i in 0..cfg.n_warmup {
        let (next, accept, _, _) = s.transition(&current, rng)?;
        current = next;
        s.eps = da.update(accept);
        if windows.in_slow_window(i) {
            welford.add(&current.q);
        }
        if windows.end_of_window(i) {
            s.inv_metric = welford.regularized_variance();
            welford = Welford::new(dim);
            s.init_step_size(&current, rng)?;
            da = DualAveraging::new(s.eps, cfg.target_accept);
        }
    }
    s.eps = da.final_step_size();

    let mut draws = Vec::with_capacity(cfg.n_draws);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    let mut leapfrogs = 0;
    for _ in 0..cfg.n_draws {
        let (next, accept, n_lf, divergent) = s.transition(&current, rng)?;
        current = next;
        accept_sum += accept;
        leapfrogs += n_lf;
        divergences += divergent as usize;
        draws.push(current.q.clone());
    }
    let n = cfg.n_draws as f64;
    Ok((
        draws,
        ChainStats {
            acceptance: accept_sum / n,
            step_size: s.eps,
            divergences,
            mean_leapfrog: leapfrogs as f64 / n,
            inv_metric: s.inv_metric,
        },
    ))
}
