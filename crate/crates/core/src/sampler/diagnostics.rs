//! Convergence diagnostics over multiple chains of one scalar quantity.

use statrs::distribution::{ContinuousCDF, Normal};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Splits each chain into its first and second halves (dropping the middle
/// draw of odd-length chains).
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Split-chain potential scale reduction factor.
///
/// Returns 1.0 when the pooled draws have zero variance.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.is_empty() || split[0].len() < 2 {
        return f64::NAN;
    }
    let n = split[0].len() as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let w = mean(&split.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b_over_n = if means.len() > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = (n - 1.0) / n * w + b_over_n;
    if var_plus == 0.0 {
        return 1.0;
    }
    if w == 0.0 {
        return f64::INFINITY;
    }
    (var_plus / w).sqrt()
}

/// Biased autocovariance at lags `0..n`.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..n)
        .map(|lag| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
fn ess_of_chains(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let nf = n as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chain_means);
    }
    if var_plus == 0.0 {
        return (m * n) as f64;
    }
    let rho_at = |t: usize| -> f64 {
        let acov_t = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (mean_var - acov_t) / var_plus
    };
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    rho[1] = rho_at(1);
    let mut t = 1;
    while t < n - 4 && rho[t - 1] + rho[t] > 0.0 {
        rho[t + 1] = rho_at(t + 1);
        rho[t + 2] = rho_at(t + 2);
        if rho[t + 1] + rho[t + 2] < 0.0 {
            break;
        }
        t += 2;
    }
    let max_t = t;
    // enforce a monotone sequence of paired sums
    let mut u = 1;
    while u + 2 < max_t {
        if rho[u + 1] + rho[u + 2] > rho[u - 1] + rho[u] {
            let avg = (rho[u - 1] + rho[u]) / 2.0;
            rho[u + 1] = avg;
            rho[u + 2] = avg;
        }
        u += 2;
    }
    let tau = -1.0 + 2.0 * rho[..=max_t].iter().sum::<f64>().max(0.0) + rho.get(max_t + 1).copied().unwrap_or(0.0);
    let tau = tau.max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

/// Effective sample size of the raw draws (split chains).
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    ess_of_chains(&split_chains(chains))
}

/// Bulk effective sample size: ESS of rank-normalized split chains.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let total: usize = split.iter().map(|c| c.len()).sum();
    if total == 0 {
        return f64::NAN;
    }
    let mut idx: Vec<(usize, usize, f64)> = split
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, x)| (c, i, *x)))
        .collect();
    idx.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut ranks = vec![vec![0.0; split[0].len()]; split.len()];
    // average ranks over ties
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].2 == idx[i].2 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for e in &idx[i..=j] {
            ranks[e.0][e.1] = r;
        }
        i = j + 1;
    }
    let std = Normal::standard();
    let s = total as f64;
    let z: Vec<Vec<f64>> = ranks
        .iter()
        .map(|c| c.iter().map(|r| std.inverse_cdf((r - 0.375) / (s + 0.25))).collect())
        .collect();
    ess_of_chains(&z)
}

/// Monte Carlo standard error of the mean.
pub fn mcse_mean(chains: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    (sample_var(&all) / ess(chains)).sqrt()
}
