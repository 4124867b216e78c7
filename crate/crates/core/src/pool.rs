//! Linear pools driven by best-expert probabilities, and backtests of the
//! pooled log score.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::ScorePanel;

/// Large discrimination factor standing in for `c = ∞` (model selection).
pub const C_INFINITY_PROXY: f64 = 1e6;

/// Observations pooled before dynamic selection of `c` starts.
pub const DEFAULT_WARMUP: usize = 10;

/// `{0, 1, ..., 20, 1e6}`.
pub fn default_c_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (0..=20).map(f64::from).collect();
    g.push(C_INFINITY_PROXY);
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Natural,
    Selection,
    Softmax,
    Equal,
    Dynamic,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Natural => "natural",
            Scheme::Selection => "selection",
            Scheme::Softmax => "softmax",
            Scheme::Equal => "equal",
            Scheme::Dynamic => "dynamic",
        }
    }
}

/// Pool weights with the scheme that produced them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolWeights {
    pub w: Vec<f64>,
    pub scheme: Scheme,
    pub c: Option<f64>,
}

fn check_psi(psi: &[f64]) -> Result<()> {
    if psi.is_empty() {
        return Err(Error::Validation("ψ must have at least one entry".into()));
    }
    if psi.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Validation(format!("ψ entries must be finite and nonnegative: {psi:?}")));
    }
    Ok(())
}

/// `w = ψ`.
pub fn natural_weights(psi: &[f64]) -> Result<PoolWeights> {
    check_psi(psi)?;
    Ok(PoolWeights {
        w: psi.to_vec(),
        scheme: Scheme::Natural,
        c: None,
    })
}

/// All weight on the expert with the largest ψ, lowest index on ties.
pub fn selection_weights(psi: &[f64]) -> Result<PoolWeights> {
    check_psi(psi)?;
    let mut best = 0;
    for (k, p) in psi.iter().enumerate() {
        if *p > psi[best] {
            best = k;
        }
    }
    let mut w = vec![0.0; psi.len()];
    w[best] = 1.0;
    Ok(PoolWeights {
        w,
        scheme: Scheme::Selection,
        c: None,
    })
}

/// `w_k ∝ exp(c ψ_k)`.
pub fn softmax_weights(psi: &[f64], c: f64) -> Result<PoolWeights> {
    check_psi(psi)?;
    check_c(c)?;
    let max = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = psi.iter().map(|p| (c * (p - max)).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(PoolWeights {
        w: e.iter().map(|v| v / total).collect(),
        scheme: Scheme::Softmax,
        c: Some(c),
    })
}

pub fn equal_weights(k: usize) -> Result<PoolWeights> {
    if k == 0 {
        return Err(Error::Validation("need at least one expert".into()));
    }
    Ok(PoolWeights {
        w: vec![1.0 / k as f64; k],
        scheme: Scheme::Equal,
        c: None,
    })
}

fn check_c(c: f64) -> Result<()> {
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::Config(format!("c must be finite and nonnegative, got {c}")));
    }
    Ok(())
}

/// `log Σ_k w_k exp(ℓ_k)`, summing only over positive weights.
pub fn pooled_log_score(w: &PoolWeights, logscores: &[f64]) -> Result<f64> {
    if w.w.len() != logscores.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} log scores",
            w.w.len(),
            logscores.len()
        )));
    }
    if w.w.iter().any(|v| !v.is_finite() || *v < 0.0) || (w.w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("weights are not a probability vector: {:?}", w.w)));
    }
    if logscores.iter().any(|l| !l.is_finite()) {
        return Err(Error::Validation(format!("log scores must be finite: {logscores:?}")));
    }
    let terms: Vec<f64> = w
        .w
        .iter()
        .zip(logscores)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, l)| w.ln() + l)
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
}

/// One period of a pooling backtest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestRecord {
    pub t: usize,
    pub psi: Vec<f64>,
    pub c: Option<f64>,
    pub weights: PoolWeights,
    pub log_scores: Vec<f64>,
    pub pooled: f64,
}

/// A pooling rule that does not look at past performance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedRule {
    Natural,
    Selection,
    Softmax(f64),
    Equal,
}

impl FixedRule {
    pub fn weights(&self, psi: &[f64]) -> Result<PoolWeights> {
        match *self {
            FixedRule::Natural => natural_weights(psi),
            FixedRule::Selection => selection_weights(psi),
            FixedRule::Softmax(c) => softmax_weights(psi, c),
            FixedRule::Equal => equal_weights(psi.len()),
        }
    }
}

fn check_series(panel: &ScorePanel, psi_series: &DMatrix<f64>) -> Result<()> {
    if psi_series.shape() != (panel.n(), panel.n_experts()) {
        return Err(Error::Dimension(format!(
            "ψ series is {:?}, panel has {} observations of {} experts",
            psi_series.shape(),
            panel.n(),
            panel.n_experts()
        )));
    }
    Ok(())
}

fn row(m: &DMatrix<f64>, t: usize) -> Vec<f64> {
    m.row(t).iter().copied().collect()
}

/// Applies one rule at every period.
pub fn fixed_backtest(panel: &ScorePanel, psi_series: &DMatrix<f64>, rule: FixedRule) -> Result<Vec<BacktestRecord>> {
    check_series(panel, psi_series)?;
    (0..panel.n())
        .map(|t| {
            let psi = row(psi_series, t);
            let log_scores = row(panel.scores(), t);
            let weights = rule.weights(&psi)?;
            let pooled = pooled_log_score(&weights, &log_scores)?;
            Ok(BacktestRecord {
                t,
                psi,
                c: weights.c,
                weights,
                log_scores,
                pooled,
            })
        })
        .collect()
}

/// Softmax pooling with `c` re-chosen each period as the grid value with the
/// best cumulative pooled log score over all earlier periods. The first
/// `warmup` periods use the smallest grid value.
pub fn dynamic_backtest(
    panel: &ScorePanel,
    psi_series: &DMatrix<f64>,
    c_grid: &[f64],
    warmup: usize,
) -> Result<Vec<BacktestRecord>> {
    check_series(panel, psi_series)?;
    if c_grid.is_empty() {
        return Err(Error::Config("c grid is empty".into()));
    }
    for &c in c_grid {
        check_c(c)?;
    }
    if warmup == 0 {
        return Err(Error::Config("dynamic pooling needs warmup >= 1".into()));
    }
    let mut grid = c_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut cumulative = vec![0.0; grid.len()];
    let mut out = Vec::with_capacity(panel.n());
    for t in 0..panel.n() {
        let psi = row(psi_series, t);
        let log_scores = row(panel.scores(), t);
        let choice = if t < warmup {
            0
        } else {
            // strict improvement keeps the smallest c on ties
            let mut best = 0;
            for (i, v) in cumulative.iter().enumerate() {
                if *v > cumulative[best] {
                    best = i;
                }
            }
            best
        };
        let mut chosen = None;
        for (i, &c) in grid.iter().enumerate() {
            let w = softmax_weights(&psi, c)?;
            let s = pooled_log_score(&w, &log_scores)?;
            cumulative[i] += s;
            if i == choice {
                chosen = Some((w, s));
            }
        }
        let (mut weights, pooled) = chosen.expect("choice indexes the grid");
        weights.scheme = Scheme::Dynamic;
        out.push(BacktestRecord {
            t,
            psi,
            c: Some(grid[choice]),
            weights,
            log_scores,
            pooled,
        });
    }
    Ok(out)
}

pub fn cumulative_score(records: &[BacktestRecord]) -> f64 {
    records.iter().map(|r| r.pooled).sum()
}
