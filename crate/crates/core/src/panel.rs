//! Score panels and the deterministic maps between log scores, cube-root
//! transformed scores and expected log predictive density.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Historical log predictive scores of `K` experts over `n` observations,
/// together with the pooling covariates observed alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePanel {
    z: DMatrix<f64>,
    scores: DMatrix<f64>,
    norm: DMatrix<f64>,
    expert_names: Vec<String>,
}

impl ScorePanel {
    /// Builds a panel from covariates `z` (n x P), log scores (n x K) and
    /// optional normalization constants (n x K). Missing constants default to 0,
    /// in which case `scores` are read as negated transformed scores.
    pub fn new(
        z: DMatrix<f64>,
        scores: DMatrix<f64>,
        norm: Option<DMatrix<f64>>,
        expert_names: Vec<String>,
    ) -> Result<Self> {
        let (n, k) = scores.shape();
        if n == 0 || k == 0 || z.ncols() == 0 {
            return Err(Error::Validation(format!(
                "panel needs n, K, P >= 1 (got n={n}, K={k}, P={})",
                z.ncols()
            )));
        }
        if z.nrows() != n {
            return Err(Error::Dimension(format!(
                "covariates have {} rows but scores have {n}",
                z.nrows()
            )));
        }
        if expert_names.len() != k {
            return Err(Error::Dimension(format!(
                "{} expert names for {k} score columns",
                expert_names.len()
            )));
        }
        let norm = norm.unwrap_or_else(|| DMatrix::zeros(n, k));
        if norm.shape() != (n, k) {
            return Err(Error::Dimension(format!(
                "normalization constants are {:?}, scores are {:?}",
                norm.shape(),
                (n, k)
            )));
        }
        if let Some((i, p)) = first_nonfinite(&z) {
            return Err(Error::Validation(format!("non-finite covariate at row {i}, column {p}")));
        }
        if let Some((i, j)) = first_nonfinite(&scores) {
            return Err(Error::Validation(format!(
                "non-finite log score at row {i}, expert '{}'",
                expert_names[j]
            )));
        }
        if let Some((i, j)) = first_nonfinite(&norm) {
            return Err(Error::Validation(format!(
                "non-finite normalization constant at row {i}, expert '{}'",
                expert_names[j]
            )));
        }
        for i in 0..n {
            for j in 0..k {
                if norm[(i, j)] < scores[(i, j)] {
                    return Err(Error::ScoreAboveMaximum {
                        row: i,
                        expert: expert_names[j].clone(),
                        a: norm[(i, j)],
                        score: scores[(i, j)],
                    });
                }
            }
        }
        Ok(Self {
            z,
            scores,
            norm,
            expert_names,
        })
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_experts(&self) -> usize {
        self.scores.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.z.ncols()
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Raw log scores, n x K.
    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    /// Normalization constants a_ik, n x K.
    pub fn norm(&self) -> &DMatrix<f64> {
        &self.norm
    }

    pub fn expert_names(&self) -> &[String] {
        &self.expert_names
    }

    /// Panel restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            z: self.z.select_rows(rows),
            scores: self.scores.select_rows(rows),
            norm: self.norm.select_rows(rows),
            expert_names: self.expert_names.clone(),
        }
    }

    /// Single-expert panel over the same covariates.
    pub fn select_expert(&self, k: usize) -> Self {
        Self {
            z: self.z.clone(),
            scores: self.scores.columns(k, 1).into_owned(),
            norm: self.norm.columns(k, 1).into_owned(),
            expert_names: vec![self.expert_names[k].clone()],
        }
    }
}

fn first_nonfinite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// Cube-root transformed scores `(a - l)^(1/3)`, the data the GP is fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPanel {
    z: DMatrix<f64>,
    values: DMatrix<f64>,
    expert_names: Vec<String>,
}

impl TransformedPanel {
    /// Wraps already-transformed values. Entries must be finite and nonnegative.
    pub fn new(z: DMatrix<f64>, values: DMatrix<f64>, expert_names: Vec<String>) -> Result<Self> {
        if z.nrows() != values.nrows() || expert_names.len() != values.ncols() {
            return Err(Error::Dimension(format!(
                "covariates {:?}, values {:?}, {} names",
                z.shape(),
                values.shape(),
                expert_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "transformed scores must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            z,
            values,
            expert_names,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_experts(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.z.ncols()
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// ℓ'' as an n x K matrix.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn expert_names(&self) -> &[String] {
        &self.expert_names
    }

    /// Column-stacked (expert-major) data vector.
    pub fn stacked(&self) -> Vec<f64> {
        // nalgebra storage is column-major, so this is already vec(ℓ'').
        self.values.as_slice().to_vec()
    }
}

/// Maximum log density of a Gaussian predictive with standard deviation `sigma_pred`.
pub fn compute_a(sigma_pred: f64) -> Result<f64> {
    if !(sigma_pred.is_finite() && sigma_pred > 0.0) {
        return Err(Error::Domain(format!(
            "predictive sd must be positive and finite, got {sigma_pred}"
        )));
    }
    Ok(-0.5 * (2.0 * std::f64::consts::PI * sigma_pred * sigma_pred).ln())
}

pub fn transform_scores(panel: &ScorePanel) -> TransformedPanel {
    // ScorePanel::new already rejected cells with a < l.
    let values = panel.norm().zip_map(panel.scores(), |a, l| (a - l).cbrt());
    TransformedPanel {
        z: panel.z().clone(),
        values,
        expert_names: panel.expert_names().to_vec(),
    }
}

/// Recovers log scores from transformed values: `l = a - (l'')^3`.
pub fn inverse_transform(transformed: &DMatrix<f64>, norm: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if transformed.shape() != norm.shape() {
        return Err(Error::Dimension(format!(
            "transformed {:?} vs normalization {:?}",
            transformed.shape(),
            norm.shape()
        )));
    }
    Ok(norm.zip_map(transformed, |a, t| a - t * t * t))
}

/// Local ELPD from the latent mean `f` and noise variance `sigma_kk`:
/// `E[a - X^3]` for `X ~ N(f, sigma_kk)`.
pub fn elpd_from_latent(a_star: f64, f: f64, sigma_kk: f64) -> f64 {
    a_star - f * f * f - 3.0 * f * sigma_kk
}
