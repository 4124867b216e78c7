//! CSV and JSON readers and writers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lpa_core::model::{cpc_pairs, hyperparams_from_parts, HyperParams, ModelFit};
use lpa_core::panel::ScorePanel;
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Full round-trip representation (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// A parsed CSV file: header plus string records, with line numbers.
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(path: &Path, bytes: &[u8]) -> CliResult<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
        let header = rdr
            .headers()
            .map_err(|e| CliError::input(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| CliError::input(path, e.to_string()))
            })
            .collect::<CliResult<_>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Self::parse(path, &read_bytes(path)?)
    }

    fn err(&self, msg: impl Into<String>) -> CliError {
        CliError::input(&self.path, msg)
    }

    /// Value at data row `i` (0-based) and column `j` as a float.
    pub fn f64_at(&self, i: usize, j: usize) -> CliResult<f64> {
        let s = &self.rows[i][j];
        s.parse::<f64>()
            .map_err(|_| self.err(format!("row {i}, column '{}': cannot parse '{s}' as a number", self.header[j])))
    }

    pub fn usize_at(&self, i: usize, j: usize) -> CliResult<usize> {
        let s = &self.rows[i][j];
        s.parse::<usize>().map_err(|_| {
            self.err(format!("row {i}, column '{}': cannot parse '{s}' as a count", self.header[j]))
        })
    }

    fn require_first(&self, name: &str) -> CliResult<()> {
        if self.header.first().map(String::as_str) != Some(name) {
            return Err(self.err(format!("first column must be '{name}'")));
        }
        Ok(())
    }

    /// Columns `z_1, z_2, …` directly after the id column.
    fn covariate_columns(&self) -> CliResult<Vec<usize>> {
        let cols: Vec<usize> = (1..self.header.len())
            .take_while(|&j| self.header[j] == format!("z_{j}"))
            .collect();
        if cols.is_empty() {
            return Err(self.err("expected covariate columns z_1, z_2, … after the id column"));
        }
        Ok(cols)
    }

    fn matrix(&self, cols: &[usize]) -> CliResult<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.rows.len(), cols.len());
        for i in 0..self.rows.len() {
            for (c, &j) in cols.iter().enumerate() {
                m[(i, c)] = self.f64_at(i, j)?;
            }
        }
        Ok(m)
    }

    fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r[0].clone()).collect()
    }

    fn require_rows(&self) -> CliResult<()> {
        if self.rows.is_empty() {
            return Err(self.err("no data rows"));
        }
        Ok(())
    }
}

/// A score panel as read from disk, with its observation ids.
pub struct PanelFile {
    pub obs_ids: Vec<String>,
    pub panel: ScorePanel,
}

/// Reads `obs_id, z_1..z_P, ls_<expert>…, a_<expert>…` (a columns optional).
pub fn read_panel(path: &Path, bytes: &[u8]) -> CliResult<PanelFile> {
    let t = Table::parse(path, bytes)?;
    t.require_first("obs_id")?;
    t.require_rows()?;
    let zc = t.covariate_columns()?;
    let rest = &t.header[zc.len() + 1..];
    let names: Vec<String> = rest
        .iter()
        .take_while(|h| h.starts_with("ls_"))
        .map(|h| h["ls_".len()..].to_string())
        .collect();
    if names.is_empty() {
        return Err(t.err("expected at least one ls_<expert> column after the covariates"));
    }
    let after = &rest[names.len()..];
    let expected_a: Vec<String> = names.iter().map(|e| format!("a_{e}")).collect();
    if !after.is_empty() && after != expected_a.as_slice() {
        return Err(t.err(format!(
            "columns after the scores must be {expected_a:?} or absent, found {after:?}"
        )));
    }
    let k = names.len();
    let first_ls = zc.len() + 1;
    let ls_cols: Vec<usize> = (first_ls..first_ls + k).collect();
    let z = t.matrix(&zc)?;
    let scores = t.matrix(&ls_cols)?;
    let norm = if after.is_empty() {
        None
    } else {
        let a_cols: Vec<usize> = (first_ls + k..first_ls + 2 * k).collect();
        Some(t.matrix(&a_cols)?)
    };
    let panel = ScorePanel::new(z, scores, norm, names).map_err(|e| CliError::input(path, e.to_string()))?;
    Ok(PanelFile {
        obs_ids: t.ids(),
        panel,
    })
}

/// One query point with optional normalization constants.
pub struct Query {
    pub id: String,
    pub z: Vec<f64>,
    pub a: Option<Vec<f64>>,
}

/// Reads `query_id, z_1..z_P, a_<expert>…` (a columns optional).
pub fn read_queries(path: &Path, expert_names: &[String], n_covariates: usize) -> CliResult<Vec<Query>> {
    let t = Table::read(path)?;
    t.require_first("query_id")?;
    t.require_rows()?;
    let zc = t.covariate_columns()?;
    if zc.len() != n_covariates {
        return Err(t.err(format!("{} covariate columns, panel has {n_covariates}", zc.len())));
    }
    let after = &t.header[zc.len() + 1..];
    let expected_a: Vec<String> = expert_names.iter().map(|e| format!("a_{e}")).collect();
    if !after.is_empty() && after != expected_a.as_slice() {
        return Err(t.err(format!(
            "columns after the covariates must be {expected_a:?} or absent, found {after:?}"
        )));
    }
    (0..t.rows.len())
        .map(|i| {
            let z = zc.iter().map(|&j| t.f64_at(i, j)).collect::<CliResult<Vec<_>>>()?;
            let a = if after.is_empty() {
                None
            } else {
                let start = zc.len() + 1;
                Some((start..start + expert_names.len()).map(|j| t.f64_at(i, j)).collect::<CliResult<Vec<_>>>()?)
            };
            Ok(Query {
                id: t.rows[i][0].clone(),
                z,
                a,
            })
        })
        .collect()
}

/// Reads `obs_id, psi_<expert>…` and checks it lines up with the panel.
pub fn read_psi(path: &Path, panel: &PanelFile) -> CliResult<DMatrix<f64>> {
    let t = Table::read(path)?;
    t.require_first("obs_id")?;
    let expected: Vec<String> = panel.panel.expert_names().iter().map(|e| format!("psi_{e}")).collect();
    if t.header[1..] != expected[..] {
        return Err(t.err(format!("columns after obs_id must be {expected:?}")));
    }
    if t.rows.len() != panel.obs_ids.len() {
        return Err(t.err(format!(
            "{} ψ rows but the panel has {} observations",
            t.rows.len(),
            panel.obs_ids.len()
        )));
    }
    for (i, (a, b)) in t.ids().iter().zip(&panel.obs_ids).enumerate() {
        if a != b {
            return Err(t.err(format!("row {i}: obs_id '{a}' does not match panel obs_id '{b}'")));
        }
    }
    let cols: Vec<usize> = (1..t.header.len()).collect();
    t.matrix(&cols)
}

fn corr_names(prefix: &str, names: &[String]) -> Vec<String> {
    cpc_pairs(names.len())
        .into_iter()
        .map(|(i, j)| format!("{prefix}_{}_{}", names[j], names[i]))
        .collect()
}

/// Constrained parameter column names for `K` experts and `P` covariates.
pub fn draw_columns(names: &[String], p: usize) -> Vec<String> {
    let k = names.len();
    let mut out = Vec::new();
    for s in 0..k {
        for q in 0..p {
            out.push(format!("lengthscale_{}_{}", q + 1, s + 1));
        }
    }
    out.extend(names.iter().map(|e| format!("mean_{e}")));
    out.extend(names.iter().map(|e| format!("signal_sd_{e}")));
    out.extend(corr_names("signal_corr", names));
    out.extend(names.iter().map(|e| format!("noise_sd_{e}")));
    out.extend(corr_names("noise_corr", names));
    out
}

fn draw_values(h: &HyperParams) -> Vec<f64> {
    let (k, p) = (h.n_experts(), h.n_covariates());
    let mut out = Vec::new();
    for s in 0..k {
        for q in 0..p {
            out.push(h.lengthscales[(q, s)]);
        }
    }
    out.extend(&h.means);
    out.extend(&h.signal_sd);
    out.extend(cpc_pairs(k).into_iter().map(|(i, j)| h.signal_corr[(i, j)]));
    out.extend(&h.noise_sd);
    out.extend(cpc_pairs(k).into_iter().map(|(i, j)| h.noise_corr[(i, j)]));
    out
}

pub fn draws_csv(fit: &ModelFit, names: &[String]) -> CliResult<Vec<u8>> {
    let p = fit.layout.n_covariates;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(draw_columns(names, p));
    write_record(&mut w, &header)?;
    let per_chain = fit.draws.n_draws;
    for (i, h) in fit.params.iter().enumerate() {
        let mut rec = vec![(i / per_chain).to_string(), (i % per_chain).to_string()];
        rec.extend(draw_values(h).into_iter().map(fmt_f64));
        write_record(&mut w, &rec)?;
    }
    finish(w)
}

/// Reads constrained draws written by `fit` for a panel with these experts.
pub fn read_draws(path: &Path, names: &[String], p: usize, lengthscale_upper: f64) -> CliResult<Vec<HyperParams>> {
    let t = Table::read(path)?;
    let mut expected = vec!["chain".to_string(), "draw".to_string()];
    expected.extend(draw_columns(names, p));
    if t.header != expected {
        return Err(t.err(format!(
            "draw columns do not match the panel (K={}, P={p}); expected {expected:?}",
            names.len()
        )));
    }
    t.require_rows()?;
    let k = names.len();
    let pairs = cpc_pairs(k);
    (0..t.rows.len())
        .map(|i| {
            t.usize_at(i, 0)?;
            t.usize_at(i, 1)?;
            let v = (2..t.header.len()).map(|j| t.f64_at(i, j)).collect::<CliResult<Vec<_>>>()?;
            let mut it = v.into_iter();
            let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
            let ls = take(k * p);
            let lengthscales = DMatrix::from_fn(p, k, |q, s| ls[s * p + q]);
            let means = take(k);
            let signal_sd = take(k);
            let signal_corr = corr_from(&pairs, &take(pairs.len()), k);
            let noise_sd = take(k);
            let noise_corr = corr_from(&pairs, &take(pairs.len()), k);
            hyperparams_from_parts(
                lengthscales,
                means,
                signal_sd,
                signal_corr,
                noise_sd,
                noise_corr,
                lengthscale_upper,
            )
            .map_err(|e| t.err(format!("row {i}: {e}")))
        })
        .collect()
}

fn corr_from(pairs: &[(usize, usize)], vals: &[f64], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::identity(k, k);
    for (&(i, j), &v) in pairs.iter().zip(vals) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    m
}

pub fn write_panel_csv(ids: &[String], panel: &ScorePanel) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let names = panel.expert_names();
    let mut header = vec!["obs_id".to_string()];
    header.extend((1..=panel.n_covariates()).map(|p| format!("z_{p}")));
    header.extend(names.iter().map(|e| format!("ls_{e}")));
    header.extend(names.iter().map(|e| format!("a_{e}")));
    write_record(&mut w, &header)?;
    for (i, id) in ids.iter().enumerate().take(panel.n()) {
        let mut rec = vec![id.clone()];
        rec.extend(panel.z().row(i).iter().map(|v| fmt_f64(*v)));
        rec.extend(panel.scores().row(i).iter().map(|v| fmt_f64(*v)));
        rec.extend(panel.norm().row(i).iter().map(|v| fmt_f64(*v)));
        write_record(&mut w, &rec)?;
    }
    finish(w)
}

pub fn write_record(w: &mut csv::Writer<Vec<u8>>, rec: &[String]) -> CliResult<()> {
    w.write_record(rec).map_err(|e| CliError::Config(format!("csv encoding: {e}")))
}

pub fn finish(w: csv::Writer<Vec<u8>>) -> CliResult<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::Config(format!("csv encoding: {}", e.error())))
}

pub fn to_json<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| CliError::Config(format!("json encoding: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Files produced by one command, written together once it has finished.
#[derive(Default)]
pub struct Outputs {
    files: BTreeMap<String, Vec<u8>>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect()
    }

    pub fn write_all(&self, dir: &Path) -> CliResult<()> {
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one run: what was asked for and on which bytes.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, InputRecord>,
    pub outputs: BTreeMap<String, String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}
