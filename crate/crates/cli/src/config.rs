//! TOML run configuration.

use std::path::{Path, PathBuf};

use lpa_core::model::ModelConfig;
use lpa_core::pool::{default_c_grid, DEFAULT_WARMUP};
use lpa_core::sampler::HmcConfig;
use lpa_core::sim::{DensityMethod, SimConfig, StudySettings};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub input: InputSection,
    pub model: ModelConfig,
    pub sampler: SamplerSection,
    pub predict: PredictSection,
    pub pool: PoolSection,
    pub simulate: SimulateSection,
    pub study: StudySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            threads: 0,
            input: InputSection::default(),
            model: ModelConfig::default(),
            sampler: SamplerSection::default(),
            predict: PredictSection::default(),
            pool: PoolSection::default(),
            simulate: SimulateSection::default(),
            study: StudySection::default(),
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub panel: Option<PathBuf>,
    pub draws: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub psi: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let h = HmcConfig::default();
        Self {
            n_chains: h.n_chains,
            n_warmup: h.n_warmup,
            n_draws: h.n_draws,
            target_accept: h.target_accept,
            max_leapfrog: h.max_leapfrog,
        }
    }
}

impl SamplerSection {
    pub fn hmc(&self, seed: u64) -> HmcConfig {
        HmcConfig {
            n_chains: self.n_chains,
            n_warmup: self.n_warmup,
            n_draws: self.n_draws,
            target_accept: self.target_accept,
            max_leapfrog: self.max_leapfrog,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Also write every ability draw per query.
    pub full_dump: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub c_grid: Vec<f64>,
    pub warmup: usize,
    /// Concentration of the fixed softmax column.
    pub softmax_c: f64,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            c_grid: default_c_grid(),
            warmup: DEFAULT_WARMUP,
            softmax_c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub b: f64,
    /// One study arm per covariate correlation.
    pub z_correlations: Vec<f64>,
    pub n_datasets: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            n: s.n,
            b: s.b,
            z_correlations: vec![0.0, s.z_correlation],
            n_datasets: s.n_datasets,
        }
    }
}

/// Study fitting settings. Chain counts and lengths override `[sampler]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub rhat_threshold: f64,
    pub density: DensityMethod,
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        let s = StudySettings::default();
        Self {
            rhat_threshold: s.rhat_threshold,
            density: s.density,
            n_chains: s.hmc.n_chains,
            n_warmup: s.hmc.n_warmup,
            n_draws: s.hmc.n_draws,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.sampler.hmc(self.seed).validate()?;
        let p = &self.pool;
        if p.c_grid.is_empty() {
            return Err(CliError::Config("pool.c_grid is empty".into()));
        }
        if let Some(c) = p.c_grid.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(CliError::Config(format!("pool.c_grid entries must be finite and >= 0, got {c}")));
        }
        if p.warmup == 0 {
            return Err(CliError::Config("pool.warmup must be at least 1".into()));
        }
        if !(p.softmax_c.is_finite() && p.softmax_c >= 0.0) {
            return Err(CliError::Config(format!("pool.softmax_c must be finite and >= 0, got {}", p.softmax_c)));
        }
        if self.simulate.z_correlations.is_empty() {
            return Err(CliError::Config("simulate.z_correlations is empty".into()));
        }
        for sim in self.sim_arms() {
            sim.validate()?;
        }
        let st = self.study_settings();
        st.hmc.validate()?;
        if !(st.rhat_threshold >= 1.0) {
            return Err(CliError::Config(format!(
                "study.rhat_threshold must be at least 1, got {}",
                st.rhat_threshold
            )));
        }
        Ok(())
    }

    pub fn hmc(&self) -> HmcConfig {
        self.sampler.hmc(self.seed)
    }

    pub fn sim_arms(&self) -> Vec<SimConfig> {
        let s = &self.simulate;
        s.z_correlations
            .iter()
            .map(|&rho| SimConfig {
                n: s.n,
                b: s.b,
                z_correlation: rho,
                n_datasets: s.n_datasets,
                seed: self.seed,
            })
            .collect()
    }

    pub fn study_settings(&self) -> StudySettings {
        let s = &self.study;
        StudySettings {
            model: self.model,
            hmc: HmcConfig {
                n_chains: s.n_chains,
                n_warmup: s.n_warmup,
                n_draws: s.n_draws,
                ..self.sampler.hmc(self.seed)
            },
            rhat_threshold: s.rhat_threshold,
            density: s.density,
        }
    }
}

/// A config file together with its raw bytes and location.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: Vec<u8>,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let raw = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = String::from_utf8(raw.clone())
            .map_err(|_| CliError::Config(format!("{} is not valid UTF-8", path.display())))?;
        let config = RunConfig::from_toml(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, raw, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolved path of a required input.
    pub fn input(&self, name: &str, p: &Option<PathBuf>) -> CliResult<PathBuf> {
        p.as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| CliError::Config(format!("input.{name} is required for this command")))
    }
}
