//! The subcommands. Each reads its inputs, computes, and writes every output
//! file at the end.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lpa_core::model::fit;
use lpa_core::panel::transform_scores;
use lpa_core::pool::{cumulative_score, dynamic_backtest, fixed_backtest, BacktestRecord, FixedRule};
use lpa_core::predict::{draw_rng, psi, sample_ability};
use lpa_core::sampler::{ChainStats, Diagnostics};
use lpa_core::sim::{gen_dataset, run_study};
use rand::RngCore;
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};
use crate::io::{
    draws_csv, finish, fmt_f64, read_bytes, read_draws, read_panel, read_psi, read_queries, sha256_hex, to_json,
    write_panel_csv, write_record, InputRecord, Manifest, Outputs, PanelFile,
};

/// A loaded configuration with command-line overrides applied.
pub struct Run {
    pub loaded: LoadedConfig,
    pub out_dir: PathBuf,
    inputs: BTreeMap<String, InputRecord>,
}

impl Run {
    pub fn new(loaded: LoadedConfig, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        let mut loaded = loaded;
        if let Some(s) = seed {
            loaded.config.seed = s;
        }
        let out_dir = out.unwrap_or_else(|| loaded.resolve(&loaded.config.out_dir));
        Self {
            loaded,
            out_dir,
            inputs: BTreeMap::new(),
        }
    }

    fn seed(&self) -> u64 {
        self.loaded.config.seed
    }

    /// Reads a configured input and records its hash for the manifest.
    fn input_bytes(&mut self, name: &str, p: &Option<PathBuf>) -> CliResult<(PathBuf, Vec<u8>)> {
        let path = self.loaded.input(name, p)?;
        let bytes = read_bytes(&path)?;
        self.inputs.insert(
            name.to_string(),
            InputRecord {
                path: p.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok((path, bytes))
    }

    fn panel(&mut self) -> CliResult<PanelFile> {
        let p = self.loaded.config.input.panel.clone();
        let (path, bytes) = self.input_bytes("panel", &p)?;
        read_panel(&path, &bytes)
    }

    /// Records an input that a reader will open by path.
    fn input_path(&mut self, name: &str, p: &Option<PathBuf>) -> CliResult<PathBuf> {
        Ok(self.input_bytes(name, p)?.0)
    }

    fn finish(self, command: &str, mut outputs: Outputs, extra: serde_json::Map<String, serde_json::Value>) -> CliResult<()> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed(),
            config_sha256: sha256_hex(&self.loaded.raw),
            inputs: self.inputs,
            outputs: outputs.hashes(),
            extra,
        };
        outputs.add("manifest.json", to_json(&manifest)?);
        outputs.write_all(&self.out_dir)?;
        log::info!("{command}: wrote outputs to {}", self.out_dir.display());
        Ok(())
    }
}

fn csv_writer(header: Vec<String>) -> CliResult<csv::Writer<Vec<u8>>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write_record(&mut w, &header)?;
    Ok(w)
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Serialize)]
struct CoordinateDiagnostics<'a> {
    name: &'a str,
    rhat: f64,
    ess_bulk: f64,
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    max_rhat: f64,
    min_ess_bulk: f64,
    divergence_rate: f64,
    divergence_warning: bool,
    coordinates: Vec<CoordinateDiagnostics<'a>>,
    chains: &'a [ChainStats],
}

fn diagnostics_json(names: &[String], d: &Diagnostics) -> CliResult<Vec<u8>> {
    let coordinates = names
        .iter()
        .zip(d.rhat.iter().zip(&d.ess_bulk))
        .map(|(name, (&rhat, &ess_bulk))| CoordinateDiagnostics { name, rhat, ess_bulk })
        .collect();
    to_json(&DiagnosticsFile {
        max_rhat: d.max_rhat(),
        min_ess_bulk: d.min_ess(),
        divergence_rate: d.divergence_rate,
        divergence_warning: d.divergence_warning,
        coordinates,
        chains: &d.chains,
    })
}

pub fn cmd_fit(mut run: Run) -> CliResult<()> {
    let pf = run.panel()?;
    let cfg = &run.loaded.config;
    let tp = transform_scores(&pf.panel);
    let result = fit(&tp, &cfg.model, &cfg.hmc())?;
    let d = &result.draws.diagnostics;
    if d.divergence_warning {
        log::warn!("{:.1}% of transitions diverged", 100.0 * d.divergence_rate);
    }
    let mut out = Outputs::default();
    out.add("draws.csv", draws_csv(&result, pf.panel.expert_names())?);
    out.add("diagnostics.json", diagnostics_json(&result.layout.coordinate_names(), d)?);
    run.finish("fit", out, serde_json::Map::new())
}

pub fn cmd_predict(mut run: Run) -> CliResult<()> {
    let pf = run.panel()?;
    let names = pf.panel.expert_names().to_vec();
    let (k, p) = (names.len(), pf.panel.n_covariates());
    let draws_path = run.input_path("draws", &run.loaded.config.input.draws.clone())?;
    let queries_path = run.input_path("queries", &run.loaded.config.input.queries.clone())?;
    let cfg = &run.loaded.config;
    let params = read_draws(&draws_path, &names, p, cfg.model.lengthscale_upper)?;
    let queries = read_queries(&queries_path, &names, p)?;
    let tp = transform_scores(&pf.panel);

    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    let mut header = vec!["query_id".to_string()];
    header.extend(names.iter().map(|e| format!("eta_mean_{e}")));
    header.extend(names.iter().map(|e| format!("eta_sd_{e}")));
    header.extend(names.iter().map(|e| format!("psi_{e}")));
    header.extend(pairs.iter().map(|&(a, b)| format!("corr_{}_{}", names[a], names[b])));
    let mut summary = csv_writer(header)?;
    let mut dump_header = vec!["query_id".to_string(), "draw".to_string()];
    dump_header.extend(names.iter().map(|e| format!("eta_{e}")));
    let mut dump = csv_writer(dump_header)?;

    for (q, query) in queries.iter().enumerate() {
        let a = query.a.clone().unwrap_or_else(|| vec![0.0; k]);
        let seed = draw_rng(run.seed(), q).next_u64();
        let ab = sample_ability(&query.z, &a, &tp, &params, seed)
            .map_err(|e| annotate(e, &format!("query '{}'", query.id)))?;
        let corr = ab.correlation();
        let mut rec = vec![query.id.clone()];
        rec.extend(ab.mean().into_iter().map(fmt_f64));
        rec.extend(ab.sd().into_iter().map(fmt_f64));
        rec.extend(psi(&ab).into_iter().map(fmt_f64));
        rec.extend(pairs.iter().map(|&(a, b)| fmt_f64(corr[(a, b)])));
        write_record(&mut summary, &rec)?;
        if cfg.predict.full_dump {
            for (j, row) in ab.eta.row_iter().enumerate() {
                let mut rec = vec![query.id.clone(), j.to_string()];
                rec.extend(row.iter().map(|v| fmt_f64(*v)));
                write_record(&mut dump, &rec)?;
            }
        }
    }
    let mut out = Outputs::default();
    out.add("summary.csv", finish(summary)?);
    if cfg.predict.full_dump {
        out.add("ability_draws.csv", finish(dump)?);
    }
    run.finish("predict", out, serde_json::Map::new())
}

/// Prefixes the message of numerical errors with context, keeping the kind.
fn annotate(e: lpa_core::Error, ctx: &str) -> lpa_core::Error {
    match e {
        lpa_core::Error::Numerical(m) => lpa_core::Error::Numerical(format!("{ctx}: {m}")),
        lpa_core::Error::Validation(m) => lpa_core::Error::Validation(format!("{ctx}: {m}")),
        lpa_core::Error::Dimension(m) => lpa_core::Error::Dimension(format!("{ctx}: {m}")),
        other => other,
    }
}

pub fn cmd_pool(mut run: Run) -> CliResult<()> {
    let pf = run.panel()?;
    let psi_path = run.input_path("psi", &run.loaded.config.input.psi.clone())?;
    let psi_series = read_psi(&psi_path, &pf)?;
    let pc = &run.loaded.config.pool;
    let schemes: Vec<(&str, Vec<BacktestRecord>)> = vec![
        ("natural", fixed_backtest(&pf.panel, &psi_series, FixedRule::Natural)?),
        ("selection", fixed_backtest(&pf.panel, &psi_series, FixedRule::Selection)?),
        ("softmax", fixed_backtest(&pf.panel, &psi_series, FixedRule::Softmax(pc.softmax_c))?),
        ("dynamic", dynamic_backtest(&pf.panel, &psi_series, &pc.c_grid, pc.warmup)?),
        ("equal", fixed_backtest(&pf.panel, &psi_series, FixedRule::Equal)?),
    ];

    let names = pf.panel.expert_names();
    let mut header: Vec<String> = ["scheme", "t", "obs_id", "c"].iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().map(|e| format!("psi_{e}")));
    header.extend(names.iter().map(|e| format!("w_{e}")));
    header.extend(names.iter().map(|e| format!("ls_{e}")));
    header.push("pooled".into());
    header.push("cumulative".into());
    let mut backtest = csv_writer(header)?;
    let mut summary = csv_writer(vec!["scheme".into(), "c".into(), "n_periods".into(), "cumulative_score".into()])?;

    for (name, records) in &schemes {
        let mut cum = 0.0;
        for r in records {
            cum += r.pooled;
            let mut rec = vec![name.to_string(), r.t.to_string(), pf.obs_ids[r.t].clone(), opt_f64(r.c)];
            rec.extend(r.psi.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.weights.w.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.log_scores.iter().map(|v| fmt_f64(*v)));
            rec.push(fmt_f64(r.pooled));
            rec.push(fmt_f64(cum));
            write_record(&mut backtest, &rec)?;
        }
        let c = match *name {
            "softmax" => fmt_f64(pc.softmax_c),
            _ => String::new(),
        };
        write_record(
            &mut summary,
            &[name.to_string(), c, records.len().to_string(), fmt_f64(cumulative_score(records))],
        )?;
    }
    let mut out = Outputs::default();
    out.add("backtest.csv", finish(backtest)?);
    out.add("summary.csv", finish(summary)?);
    run.finish("pool", out, serde_json::Map::new())
}

pub fn cmd_simulate(run: Run) -> CliResult<()> {
    let cfg = &run.loaded.config;
    let mut out = Outputs::default();
    let mut arms = csv_writer(vec!["arm".into(), "z_correlation".into(), "n".into(), "b".into()])?;
    for (a, sim) in cfg.sim_arms().iter().enumerate() {
        write_record(&mut arms, &[a.to_string(), fmt_f64(sim.z_correlation), sim.n.to_string(), fmt_f64(sim.b)])?;
        for r in 0..sim.n_datasets {
            let mut rng = draw_rng(sim.seed, r);
            let (panel, truth) = gen_dataset(sim, &mut rng)?;
            let ids: Vec<String> = (1..=panel.n()).map(|i| i.to_string()).collect();
            out.add(format!("arm{a}_rep{r}_panel.csv"), write_panel_csv(&ids, &panel)?);
            let mut header = vec!["obs_id".to_string()];
            header.extend(panel.expert_names().iter().map(|e| format!("eta_true_{e}")));
            let mut t = csv_writer(header)?;
            for (i, id) in ids.iter().enumerate() {
                let mut rec = vec![id.clone()];
                rec.extend(truth.row(i).iter().map(|v| fmt_f64(*v)));
                write_record(&mut t, &rec)?;
            }
            out.add(format!("arm{a}_rep{r}_truth.csv"), finish(t)?);
        }
    }
    out.add("arms.csv", finish(arms)?);
    run.finish("simulate", out, serde_json::Map::new())
}

#[derive(Serialize)]
struct ArmManifest {
    z_correlation: f64,
    n_replicates: usize,
    n_flagged: usize,
}

pub fn cmd_replicate(run: Run) -> CliResult<()> {
    let cfg = &run.loaded.config;
    let arms = cfg.sim_arms();
    let study = run_study(&arms, &cfg.study_settings())?;

    let p = 2;
    let mut header: Vec<String> = ["arm", "z_correlation", "replicate", "held_out"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|q| format!("z_star_{q}")));
    header.extend((1..=2).map(|k| format!("eta_true_{k}")));
    for h in ["score_multi", "score_single", "score_diff", "max_rhat_multi", "max_rhat_single", "flagged"] {
        header.push(h.into());
    }
    let mut reps = csv_writer(header)?;
    let mut ls = csv_writer(
        ["z_correlation", "replicate", "flagged", "l_1_1", "l_2_1", "l_1_2", "l_2_2"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )?;
    let per_arm = cfg.simulate.n_datasets;
    for (idx, r) in study.replicates.iter().enumerate() {
        let mut rec = vec![
            (idx / per_arm).to_string(),
            fmt_f64(r.z_correlation),
            r.replicate.to_string(),
            r.held_out.to_string(),
        ];
        rec.extend(r.z_star.iter().map(|v| fmt_f64(*v)));
        rec.extend(r.eta_true.iter().map(|v| fmt_f64(*v)));
        rec.extend([r.score_multi, r.score_single, r.score_diff(), r.max_rhat_multi, r.max_rhat_single].map(fmt_f64));
        rec.push(r.flagged.to_string());
        write_record(&mut reps, &rec)?;
        let l = &r.lengthscale_median;
        let mut rec = vec![fmt_f64(r.z_correlation), r.replicate.to_string(), r.flagged.to_string()];
        rec.extend([l[0][0], l[1][0], l[0][1], l[1][1]].map(fmt_f64));
        write_record(&mut ls, &rec)?;
    }

    let mut agg = csv_writer(
        [
            "z_correlation",
            "n_replicates",
            "n_flagged",
            "mean_multi",
            "mean_single",
            "mean_diff",
            "multi_win_rate",
            "frac_l11_lt_l21",
            "frac_l22_lt_l12",
            "frac_relevance",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    )?;
    for a in &study.arms {
        let mut rec = vec![fmt_f64(a.z_correlation), a.n_replicates.to_string(), a.n_flagged.to_string()];
        rec.extend(
            [
                a.mean_multi,
                a.mean_single,
                a.mean_diff,
                a.multi_win_rate,
                a.frac_l11_lt_l21,
                a.frac_l22_lt_l12,
                a.frac_relevance,
            ]
            .map(fmt_f64),
        );
        write_record(&mut agg, &rec)?;
    }
    let arm_info: Vec<ArmManifest> = study
        .arms
        .iter()
        .map(|a| ArmManifest {
            z_correlation: a.z_correlation,
            n_replicates: a.n_replicates,
            n_flagged: a.n_flagged,
        })
        .collect();
    let excluded: usize = arm_info.iter().map(|a| a.n_flagged).sum();
    let mut extra = serde_json::Map::new();
    extra.insert("arms".into(), serde_json::to_value(&arm_info).map_err(|e| CliError::Config(e.to_string()))?);
    extra.insert("excluded_replicates".into(), excluded.into());

    let mut out = Outputs::default();
    out.add("replicates.csv", finish(reps)?);
    out.add("aggregate.csv", finish(agg)?);
    out.add("lengthscales.csv", finish(ls)?);
    run.finish("replicate", out, extra)
}

/// Parses the config and every configured input without computing anything.
pub fn cmd_validate(mut run: Run) -> CliResult<String> {
    let mut lines = vec![format!("config ok (seed {})", run.seed())];
    let input = run.loaded.config.input.clone();
    if input.panel.is_some() {
        let pf = run.panel()?;
        let names = pf.panel.expert_names().to_vec();
        let p = pf.panel.n_covariates();
        lines.push(format!("panel ok: n={}, K={}, P={p}", pf.panel.n(), names.len()));
        if input.draws.is_some() {
            let path = run.input_path("draws", &input.draws)?;
            let d = read_draws(&path, &names, p, run.loaded.config.model.lengthscale_upper)?;
            lines.push(format!("draws ok: {} rows", d.len()));
        }
        if input.queries.is_some() {
            let path = run.input_path("queries", &input.queries)?;
            lines.push(format!("queries ok: {} rows", read_queries(&path, &names, p)?.len()));
        }
        if input.psi.is_some() {
            let path = run.input_path("psi", &input.psi)?;
            read_psi(&path, &pf)?;
            lines.push("psi ok".into());
        }
    } else if input.draws.is_some() || input.queries.is_some() || input.psi.is_some() {
        return Err(CliError::Config("draws, queries and psi are checked against input.panel, which is missing".into()));
    }
    Ok(lines.join("\n"))
}
