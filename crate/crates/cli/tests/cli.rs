use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lpa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpa"))
        .args(args)
        .env_remove("LPA_OUT_DIR")
        .env_remove("LPA_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_ok(cmd: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = lpa(&args);
    assert!(
        out.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (h, rows)
}

fn col(h: &[String], name: &str) -> usize {
    h.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name} in {h:?}"))
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

/// Simulated n=30 panel in `dir/sim`.
fn simulated_panel(dir: &Path) -> PathBuf {
    let cfg = write(
        dir,
        "sim.toml",
        "seed = 3\nout_dir = \"sim\"\n[simulate]\nn = 30\nz_correlations = [0.7]\nn_datasets = 1\n",
    );
    run_ok("simulate", &cfg, &[]);
    dir.join("sim/arm0_rep0_panel.csv")
}

const SMALL_SAMPLER: &str = "[sampler]\nn_chains = 2\nn_warmup = 100\nn_draws = 50\n";

#[test]
fn fit_writes_named_draws_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    simulated_panel(dir.path());
    let cfg = write(
        dir.path(),
        "fit.toml",
        &format!("seed = 5\nout_dir = \"fit\"\n[input]\npanel = \"sim/arm0_rep0_panel.csv\"\n{SMALL_SAMPLER}"),
    );
    run_ok("fit", &cfg, &[]);
    let (h, rows) = read_csv(&dir.path().join("fit/draws.csv"));
    assert_eq!(rows.len(), 100);
    assert_eq!(&h[..3], ["chain", "draw", "lengthscale_1_1"]);
    for name in h.iter().filter(|c| c.starts_with("lengthscale_")) {
        let j = col(&h, name);
        assert!(rows.iter().all(|r| (0.0..100.0).contains(&num(&r[j])) && num(&r[j]) > 0.0));
    }
    let diag: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fit/diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["coordinates"].as_array().unwrap().len(), 12);
    assert_eq!(diag["chains"].as_array().unwrap().len(), 2);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fit/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["inputs"]["panel"]["sha256"].is_string());

    run_ok("fit", &cfg, &["--out", dir.path().join("again").to_str().unwrap()]);
    for f in ["draws.csv", "diagnostics.json", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("fit").join(f)).unwrap(),
            std::fs::read(dir.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    simulated_panel(dir.path());
    let cfg = write(
        dir.path(),
        "fit.toml",
        "seed = 5\n[input]\npanel = \"sim/arm0_rep0_panel.csv\"\n[sampler]\nn_chains = 1\nn_warmup = 30\nn_draws = 10\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok("fit", &cfg, &["--out", a.to_str().unwrap()]);
    run_ok("fit", &cfg, &["--out", b.to_str().unwrap(), "--seed", "6"]);
    assert_ne!(std::fs::read(a.join("draws.csv")).unwrap(), std::fs::read(b.join("draws.csv")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 6);
}

#[test]
fn env_out_dir_applies_and_flag_wins() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.toml", "[simulate]\nn = 5\nz_correlations = [0.0]\nn_datasets = 1\n");
    let env_dir = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_lpa"))
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .env("LPA_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env_dir.join("arms.csv").exists());
    let flag_dir = dir.path().join("from_flag");
    let out = Command::new(env!("CARGO_BIN_EXE_lpa"))
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", flag_dir.to_str().unwrap()])
        .env("LPA_OUT_DIR", &env_dir)
        .env("LPA_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(flag_dir.join("arms.csv").exists());
}

#[test]
fn invalid_panel_cell_exits_2_naming_row_and_expert() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "panel.csv",
        "obs_id,z_1,ls_alpha,ls_beta,a_alpha,a_beta\n1,0.1,-1,-2,0,0\n2,0.2,-1,0.5,0,0.1\n",
    );
    let cfg = write(dir.path(), "c.toml", "[input]\npanel = \"panel.csv\"\n");
    for cmd in ["fit", "validate"] {
        let out = lpa(&[cmd, "--config", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("row 1") && err.contains("'beta'"), "{err}");
    }
}

#[test]
fn bad_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let unknown = write(dir.path(), "u.toml", "seed = 1\nsampler_seed = 2\n");
    assert_eq!(lpa(&["validate", "--config", unknown.to_str().unwrap()]).status.code(), Some(2));
    let missing = write(dir.path(), "m.toml", "");
    let out = lpa(&["fit", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("input.panel"));
    let no_file = dir.path().join("nope.toml");
    assert_eq!(lpa(&["validate", "--config", no_file.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(lpa(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn validate_reports_inputs() {
    let dir = TempDir::new().unwrap();
    simulated_panel(dir.path());
    let cfg = write(dir.path(), "v.toml", "[input]\npanel = \"sim/arm0_rep0_panel.csv\"\n");
    let out = run_ok("validate", &cfg, &[]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("n=30, K=2, P=2"), "{text}");
}

fn write_k1_fit(dir: &Path) -> PathBuf {
    write(
        dir,
        "panel.csv",
        "obs_id,z_1,ls_only\n1,0.0,-1.0\n2,0.5,-1.2\n3,1.0,-2.0\n4,1.5,-2.6\n5,2.0,-3.1\n",
    );
    write(
        dir,
        "draws.csv",
        "chain,draw,lengthscale_1_1,mean_only,signal_sd_only,noise_sd_only\n\
         0,0,1.0,1.0,0.5,0.2\n0,1,1.5,1.1,0.4,0.3\n",
    );
    write(dir, "queries.csv", "query_id,z_1\nq0,0.25\nq1,1.75\n");
    write(
        dir,
        "p.toml",
        "out_dir = \"pred\"\n[input]\npanel = \"panel.csv\"\ndraws = \"draws.csv\"\nqueries = \"queries.csv\"\n[predict]\nfull_dump = true\n",
    )
}

#[test]
fn predict_single_expert_has_psi_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_k1_fit(dir.path());
    run_ok("predict", &cfg, &[]);
    let (h, rows) = read_csv(&dir.path().join("pred/summary.csv"));
    assert_eq!(h, ["query_id", "eta_mean_only", "eta_sd_only", "psi_only"]);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(num(&r[3]), 1.0);
    }
    let (_, dump) = read_csv(&dir.path().join("pred/ability_draws.csv"));
    assert_eq!(dump.len(), 4);
}

#[test]
fn predict_rejects_mismatched_draws() {
    let dir = TempDir::new().unwrap();
    let cfg = write_k1_fit(dir.path());
    write(dir.path(), "draws.csv", "chain,draw,lengthscale_1_1,mean_x,signal_sd_x,noise_sd_x\n0,0,1,1,1,1\n");
    let out = lpa(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not match"));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_k1_fit(dir.path());
    write(
        dir.path(),
        "draws.csv",
        "chain,draw,lengthscale_1_1,mean_only,signal_sd_only,noise_sd_only\n0,0,1.0,1.0,1e200,0.2\n",
    );
    let out = lpa(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn predict_after_fit_gives_probability_rows() {
    let dir = TempDir::new().unwrap();
    simulated_panel(dir.path());
    let fit_cfg = write(
        dir.path(),
        "fit.toml",
        &format!("out_dir = \"fit\"\n[input]\npanel = \"sim/arm0_rep0_panel.csv\"\n{SMALL_SAMPLER}"),
    );
    run_ok("fit", &fit_cfg, &[]);
    write(dir.path(), "q.csv", "query_id,z_1,z_2,a_expert_1,a_expert_2\nq0,0,0,0,0\nq1,1.5,-1,0,0\nq2,-2,2,0.5,0\n");
    let cfg = write(
        dir.path(),
        "pred.toml",
        "out_dir = \"pred\"\n[input]\npanel = \"sim/arm0_rep0_panel.csv\"\ndraws = \"fit/draws.csv\"\nqueries = \"q.csv\"\n",
    );
    run_ok("predict", &cfg, &[]);
    let (h, rows) = read_csv(&dir.path().join("pred/summary.csv"));
    assert_eq!(rows.len(), 3);
    assert!(h.contains(&"corr_expert_1_expert_2".to_string()));
    for r in &rows {
        let s = num(&r[col(&h, "psi_expert_1")]) + num(&r[col(&h, "psi_expert_2")]);
        assert!((s - 1.0).abs() < 1e-12);
        let c = num(&r[col(&h, "corr_expert_1_expert_2")]);
        assert!((-1.0..=1.0).contains(&c));
    }
    assert!(!dir.path().join("pred/ability_draws.csv").exists());
}

fn pool_inputs(dir: &Path, grid: &str) -> PathBuf {
    let mut panel = String::from("obs_id,z_1,ls_a,ls_b,ls_c\n");
    let mut psi = String::from("obs_id,psi_a,psi_b,psi_c\n");
    for t in 0..40 {
        let x = t as f64 / 7.0;
        panel.push_str(&format!("t{t},{x},{},{},{}\n", -1.0 - x.sin().abs(), -1.5 + 0.3 * x.cos(), -2.0 + 0.01 * t as f64));
        let raw = [1.0 + x.sin(), 1.0 + x.cos(), 0.5];
        let s: f64 = raw.iter().sum();
        psi.push_str(&format!("t{t},{},{},{}\n", raw[0] / s, raw[1] / s, raw[2] / s));
    }
    write(dir, "panel.csv", &panel);
    write(dir, "psi.csv", &psi);
    write(
        dir,
        "pool.toml",
        &format!("out_dir = \"pool\"\n[input]\npanel = \"panel.csv\"\npsi = \"psi.csv\"\n[pool]\nc_grid = {grid}\nwarmup = 5\nsoftmax_c = 1000000.0\n"),
    )
}

fn scheme_rows(h: &[String], rows: &[Vec<String>], scheme: &str) -> Vec<Vec<String>> {
    rows.iter().filter(|r| r[col(h, "scheme")] == scheme).cloned().collect()
}

#[test]
fn pool_columns_satisfy_identities() {
    let dir = TempDir::new().unwrap();
    let cfg = pool_inputs(dir.path(), "[0.0]");
    run_ok("pool", &cfg, &[]);
    let (h, rows) = read_csv(&dir.path().join("pool/backtest.csv"));
    assert_eq!(rows.len(), 5 * 40);
    let equal = scheme_rows(&h, &rows, "equal");
    let dynamic = scheme_rows(&h, &rows, "dynamic");
    let selection = scheme_rows(&h, &rows, "selection");
    let softmax = scheme_rows(&h, &rows, "softmax");
    let p = col(&h, "pooled");
    let mut direct = 0.0;
    for t in 0..40 {
        assert_eq!(dynamic[t][p], equal[t][p]);
        assert!((num(&selection[t][p]) - num(&softmax[t][p])).abs() < 1e-9);
        let ls: Vec<f64> = ["ls_a", "ls_b", "ls_c"].iter().map(|c| num(&equal[t][col(&h, c)])).collect();
        direct += (ls.iter().map(|l| l.exp()).sum::<f64>() / 3.0).ln();
    }
    let (sh, summary) = read_csv(&dir.path().join("pool/summary.csv"));
    assert_eq!(summary.len(), 5);
    let eq = summary.iter().find(|r| r[0] == "equal").unwrap();
    assert!((num(&eq[col(&sh, "cumulative_score")]) - direct).abs() < 1e-12);
    for r in &summary {
        assert!(num(&r[col(&sh, "cumulative_score")]).is_finite());
    }
}

#[test]
fn pool_default_grid_weights_are_valid() {
    let dir = TempDir::new().unwrap();
    let cfg = pool_inputs(dir.path(), "[0.0, 1.0, 5.0, 20.0, 1000000.0]");
    run_ok("pool", &cfg, &[]);
    let (h, rows) = read_csv(&dir.path().join("pool/backtest.csv"));
    for r in &rows {
        let w: Vec<f64> = ["w_a", "w_b", "w_c"].iter().map(|c| num(&r[col(&h, c)])).collect();
        assert!(w.iter().all(|v| *v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let dynamic = scheme_rows(&h, &rows, "dynamic");
    assert!(dynamic[..5].iter().all(|r| num(&r[col(&h, "c")]) == 0.0));
}

#[test]
fn pool_rejects_misaligned_series() {
    let dir = TempDir::new().unwrap();
    let cfg = pool_inputs(dir.path(), "[0.0]");
    let psi = std::fs::read_to_string(dir.path().join("psi.csv")).unwrap();
    let short: Vec<&str> = psi.lines().take(30).collect();
    write(dir.path(), "psi.csv", &(short.join("\n") + "\n"));
    let out = lpa(&["pool", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("observations"));
}

#[test]
fn replicate_smoke_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "rep.toml",
        "seed = 2\nout_dir = \"rep\"\n[simulate]\nn = 20\nn_datasets = 1\n[study]\nn_chains = 2\nn_warmup = 150\nn_draws = 150\n",
    );
    let start = std::time::Instant::now();
    run_ok("replicate", &cfg, &[]);
    assert!(start.elapsed().as_secs() < 60);
    let (h, agg) = read_csv(&dir.path().join("rep/aggregate.csv"));
    assert_eq!(agg.len(), 2);
    let cells = h.iter().filter(|c| *c == "mean_multi" || *c == "mean_single").count() * agg.len();
    assert_eq!(cells, 4);
    let (_, reps) = read_csv(&dir.path().join("rep/replicates.csv"));
    assert_eq!(reps.len(), 2);
    let (lh, ls) = read_csv(&dir.path().join("rep/lengthscales.csv"));
    assert_eq!(ls.len(), 2);
    assert_eq!(&lh[3..], ["l_1_1", "l_2_1", "l_1_2", "l_2_2"]);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("rep/manifest.json")).unwrap()).unwrap();
    let flagged = reps.iter().filter(|r| r.last().unwrap() == "true").count();
    assert_eq!(m["excluded_replicates"], flagged);
}

#[test]
fn simulate_matches_arms() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "s.toml", "out_dir = \"s\"\n[simulate]\nn = 12\nn_datasets = 2\n");
    run_ok("simulate", &cfg, &[]);
    let (_, arms) = read_csv(&dir.path().join("s/arms.csv"));
    assert_eq!(arms.len(), 2);
    for a in 0..2 {
        for r in 0..2 {
            let (h, rows) = read_csv(&dir.path().join(format!("s/arm{a}_rep{r}_panel.csv")));
            assert_eq!(h, ["obs_id", "z_1", "z_2", "ls_expert_1", "ls_expert_2", "a_expert_1", "a_expert_2"]);
            assert_eq!(rows.len(), 12);
            let (_, truth) = read_csv(&dir.path().join(format!("s/arm{a}_rep{r}_truth.csv")));
            assert!(truth.iter().all(|t| num(&t[1]) <= -1.0 / 3.0 + 1e-12));
        }
    }
}
