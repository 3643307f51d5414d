//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero when any of them fails.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use occuflow::inference::{median, summarize_chain, ChainSummary};
use occuflow::panel::{read_panel, write_panel, CovariateConfig, IngestSchema};
use occuflow::sem::{fit_panel, SemConfig, SemRun, Stage};
use occuflow::sim::{gen_dataset, InflowFamily, SimSpec};
use occuflow::glm::basis::BasisSpec;
use occuflow::ExitRates;

const SEED: u64 = 1;
const LAGS: usize = 12;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} [{id}] {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

struct Recovery {
    run: SemRun,
    summary: ChainSummary,
    pi: ExitRates,
}

fn desk_recovery(family: InflowFamily) -> Result<Recovery, String> {
    let spec = SimSpec {
        districts: 50,
        days: 100,
        family,
        seed: SEED,
        ..SimSpec::default()
    };
    let (panel, truth) = gen_dataset(&spec).map_err(|e| e.to_string())?;
    let covariates = CovariateConfig {
        raw: vec!["x1".into(), "x2".into()],
        ..CovariateConfig::default()
    };
    let config = SemConfig {
        max_lag: LAGS,
        iterations_pre: 75,
        iterations_corrected: 75,
        summary_window: 75,
        seed: SEED,
        ..SemConfig::default()
    };
    let run = fit_panel(&panel, &covariates, &config).map_err(|e| e.to_string())?;
    let window = config.window(run.trace.completed());
    let summary = summarize_chain(&run.trace, window).map_err(|e| e.to_string())?;
    Ok(Recovery {
        run,
        summary,
        pi: truth.pi_padded(LAGS),
    })
}

fn coefficient(summary: &ChainSummary, name: &str) -> f64 {
    let j = summary
        .coefficient_names
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no coefficient {name}"));
    summary.coefficients[j]
}

fn max_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mean_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn recovery_checks(report: &mut Report, rec: &Recovery) {
    let s = &rec.summary;
    let b0 = coefficient(s, "(Intercept)");
    let b1 = coefficient(s, "x1");
    let b2 = coefficient(s, "x2");
    report.line(
        "1",
        (b1 - 1.0).abs() <= 0.10 && (b2 - 0.2).abs() <= 0.05 && (b0 - 0.5).abs() <= 0.25,
        format!(
            "coefficient recovery: intercept {b0:.4} (|err| <= 0.25), x1 {b1:.4} (<= 0.10), x2 {b2:.4} (<= 0.05); sd {}",
            fmt(&s.coefficient_sd)
        ),
    );

    let pi = rec.pi.as_slice();
    let err = max_error(&s.omega, pi);
    let covered = (0..LAGS).filter(|&l| s.omega_lo[l] <= pi[l] && pi[l] <= s.omega_hi[l]).count();
    report.line(
        "2",
        err <= 0.06 && covered >= 9,
        format!(
            "exit-rate recovery: max error {err:.4} (<= 0.06), band covers {covered}/{LAGS} (>= 9); estimate {} truth {}",
            fmt(&s.omega),
            fmt(pi)
        ),
    );

    let pre_final = rec
        .run
        .trace
        .records
        .iter()
        .rfind(|r| r.stage == Stage::Pre)
        .map(|r| r.omega.clone());
    match pre_final {
        Some(raw) => {
            let corrected = mean_error(&s.omega, pi);
            let uncorrected = mean_error(&raw, pi);
            report.line(
                "3",
                corrected < uncorrected,
                format!("correction effect: corrected MAE {corrected:.4} < pre-run MAE {uncorrected:.4}; pre-run {}", fmt(&raw)),
            );
        }
        None => report.line("3", false, "correction effect: no pre-run iteration recorded".into()),
    }
}

fn misspecification(report: &mut Report) {
    let mut rows = Vec::new();
    for theta in [0.5, 10.0] {
        match desk_recovery(InflowFamily::NegativeBinomial { theta }) {
            Ok(rec) => {
                let b2 = (coefficient(&rec.summary, "x2") - 0.2).abs();
                let w = max_error(&rec.summary.omega, rec.pi.as_slice());
                rows.push((theta, b2, w));
            }
            Err(e) => {
                report.line("4", false, format!("overdispersed fit at theta {theta} failed: {e}"));
                return;
            }
        }
    }
    let (_, b2_wide, w_wide) = rows[0];
    let (_, b2_narrow, w_narrow) = rows[1];
    report.line(
        "4",
        b2_narrow < b2_wide && w_wide <= 0.08 && w_narrow <= 0.08,
        format!(
            "overdispersion trend: |x2 err| {b2_narrow:.4} at theta 10 < {b2_wide:.4} at theta 0.5; max exit-rate error {w_wide:.4} / {w_narrow:.4} (<= 0.08)"
        ),
    );
}

fn oracles(report: &mut Report) {
    let started = Instant::now();
    let checks = [
        ("5a", "skellam pmf vs convolution", common::oracle_skellam()),
        ("5b", "truncated pmf and constrained draws", common::oracle_truncated(10_000)),
        ("5c", "score and information vs finite differences", common::oracle_score_fisher(50)),
        ("5d", "qp vs simplex grid search", common::oracle_qp_grid(50)),
        ("5e", "rubin variance vs two-pass", common::oracle_rubin(200)),
    ];
    let elapsed = started.elapsed().as_secs_f64();
    for (id, name, result) in checks {
        match result {
            Ok(()) => report.line(id, true, name.to_string()),
            Err(e) => report.line(id, false, format!("{name}: {e}")),
        }
    }
    report.line("5", elapsed < 300.0, format!("oracle suites took {elapsed:.1}s (< 300s)"));
}

fn occuflow(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_occuflow"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn same_files(a: &Path, b: &Path) -> Result<Vec<String>, String> {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for n in &names {
        let x = std::fs::read(a.join(n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        if x != y {
            return Err(format!("{n} differs"));
        }
    }
    Ok(names)
}

fn determinism(report: &mut Report) {
    let result = (|| -> Result<Vec<String>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        let config = root.join("run.toml");
        std::fs::write(&config, "schema_version = 1\nseed = 7\n\n[fit.covariates]\nraw = [\"x1\", \"x2\"]\n").map_err(|e| e.to_string())?;
        let config = config.to_str().unwrap();
        let sim = root.join("sim");
        occuflow(&["simulate", "--config", config, "--out", sim.to_str().unwrap(), "--districts", "20", "--days", "60"])?;
        let panel = sim.join("panel.csv");
        let mut outs = Vec::new();
        for name in ["a", "b"] {
            let out = root.join(name);
            occuflow(&[
                "fit",
                "--panel",
                panel.to_str().unwrap(),
                "--config",
                config,
                "--out",
                out.to_str().unwrap(),
                "--iterations-pre",
                "10",
                "--iterations-corrected",
                "10",
            ])?;
            outs.push(out);
        }
        same_files(&outs[0], &outs[1])
    })();
    match result {
        Ok(files) => report.line("6", true, format!("two fits with one seed agree byte for byte ({})", files.join(", "))),
        Err(e) => report.line("6", false, format!("determinism: {e}")),
    }
}

/// Panel in the DIVI column layout with daily case counts and populations.
fn divi_like_panel() -> Result<occuflow::OccupancyPanel, String> {
    let spec = SimSpec {
        districts: 40,
        days: 120,
        seed: SEED + 100,
        ..SimSpec::default()
    };
    let (mut panel, truth) = gen_dataset(&spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 100);
    let mut cases = occuflow::Grid::<f64>::new(panel.n_districts(), panel.n_days());
    for d in 0..panel.n_districts() {
        let population = 50_000.0 + 10_000.0 * d as f64;
        panel.districts[d].population = Some(population);
        for t in 0..panel.n_days() {
            // reported cases run a week ahead of admissions
            let ahead = (t + 7).min(panel.n_days() - 1);
            let mean = 20.0 * truth.intensity.at(d, ahead) * population / 100_000.0;
            let draw = Poisson::new(mean.max(1e-3)).map_err(|e| e.to_string())?.sample(&mut rng);
            cases.set(d, t, draw);
        }
    }
    panel.covariates.clear();
    panel.covariates.insert("cases".into(), cases);

    let mut csv = Vec::new();
    write_panel(&panel, &mut csv).map_err(|e| e.to_string())?;
    let text = String::from_utf8(csv).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty panel")?.replace("occupancy", "covid_icu_beds");
    let renamed: String = std::iter::once(header.as_str()).chain(lines).map(|l| format!("{l}\n")).collect();
    read_panel(renamed.as_bytes(), &IngestSchema::divi()).map_err(|e| e.to_string())
}

fn real_data_shape(report: &mut Report) {
    let result = (|| -> Result<String, String> {
        let panel = divi_like_panel()?;
        let covariates = CovariateConfig {
            log_rate: vec!["cases".into()],
            weekday: true,
            basis: BasisSpec {
                time_knots: 8,
                space_rank: 6,
                ..BasisSpec::default()
            },
            ..CovariateConfig::default()
        };
        let config = SemConfig {
            max_lag: LAGS,
            iterations_pre: 50,
            iterations_corrected: 50,
            summary_window: 50,
            seed: SEED,
            ..SemConfig::default()
        };
        let run = fit_panel(&panel, &covariates, &config).map_err(|e| e.to_string())?;
        if let Some(reason) = &run.aborted {
            return Err(format!("chain aborted: {reason}"));
        }
        let corrected: Vec<f64> = run
            .trace
            .records
            .iter()
            .filter(|r| r.stage == Stage::Corrected)
            .map(|r| r.loglik)
            .collect();
        let tail = &corrected[corrected.len().saturating_sub(21)..];
        let diffs: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
        if diffs.is_empty() {
            return Err("too few corrected iterations".into());
        }
        let drift = median(&diffs);
        let summary = summarize_chain(&run.trace, config.window(run.trace.completed())).map_err(|e| e.to_string())?;
        let cum = &summary.cumulative_exit;
        let monotone = cum.windows(2).all(|w| w[1] >= w[0]);
        let ends_at_one = cum.last().is_some_and(|&v| (v - 1.0).abs() < 1e-9);
        let detail = format!(
            "real-data shape: {} iterations, trailing median loglik step {drift:.3} (>= 0), cumulative exit monotone {monotone}, ends at {:.6}",
            run.trace.completed(),
            cum.last().copied().unwrap_or(f64::NAN)
        );
        if drift >= 0.0 && monotone && ends_at_one {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    match result {
        Ok(detail) => report.line("7", true, detail),
        Err(e) => report.line("7", false, e),
    }
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    let started = Instant::now();
    match desk_recovery(InflowFamily::Poisson) {
        Ok(rec) => recovery_checks(&mut report, &rec),
        Err(e) => {
            for id in ["1", "2", "3"] {
                report.line(id, false, format!("desk fit failed: {e}"));
            }
        }
    }
    misspecification(&mut report);
    oracles(&mut report);
    determinism(&mut report);
    real_data_shape(&mut report);
    println!(
        "acceptance: {} failed, {:.1}s",
        report.failed,
        started.elapsed().as_secs_f64()
    );
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
