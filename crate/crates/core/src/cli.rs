//! `occuflow simulate | fit | summarize`.
//!
//! Exit codes: 0 on success, 1 for configuration, input or usage errors,
//! 2 when the estimation fails numerically (partial outputs are kept).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::inference::{smooth_bands, summarize_chain, InferenceError};
use crate::output::{
    read_trace, write_flows, write_region_flows, write_smooth_terms, write_summary, write_trace, write_truth,
    OutputError,
};
use crate::panel::{compute_deltas, load_panel, write_panel, PanelError, RegionMap};
use crate::sem::{prepare_design, run_sem, SemError};
use crate::sim::{gen_dataset, InflowFamily};

#[derive(Debug, Parser)]
#[command(name = "occuflow", version, about = "Latent inflow, outflow and length-of-stay estimation from occupancy counts")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "OCCUFLOW_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel with ground truth.
    Simulate(SimulateArgs),
    /// Run the stochastic EM on a panel.
    Fit(FitArgs),
    /// Recompute summary tables from a stored trace.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub districts: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Negative-binomial dispersion; Poisson inflows when absent.
    #[arg(long)]
    pub theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV with columns district_id,region_id.
    #[arg(long)]
    pub region_map: Option<PathBuf>,
    #[arg(long)]
    pub iterations_pre: Option<usize>,
    #[arg(long)]
    pub iterations_corrected: Option<usize>,
    #[arg(long)]
    pub summary_window: Option<usize>,
    #[arg(long)]
    pub max_lag: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// `k′:K`, summarizing iterations k′+1 through K.
    #[arg(long)]
    pub window: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        usage(e)
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        usage(e)
    }
}

impl From<OutputError> for CliError {
    fn from(e: OutputError) -> Self {
        usage(e)
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        usage(e)
    }
}

impl From<SemError> for CliError {
    fn from(e: SemError) -> Self {
        match e {
            SemError::Config(_) | SemError::Panel(_) => usage(e),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let mut spec = cfg.simulate.clone();
    spec.seed = cfg.resolve_seed(args.seed)?;
    if let Some(d) = args.districts {
        spec.districts = d;
    }
    if let Some(t) = args.days {
        spec.days = t;
    }
    if let Some(theta) = args.theta {
        spec.family = InflowFamily::NegativeBinomial { theta };
    }
    let (panel, truth) = gen_dataset(&spec).map_err(usage)?;
    ensure_dir(&args.out)?;
    let path = args.out.join("panel.csv");
    let file = std::fs::File::create(&path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))?;
    write_panel(&panel, file)?;
    write_truth(&args.out, &panel, &truth, &spec)?;
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let mut fit_cfg = cfg.fit.clone();
    let sem = &mut fit_cfg.sem;
    sem.seed = cfg.resolve_seed(args.seed)?;
    if let Some(v) = args.iterations_pre {
        sem.iterations_pre = v;
    }
    if let Some(v) = args.iterations_corrected {
        sem.iterations_corrected = v;
    }
    if let Some(v) = args.max_lag {
        sem.max_lag = v;
    }
    match args.summary_window {
        Some(v) => sem.summary_window = v,
        None => {
            // keep the default window inside a shortened run
            let last = if sem.iterations_corrected > 0 {
                sem.iterations_corrected
            } else {
                sem.iterations_pre
            };
            sem.summary_window = sem.summary_window.min(last);
        }
    }
    sem.validate()?;
    fit_cfg.covariates.basis.validate().map_err(usage)?;
    let region_map = args.region_map.as_deref().map(RegionMap::load).transpose()?;

    let panel = load_panel(&args.panel, &fit_cfg.schema)?;
    let deltas = compute_deltas(&panel)?;
    let design = prepare_design(&panel, &deltas, &fit_cfg.covariates)?;
    let run = run_sem(&deltas, &design, &fit_cfg.sem)?;
    for (iteration, reason) in &run.failures {
        eprintln!("warning: iteration {iteration} skipped: {reason}");
    }

    ensure_dir(&args.out)?;
    write_trace(&args.out.join("trace.ndjson"), &run.trace)?;
    let resolved = RunConfig {
        seed: Some(fit_cfg.sem.seed),
        fit: fit_cfg.clone(),
        ..cfg
    };
    std::fs::write(args.out.join("config.toml"), resolved.to_toml()?)
        .map_err(|e| usage(format!("cannot write config.toml: {e}")))?;

    let completed = run.trace.completed();
    let mut window = fit_cfg.sem.window(completed);
    if args.summary_window.is_none() && window.1 - window.0 < 2 && completed >= 2 {
        // a variance needs two draws; borrow the preceding iteration
        window.0 = completed - 2;
        eprintln!("note: summarizing iterations {}..={completed}", window.0 + 1);
    }
    let summarized = summarize_chain(&run.trace, window).and_then(|summary| {
        let bands = smooth_bands(&run.trace, &run.design, window)?;
        Ok((summary, bands))
    });
    match summarized {
        Ok((summary, bands)) => {
            write_summary(&args.out, &summary)?;
            write_flows(&args.out.join("flows.csv"), &panel, &run.flows)?;
            if !bands.is_empty() {
                write_smooth_terms(&args.out.join("smooth_terms.csv"), &bands)?;
            }
            if let Some(map) = &region_map {
                write_region_flows(&args.out.join("region_flows.csv"), &panel, &run.flows, map)?;
            }
        }
        Err(e) if run.aborted.is_none() => return Err(e.into()),
        Err(_) => {}
    }
    if let Some(reason) = run.aborted {
        return Err(CliError::Numerical(format!("chain aborted after repeated failures ({reason})")));
    }
    Ok(())
}

/// Parse `a:b` into `(a, b)`.
pub fn parse_window(text: &str) -> Result<(usize, usize), CliError> {
    let bad = || usage(format!("window must look like START:END, got {text:?}"));
    let (a, b) = text.split_once(':').ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    if a >= b {
        return Err(bad());
    }
    Ok((a, b))
}

pub fn cmd_summarize(args: &SummarizeArgs) -> Result<(), CliError> {
    let window = parse_window(&args.window)?;
    let trace = read_trace(&args.trace)?;
    let summary = summarize_chain(&trace, window)?;
    ensure_dir(&args.out)?;
    write_summary(&args.out, &summary)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Summarize(a) => cmd_summarize(a),
    }
}
