//! File formats written by the command line: the line-delimited trace and
//! the CSV summary tables.
//!
//! | file               | columns                                                        |
//! |--------------------|----------------------------------------------------------------|
//! | `trace.ndjson`     | one `header` line, then one `iteration` line per iteration     |
//! | `coefficients.csv` | coefficient, estimate, std_dev                                 |
//! | `exit_rates.csv`   | lag, omega_median, lo, hi, smooth, std_dev, cumulative         |
//! | `los_summary.csv`  | quantity, value                                                |
//! | `flows.csv`        | date, district_id, inflow, outflow, inflow_lo, inflow_hi, outflow_lo, outflow_hi |
//! | `region_flows.csv` | date, region_id, inflow, outflow                               |
//! | `smooth_terms.csv` | term, index, median, lo, hi                                    |
//! | `truth_flows.csv`  | date, district_id, inflow, outflow, intensity                  |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exit_rate::{los_summaries, ExitRates, LOS_QUANTILES};
use crate::grid::Grid;
use crate::inference::{quantile, ChainSummary, SmoothBand, BAND};
use crate::panel::{aggregate_flows, OccupancyPanel, PanelError, RegionMap};
use crate::sem::{IterationRecord, LatentFlows, SemTrace, TraceHeader};
use crate::sim::{GroundTruth, SimSpec};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("corrupt trace at line {line}: {message}")]
    CorruptTrace { line: usize, message: String },
    #[error(transparent)]
    Panel(#[from] PanelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, OutputError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, OutputError> {
    Ok(csv::Writer::from_writer(File::create(path).map_err(io_err(path))?))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Iteration(IterationRecord),
}

pub fn write_trace(path: &Path, trace: &SemTrace) -> Result<(), OutputError> {
    let mut out = create(path)?;
    let mut line = |value: &TraceLine| -> Result<(), OutputError> {
        serde_json::to_writer(&mut out, value)?;
        out.write_all(b"\n").map_err(io_err(path))
    };
    line(&TraceLine::Header(trace.header.clone()))?;
    for r in &trace.records {
        line(&TraceLine::Iteration(r.clone()))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_trace(path: &Path) -> Result<SemTrace, OutputError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| OutputError::CorruptTrace { line: i + 1, message };
        match serde_json::from_str::<TraceLine>(&line).map_err(|e| corrupt(e.to_string()))? {
            TraceLine::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
            TraceLine::Header(_) => return Err(corrupt("unexpected header".into())),
            TraceLine::Iteration(r) => {
                if header.is_none() {
                    return Err(corrupt("iteration before header".into()));
                }
                if records.last().is_some_and(|p: &IterationRecord| p.iteration >= r.iteration) {
                    return Err(corrupt("iterations out of order".into()));
                }
                records.push(r);
            }
        }
    }
    let header = header.ok_or(OutputError::CorruptTrace {
        line: 0,
        message: "missing header".into(),
    })?;
    Ok(SemTrace { header, records })
}

pub fn write_coefficients(path: &Path, summary: &ChainSummary) -> Result<(), OutputError> {
    let mut w = csv_writer(path)?;
    w.write_record(["coefficient", "estimate", "std_dev"])?;
    for ((name, est), sd) in summary.coefficient_names.iter().zip(&summary.coefficients).zip(&summary.coefficient_sd) {
        w.write_record([name.clone(), est.to_string(), sd.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_exit_rates(path: &Path, summary: &ChainSummary) -> Result<(), OutputError> {
    let mut w = csv_writer(path)?;
    w.write_record(["lag", "omega_median", "lo", "hi", "smooth", "std_dev", "cumulative"])?;
    for l in 0..summary.omega.len() {
        w.write_record([
            (l + 1).to_string(),
            summary.omega[l].to_string(),
            summary.omega_lo[l].to_string(),
            summary.omega_hi[l].to_string(),
            summary.omega_smooth[l].to_string(),
            summary.omega_sd[l].to_string(),
            summary.cumulative_exit[l].to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_los_summary(path: &Path, summary: &ChainSummary) -> Result<(), OutputError> {
    let mut w = csv_writer(path)?;
    w.write_record(["quantity", "value"])?;
    let Ok(omega) = ExitRates::normalized(summary.omega.clone()) else {
        return w.flush().map_err(io_err(path));
    };
    let los = los_summaries(&omega);
    w.write_record(["mean_los".to_string(), los.mean_los.to_string()])?;
    for q in LOS_QUANTILES {
        let key = format!("{q}");
        w.write_record([format!("quantile_{key}"), los.quantile_days[&key].to_string()])?;
    }
    if let Some(c) = summary.c_hat_median {
        w.write_record(["c_hat_median".to_string(), c.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

/// Write every table derived from a chain summary.
pub fn write_summary(dir: &Path, summary: &ChainSummary) -> Result<(), OutputError> {
    write_coefficients(&dir.join("coefficients.csv"), summary)?;
    write_exit_rates(&dir.join("exit_rates.csv"), summary)?;
    write_los_summary(&dir.join("los_summary.csv"), summary)
}

fn cell_band(values: &[f64]) -> [f64; 3] {
    [quantile(values, 0.5), quantile(values, BAND.0), quantile(values, BAND.1)]
}

/// Per-cell median and band of the windowed flow draws.
pub fn write_flows(path: &Path, panel: &OccupancyPanel, flows: &[(usize, LatentFlows)]) -> Result<(), OutputError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "date",
        "district_id",
        "inflow",
        "outflow",
        "inflow_lo",
        "inflow_hi",
        "outflow_lo",
        "outflow_hi",
    ])?;
    let Some((_, first)) = flows.first() else {
        return w.flush().map_err(io_err(path));
    };
    let dates = &panel.dates[1..];
    for (d, district) in panel.districts.iter().enumerate() {
        for t in 0..first.n_steps() {
            let ins: Vec<f64> = flows.iter().map(|(_, f)| f64::from(f.inflow(d, t as isize))).collect();
            let outs: Vec<f64> = flows.iter().map(|(_, f)| f64::from(f.outflow(d, t))).collect();
            let [im, il, ih] = cell_band(&ins);
            let [om, ol, oh] = cell_band(&outs);
            w.write_record([
                dates[t].to_string(),
                district.id.clone(),
                im.to_string(),
                om.to_string(),
                il.to_string(),
                ih.to_string(),
                ol.to_string(),
                oh.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Per-region median over the window of summed member-district flows.
pub fn write_region_flows(
    path: &Path,
    panel: &OccupancyPanel,
    flows: &[(usize, LatentFlows)],
    map: &RegionMap,
) -> Result<(), OutputError> {
    let ids = panel.district_ids();
    let per_draw = flows
        .iter()
        .map(|(_, f)| aggregate_flows(f, &ids, map))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = csv_writer(path)?;
    w.write_record(["date", "region_id", "inflow", "outflow"])?;
    let Some(first) = per_draw.first() else {
        return w.flush().map_err(io_err(path));
    };
    let dates = &panel.dates[1..];
    for (r, region) in first.regions.iter().enumerate() {
        for t in 0..first.inflow.steps() {
            let ins: Vec<f64> = per_draw.iter().map(|a| a.inflow.at(r, t) as f64).collect();
            let outs: Vec<f64> = per_draw.iter().map(|a| a.outflow.at(r, t) as f64).collect();
            w.write_record([
                dates[t].to_string(),
                region.clone(),
                quantile(&ins, 0.5).to_string(),
                quantile(&outs, 0.5).to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn write_smooth_terms(path: &Path, bands: &[SmoothBand]) -> Result<(), OutputError> {
    let mut w = csv_writer(path)?;
    w.write_record(["term", "index", "median", "lo", "hi"])?;
    for b in bands {
        for i in 0..b.index.len() {
            w.write_record([
                b.label.clone(),
                b.index[i].to_string(),
                b.median[i].to_string(),
                b.lo[i].to_string(),
                b.hi[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Serialize)]
struct TruthSidecar<'a> {
    seed: u64,
    spec: &'a SimSpec,
    beta: [f64; 3],
    pi: &'a [f64],
    pi_padded: Vec<f64>,
    initial_occupancy: &'a [i64],
}

/// Ground-truth flows for days `1..=T` and the generating parameters.
pub fn write_truth(dir: &Path, panel: &OccupancyPanel, truth: &GroundTruth, spec: &SimSpec) -> Result<(), OutputError> {
    let path = dir.join("truth_flows.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["date", "district_id", "inflow", "outflow", "intensity"])?;
    let pre = truth.pre_history;
    for (d, district) in panel.districts.iter().enumerate() {
        for (t, date) in panel.dates.iter().enumerate() {
            w.write_record([
                date.to_string(),
                district.id.clone(),
                truth.inflow.at(d, pre + t).to_string(),
                truth.outflow.at(d, pre + t).to_string(),
                truth.intensity.at(d, t).to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("truth.json");
    let sidecar = TruthSidecar {
        seed: spec.seed,
        spec,
        beta: truth.beta,
        pi: truth.pi.as_slice(),
        pi_padded: truth.pi_padded(spec.fit_lag).as_slice().to_vec(),
        initial_occupancy: &truth.initial_occupancy,
    };
    let mut out = create(&path)?;
    serde_json::to_writer_pretty(&mut out, &sidecar)?;
    out.write_all(b"\n").map_err(io_err(&path))?;
    out.flush().map_err(io_err(&path))
}

/// Read a CSV table as strings, header row first.
pub fn read_table(path: &Path) -> Result<Vec<Vec<String>>, OutputError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = vec![r.headers()?.iter().map(str::to_string).collect()];
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

/// Dense grid view of per-cell medians, for tests and callers that skip CSV.
pub fn median_flows(flows: &[(usize, LatentFlows)]) -> Option<(Grid<f64>, Grid<f64>)> {
    let (_, first) = flows.first()?;
    let (n_d, n_t) = (first.n_districts(), first.n_steps());
    let mut inflow = Grid::new(n_d, n_t);
    let mut outflow = Grid::new(n_d, n_t);
    for d in 0..n_d {
        for t in 0..n_t {
            let ins: Vec<f64> = flows.iter().map(|(_, f)| f64::from(f.inflow(d, t as isize))).collect();
            let outs: Vec<f64> = flows.iter().map(|(_, f)| f64::from(f.outflow(d, t))).collect();
            inflow.set(d, t, quantile(&ins, 0.5));
            outflow.set(d, t, quantile(&outs, 0.5));
        }
    }
    Some((inflow, outflow))
}
