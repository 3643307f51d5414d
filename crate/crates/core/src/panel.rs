//! Occupancy panels: ingestion, differencing, inflow design matrices and
//! regional aggregation of latent flows.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::basis::{build_basis, BasisError, BasisSpec, Centroid};
use crate::grid::Grid;
use crate::sem::LatentFlows;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: cannot parse `{value}` in column `{column}`")]
    Parse {
        line: u64,
        column: String,
        value: String,
    },
    #[error("district `{district}` has no row for {date}")]
    MissingDay { district: String, date: NaiveDate },
    #[error("line {line}: negative occupancy {value} for district `{district}`")]
    NegativeOccupancy {
        line: u64,
        district: String,
        value: i64,
    },
    #[error("two rows for district `{district}` on {date}")]
    DuplicateCell { district: String, date: NaiveDate },
    #[error("panel is empty")]
    Empty,
    #[error("panel has {0} day(s); at least two are needed to difference")]
    PanelTooShort(usize),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("district `{0}` has no region in the region map")]
    UnmappedDistrict(String),
    #[error("district `{0}` lacks centroid coordinates required by the spatial basis")]
    MissingCentroid(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Column names of the ingestion CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSchema {
    pub date: String,
    pub district: String,
    pub occupancy: String,
    /// Used when present in the file.
    pub population: Option<String>,
    pub longitude: Option<String>,
    pub latitude: Option<String>,
    /// Covariate columns to read; `None` reads every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl Default for IngestSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            district: "district_id".into(),
            occupancy: "occupancy".into(),
            population: Some("population".into()),
            longitude: Some("longitude".into()),
            latitude: Some("latitude".into()),
            covariates: None,
        }
    }
}

impl IngestSchema {
    /// Column layout of the public DIVI occupancy extracts.
    pub fn divi() -> Self {
        Self {
            occupancy: "covid_icu_beds".into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct District {
    pub id: String,
    pub population: Option<f64>,
    pub centroid: Option<Centroid>,
}

/// Rectangular day × district panel of observed occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyPanel {
    pub districts: Vec<District>,
    pub dates: Vec<NaiveDate>,
    /// `occupancy[d][t]`
    pub occupancy: Grid<i64>,
    pub covariates: BTreeMap<String, Grid<f64>>,
}

impl OccupancyPanel {
    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_districts(&self) -> usize {
        self.districts.len()
    }

    pub fn district_ids(&self) -> Vec<String> {
        self.districts.iter().map(|d| d.id.clone()).collect()
    }

    pub fn centroids(&self) -> Option<Vec<Centroid>> {
        self.districts.iter().map(|d| d.centroid).collect()
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<(), PanelError> {
        if self.districts.is_empty() || self.dates.is_empty() {
            return Err(PanelError::Empty);
        }
        for w in self.dates.windows(2) {
            if w[0].succ_opt() != Some(w[1]) {
                return Err(PanelError::MissingDay {
                    district: self.districts[0].id.clone(),
                    date: w[0].succ_opt().unwrap_or(w[1]),
                });
            }
        }
        for (d, row) in self.occupancy.rows().enumerate() {
            if let Some(&v) = row.iter().find(|&&v| v < 0) {
                return Err(PanelError::NegativeOccupancy {
                    line: 0,
                    district: self.districts[d].id.clone(),
                    value: v,
                });
            }
        }
        Ok(())
    }
}

struct RawRow {
    occupancy: i64,
    covariates: Vec<f64>,
}

fn parse_f64(line: u64, column: &str, value: &str) -> Result<f64, PanelError> {
    value.trim().parse::<f64>().map_err(|_| PanelError::Parse {
        line,
        column: column.to_string(),
        value: value.to_string(),
    })
}

fn parse_count(line: u64, column: &str, value: &str) -> Result<i64, PanelError> {
    let v = value.trim();
    if let Ok(n) = v.parse::<i64>() {
        return Ok(n);
    }
    match v.parse::<f64>() {
        Ok(x) if x.fract() == 0.0 && x.abs() < 9e15 => Ok(x as i64),
        _ => Err(PanelError::Parse {
            line,
            column: column.to_string(),
            value: value.to_string(),
        }),
    }
}

/// Load and validate a panel from a CSV file.
pub fn load_panel(path: impl AsRef<Path>, schema: &IngestSchema) -> Result<OccupancyPanel, PanelError> {
    let file = std::fs::File::open(path)?;
    read_panel(file, schema)
}

/// Load and validate a panel from any CSV source.
pub fn read_panel<R: Read>(source: R, schema: &IngestSchema) -> Result<OccupancyPanel, PanelError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| PanelError::MissingColumn(name.to_string()));

    let date_col = require(&schema.date)?;
    let district_col = require(&schema.district)?;
    let occ_col = require(&schema.occupancy)?;
    let optional = |name: &Option<String>| name.as_deref().and_then(find);
    let pop_col = optional(&schema.population);
    let lon_col = optional(&schema.longitude);
    let lat_col = optional(&schema.latitude);

    let used: BTreeSet<usize> = [Some(date_col), Some(district_col), Some(occ_col), pop_col, lon_col, lat_col]
        .into_iter()
        .flatten()
        .collect();
    let covariate_cols: Vec<(String, usize)> = match &schema.covariates {
        Some(names) => names
            .iter()
            .map(|n| require(n).map(|c| (n.clone(), c)))
            .collect::<Result<_, _>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !used.contains(i))
            .map(|(i, h)| (h.to_string(), i))
            .collect(),
    };

    let mut cells: BTreeMap<String, BTreeMap<NaiveDate, RawRow>> = BTreeMap::new();
    let mut meta: BTreeMap<String, (Option<f64>, Option<f64>, Option<f64>)> = BTreeMap::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k as u64 + 2;
        let field = |c: usize| record.get(c).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(date_col), "%Y-%m-%d").map_err(|_| PanelError::Parse {
            line,
            column: schema.date.clone(),
            value: field(date_col).to_string(),
        })?;
        let district = field(district_col).to_string();
        let occupancy = parse_count(line, &schema.occupancy, field(occ_col))?;
        if occupancy < 0 {
            return Err(PanelError::NegativeOccupancy {
                line,
                district,
                value: occupancy,
            });
        }
        let covariates = covariate_cols
            .iter()
            .map(|(name, c)| parse_f64(line, name, field(*c)))
            .collect::<Result<Vec<_>, _>>()?;
        let opt_value = |col: Option<usize>, name: &Option<String>| -> Result<Option<f64>, PanelError> {
            match col {
                Some(c) if !field(c).is_empty() => {
                    parse_f64(line, name.as_deref().unwrap_or_default(), field(c)).map(Some)
                }
                _ => Ok(None),
            }
        };
        let pop = opt_value(pop_col, &schema.population)?;
        let lon = opt_value(lon_col, &schema.longitude)?;
        let lat = opt_value(lat_col, &schema.latitude)?;
        meta.entry(district.clone()).or_insert((pop, lon, lat));

        let per_district = cells.entry(district.clone()).or_default();
        if per_district.insert(date, RawRow { occupancy, covariates }).is_some() {
            return Err(PanelError::DuplicateCell { district, date });
        }
    }
    if cells.is_empty() {
        return Err(PanelError::Empty);
    }

    let first = cells.values().filter_map(|m| m.keys().next()).min().copied().ok_or(PanelError::Empty)?;
    let last = cells.values().filter_map(|m| m.keys().next_back()).max().copied().ok_or(PanelError::Empty)?;
    let dates: Vec<NaiveDate> = first.iter_days().take_while(|d| *d <= last).collect();

    let n_days = dates.len();
    let mut occupancy = Vec::with_capacity(cells.len());
    let mut cov_rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cells.len()); covariate_cols.len()];
    let mut districts = Vec::with_capacity(cells.len());
    for (id, rows) in &cells {
        let mut occ_row = Vec::with_capacity(n_days);
        let mut cov_row = vec![Vec::with_capacity(n_days); covariate_cols.len()];
        for date in &dates {
            let row = rows.get(date).ok_or_else(|| PanelError::MissingDay {
                district: id.clone(),
                date: *date,
            })?;
            occ_row.push(row.occupancy);
            for (j, v) in row.covariates.iter().enumerate() {
                cov_row[j].push(*v);
            }
        }
        occupancy.push(occ_row);
        for (j, r) in cov_row.into_iter().enumerate() {
            cov_rows[j].push(r);
        }
        let (population, lon, lat) = meta[id];
        districts.push(District {
            id: id.clone(),
            population,
            centroid: lon.zip(lat).map(|(longitude, latitude)| Centroid { longitude, latitude }),
        });
    }
    let covariates = covariate_cols
        .into_iter()
        .zip(cov_rows)
        .map(|((name, _), rows)| (name, Grid::from_rows(rows)))
        .collect();

    let panel = OccupancyPanel {
        districts,
        dates,
        occupancy: Grid::from_rows(occupancy),
        covariates,
    };
    panel.validate()?;
    Ok(panel)
}

/// Write a panel in the default ingestion layout.
pub fn write_panel<W: Write>(panel: &OccupancyPanel, sink: W) -> Result<(), PanelError> {
    let mut writer = csv::Writer::from_writer(sink);
    let has_pop = panel.districts.iter().all(|d| d.population.is_some());
    let has_centroid = panel.districts.iter().all(|d| d.centroid.is_some());
    let mut header = vec!["date".to_string(), "district_id".into(), "occupancy".into()];
    if has_pop {
        header.push("population".into());
    }
    if has_centroid {
        header.push("longitude".into());
        header.push("latitude".into());
    }
    header.extend(panel.covariates.keys().cloned());
    writer.write_record(&header)?;
    for t in 0..panel.n_days() {
        for (d, district) in panel.districts.iter().enumerate() {
            let mut rec = vec![
                panel.dates[t].format("%Y-%m-%d").to_string(),
                district.id.clone(),
                panel.occupancy.at(d, t).to_string(),
            ];
            if has_pop {
                rec.push(district.population.unwrap_or_default().to_string());
            }
            if let (true, Some(c)) = (has_centroid, district.centroid) {
                rec.push(c.longitude.to_string());
                rec.push(c.latitude.to_string());
            }
            for grid in panel.covariates.values() {
                rec.push(grid.at(d, t).to_string());
            }
            writer.write_record(&rec)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// First differences `Δ(t, d) = Y(t, d) − Y(t − 1, d)` for `t = 2..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSeries {
    /// `delta[d][s]` where step `s` is panel day `s + 1`.
    pub delta: Grid<i64>,
    /// Calendar day of each step.
    pub dates: Vec<NaiveDate>,
}

impl DeltaSeries {
    pub fn n_steps(&self) -> usize {
        self.delta.steps()
    }

    pub fn n_districts(&self) -> usize {
        self.delta.districts()
    }
}

pub fn compute_deltas(panel: &OccupancyPanel) -> Result<DeltaSeries, PanelError> {
    let t = panel.n_days();
    if t < 2 {
        return Err(PanelError::PanelTooShort(t));
    }
    let rows = panel
        .occupancy
        .rows()
        .map(|row| row.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    Ok(DeltaSeries {
        delta: Grid::from_rows(rows),
        dates: panel.dates[1..].to_vec(),
    })
}

/// Penalty on a contiguous block of design columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub label: String,
    pub start: usize,
    /// Unweighted symmetric PSD penalty.
    pub matrix: DMatrix<f64>,
    pub weight: f64,
}

/// Inflow design over the differenced steps, rows ordered district-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub penalty: Vec<PenaltyBlock>,
    /// `(step, district)` of every row.
    pub row_index: Vec<(usize, usize)>,
    pub n_steps: usize,
    pub n_districts: usize,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    #[inline]
    pub fn row_of(&self, step: usize, district: usize) -> usize {
        district * self.n_steps + step
    }

    /// Full `p × p` weighted penalty `S`.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for block in &self.penalty {
            let k = block.matrix.nrows();
            let mut view = s.view_mut((block.start, block.start), (k, k));
            view += &block.matrix * block.weight;
        }
        s
    }

    /// Intercept-only design with the same row layout.
    pub fn intercept_only(&self) -> DesignMatrix {
        DesignMatrix {
            names: vec![INTERCEPT.to_string()],
            x: DMatrix::from_element(self.nrows(), 1, 1.0),
            penalty: Vec::new(),
            row_index: self.row_index.clone(),
            n_steps: self.n_steps,
            n_districts: self.n_districts,
        }
    }

    /// Design built from explicit columns (district-major rows).
    pub fn from_columns(n_steps: usize, n_districts: usize, names: Vec<String>, columns: Vec<Vec<f64>>) -> Self {
        let n = n_steps * n_districts;
        assert!(columns.iter().all(|c| c.len() == n));
        let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        let row_index = (0..n_districts).flat_map(|d| (0..n_steps).map(move |t| (t, d))).collect();
        Self {
            names,
            x,
            penalty: Vec::new(),
            row_index,
            n_steps,
            n_districts,
        }
    }
}

pub const INTERCEPT: &str = "(Intercept)";
pub const WEEKDAY_DUMMIES: [(Weekday, &str); 6] = [
    (Weekday::Mon, "Monday"),
    (Weekday::Tue, "Tuesday"),
    (Weekday::Wed, "Wednesday"),
    (Weekday::Thu, "Thursday"),
    (Weekday::Sat, "Saturday"),
    (Weekday::Sun, "Sunday"),
];

/// Weekday indicators with Friday as the all-zero reference.
pub fn weekday_dummies(date: NaiveDate) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (k, (day, _)) in WEEKDAY_DUMMIES.iter().enumerate() {
        if date.weekday() == *day {
            out[k] = 1.0;
        }
    }
    out
}

fn default_log_floor() -> f64 {
    1.0
}

/// Which columns enter the inflow design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateConfig {
    /// Covariates used as-is.
    pub raw: Vec<String>,
    /// Daily case counts turned into the log 7-day mean rate per 100,000.
    pub log_rate: Vec<String>,
    pub weekday: bool,
    /// Floor applied before the log, in cases per 100,000.
    #[serde(default = "default_log_floor")]
    pub log_floor: f64,
    pub basis: BasisSpec,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            raw: Vec::new(),
            log_rate: Vec::new(),
            weekday: false,
            log_floor: default_log_floor(),
            basis: BasisSpec::default(),
        }
    }
}

/// Log of the mean daily rate over the seven days strictly before `day`,
/// per 100,000 inhabitants. The window is clipped at the panel start.
pub fn log_weekly_rate(daily: &[f64], day: usize, population: Option<f64>, floor: f64) -> f64 {
    let lo = day.saturating_sub(7);
    let window = if day == 0 { &daily[0..1] } else { &daily[lo..day] };
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    let rate = match population {
        Some(pop) => mean / (pop * 1e-5),
        None => mean,
    };
    rate.max(floor).ln()
}

/// Assemble the inflow design for every differenced step of `panel`.
pub fn build_covariates(panel: &OccupancyPanel, config: &CovariateConfig) -> Result<DesignMatrix, PanelError> {
    let n_days = panel.n_days();
    if n_days < 2 {
        return Err(PanelError::PanelTooShort(n_days));
    }
    let n_steps = n_days - 1;
    let n_districts = panel.n_districts();
    let n = n_steps * n_districts;
    let mut names = vec![INTERCEPT.to_string()];
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];

    let lookup = |name: &String| {
        panel
            .covariates
            .get(name)
            .ok_or_else(|| PanelError::UnknownCovariate(name.clone()))
    };
    for name in &config.raw {
        let grid = lookup(name)?;
        names.push(name.clone());
        columns.push(
            (0..n_districts)
                .flat_map(|d| (0..n_steps).map(move |s| grid.at(d, s + 1)))
                .collect(),
        );
    }
    for name in &config.log_rate {
        let grid = lookup(name)?;
        names.push(format!("log7_{name}"));
        let mut col = Vec::with_capacity(n);
        for d in 0..n_districts {
            let pop = panel.districts[d].population;
            for s in 0..n_steps {
                col.push(log_weekly_rate(grid.row(d), s + 1, pop, config.log_floor));
            }
        }
        columns.push(col);
    }
    if config.weekday {
        let dummies: Vec<[f64; 6]> = panel.dates[1..].iter().map(|d| weekday_dummies(*d)).collect();
        for (k, (_, label)) in WEEKDAY_DUMMIES.iter().enumerate() {
            names.push((*label).to_string());
            columns.push((0..n_districts).flat_map(|_| dummies.iter().map(move |w| w[k])).collect());
        }
    }

    let mut penalty = Vec::new();
    if config.basis.time_enabled() || config.basis.space_enabled() {
        let times: Vec<f64> = (1..=n_steps).map(|t| t as f64).collect();
        let coords = if config.basis.space_enabled() {
            let c = panel
                .districts
                .iter()
                .map(|d| d.centroid.ok_or_else(|| PanelError::MissingCentroid(d.id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            Some(c)
        } else {
            None
        };
        let blocks = build_basis(&times, coords.as_deref(), &config.basis)?;
        for block in blocks {
            let start = columns.len();
            let k = block.values.ncols();
            for j in 0..k {
                names.push(format!("{}.{}", block.label, j + 1));
                let mut col = Vec::with_capacity(n);
                for d in 0..n_districts {
                    for s in 0..n_steps {
                        let row = if block.per_district { d } else { s };
                        col.push(block.values[(row, j)]);
                    }
                }
                columns.push(col);
            }
            penalty.push(PenaltyBlock {
                label: block.label,
                start,
                matrix: block.penalty,
                weight: block.weight,
            });
        }
    }

    let mut design = DesignMatrix::from_columns(n_steps, n_districts, names, columns);
    design.penalty = penalty;
    Ok(design)
}

/// District → region assignment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionMap {
    map: BTreeMap<String, String>,
}

impl RegionMap {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Self { map }
    }

    pub fn identity<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            map: ids.into_iter().map(|s| (s.to_string(), s.to_string())).collect(),
        }
    }

    pub fn region_of(&self, district: &str) -> Option<&str> {
        self.map.get(district).map(String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PanelError> {
        Self::read(std::fs::File::open(path)?)
    }

    /// Two-column CSV `district_id,region_id` with a header row.
    pub fn read<R: Read>(source: R) -> Result<Self, PanelError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut map = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let district = record.get(0).unwrap_or("").to_string();
            let region = record.get(1).unwrap_or("").to_string();
            map.insert(district, region);
        }
        Ok(Self { map })
    }
}

/// Region-level daily totals over the observed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFlows {
    pub regions: Vec<String>,
    pub inflow: Grid<u64>,
    pub outflow: Grid<u64>,
}

fn region_slots(district_ids: &[String], map: &RegionMap) -> Result<(Vec<String>, Vec<usize>), PanelError> {
    let mut regions = BTreeSet::new();
    for id in district_ids {
        regions.insert(map.region_of(id).ok_or_else(|| PanelError::UnmappedDistrict(id.clone()))?);
    }
    let regions: Vec<String> = regions.into_iter().map(str::to_string).collect();
    let slots = district_ids
        .iter()
        .map(|id| {
            let r = map.region_of(id).expect("checked above");
            regions.binary_search_by(|x| x.as_str().cmp(r)).expect("region listed")
        })
        .collect();
    Ok((regions, slots))
}

/// Sum latent flows of member districts per region and step.
pub fn aggregate_flows(flows: &LatentFlows, district_ids: &[String], map: &RegionMap) -> Result<RegionFlows, PanelError> {
    let (regions, slots) = region_slots(district_ids, map)?;
    let steps = flows.n_steps();
    let mut inflow = Grid::new(regions.len(), steps);
    let mut outflow = Grid::new(regions.len(), steps);
    for (d, &slot) in slots.iter().enumerate() {
        for t in 0..steps {
            *inflow.get_mut(slot, t) += u64::from(flows.inflow(d, t as isize));
            *outflow.get_mut(slot, t) += u64::from(flows.outflow(d, t));
        }
    }
    Ok(RegionFlows {
        regions,
        inflow,
        outflow,
    })
}
