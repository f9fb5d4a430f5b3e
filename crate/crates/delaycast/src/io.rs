//! CSV serialization for every on-disk artifact: line lists, reporting
//! triangles, factor tables, imputations, forecasts, metrics, and the flat
//! key-value scenario configuration.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correct::ImputationSet;
use crate::error::{Error, Result};
use crate::evaluate::EvalRecord;
use crate::factors::FactorTable;
use crate::forecast::ForecastDistribution;
use crate::simulate::{Scenario, ScenarioConfig};
use crate::triangle::{CountMode, LineListRecord, ReportingTriangle, Season};

#[derive(Debug, Serialize, Deserialize)]
struct LineListRow {
    diagnosis_season: Season,
    diagnosis_week: u32,
    report_season: Season,
    report_week: u32,
    count: u32,
}

/// Read a line list from `diagnosis_season,diagnosis_week,report_season,report_week,count`.
pub fn read_linelist<R: Read>(reader: R) -> Result<Vec<LineListRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: LineListRow = row?;
        out.push(LineListRecord {
            diagnosis_season: r.diagnosis_season,
            diagnosis_week: r.diagnosis_week,
            report_season: r.report_season,
            report_week: r.report_week,
            count: r.count,
        });
    }
    Ok(out)
}

pub fn write_linelist<W: Write>(writer: W, records: &[LineListRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(LineListRow {
            diagnosis_season: r.diagnosis_season,
            diagnosis_week: r.diagnosis_week,
            report_season: r.report_season,
            report_week: r.report_week,
            count: r.count,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    season: Season,
    week: u32,
    lag: u32,
    count: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ValidationRow {
    season: Season,
    week: u32,
    validation: f64,
}

/// Write the triangle's count cells in long form (`season,week,lag,count`).
pub fn write_triangle_counts<W: Write>(writer: W, tri: &ReportingTriangle) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (season, week, lag, count) in tri.count_cells() {
        wtr.serialize(CountRow {
            season,
            week,
            lag,
            count,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write the validation cells (`season,week,validation`).
pub fn write_triangle_validation<W: Write>(writer: W, tri: &ReportingTriangle) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (season, week, validation) in tri.validation_cells() {
        wtr.serialize(ValidationRow {
            season,
            week,
            validation,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Rebuild a triangle from its count and validation CSVs. Season length and
/// maximum lag are inferred from the data unless overridden.
pub fn read_triangle<R1: Read, R2: Read>(
    counts: R1,
    validation: R2,
    weeks_per_season: Option<u32>,
    count_mode: CountMode,
) -> Result<ReportingTriangle> {
    let mut count_rows = Vec::new();
    for row in csv::Reader::from_reader(counts).deserialize() {
        let r: CountRow = row?;
        count_rows.push(r);
    }
    let mut validation_rows = Vec::new();
    for row in csv::Reader::from_reader(validation).deserialize() {
        let r: ValidationRow = row?;
        validation_rows.push(r);
    }
    if count_rows.is_empty() {
        return Err(Error::invalid("triangle counts CSV is empty"));
    }
    let mut seasons: Vec<Season> = count_rows
        .iter()
        .map(|r| r.season)
        .chain(validation_rows.iter().map(|r| r.season))
        .collect();
    seasons.sort_unstable();
    seasons.dedup();
    let max_week = count_rows
        .iter()
        .map(|r| r.week)
        .chain(validation_rows.iter().map(|r| r.week))
        .max()
        .unwrap();
    let max_lag = count_rows.iter().map(|r| r.lag).max().unwrap();
    let mut tri = ReportingTriangle::new(
        seasons,
        weeks_per_season.unwrap_or(max_week),
        max_lag,
        count_mode,
    )?;
    count_rows.sort_by_key(|r| (r.season, r.week, r.lag));
    for r in &count_rows {
        tri.set_count(r.season, r.week, r.lag, r.count)?;
    }
    for r in &validation_rows {
        tri.set_validation(r.season, r.week, r.validation)?;
    }
    Ok(tri)
}

#[derive(Debug, Serialize, Deserialize)]
struct FactorRow {
    season: Season,
    week: u32,
    lag: u32,
    pi_hat: f64,
    method: String,
}

/// Write a factor table expanded over the given cells
/// (`season,week,lag,pi_hat,method`).
pub fn write_factors<W: Write>(
    writer: W,
    table: &FactorTable,
    cells: &[(Season, u32, u32)],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for &(season, week, lag) in cells {
        wtr.serialize(FactorRow {
            season,
            week,
            lag,
            pi_hat: table.get(season, week, lag)?,
            method: table.method().as_str().to_string(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ImputationRow {
    imputation_id: usize,
    season: Season,
    week: u32,
    value: f64,
    finalized: bool,
}

/// Write imputed series (`imputation_id,season,week,value,finalized`).
pub fn write_imputations<W: Write>(writer: W, set: &ImputationSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (id, series) in set.series.iter().enumerate() {
        for w in &series.weeks {
            wtr.serialize(ImputationRow {
                imputation_id: id,
                season: w.season,
                week: w.week,
                value: w.value,
                finalized: w.finalized,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ForecastRow {
    pub season: Season,
    pub week: u32,
    pub horizon: u32,
    pub method: String,
    pub median: f64,
    pub mean: f64,
    pub q005: f64,
    pub q025: f64,
    pub q165: f64,
    pub q25: f64,
    pub q75: f64,
    pub q835: f64,
    pub q975: f64,
    pub q995: f64,
}

impl ForecastRow {
    pub fn from_distribution(method: &str, d: &ForecastDistribution) -> Self {
        ForecastRow {
            season: d.target.0,
            week: d.target.1,
            horizon: d.horizon,
            method: method.to_string(),
            median: d.median,
            mean: d.mean,
            q005: d.quantiles[0],
            q025: d.quantiles[1],
            q165: d.quantiles[2],
            q25: d.quantiles[3],
            q75: d.quantiles[4],
            q835: d.quantiles[5],
            q975: d.quantiles[6],
            q995: d.quantiles[7],
        }
    }
}

/// Write forecast rows
/// (`season,week,horizon,method,median,mean,q005,...,q995`).
pub fn write_forecasts<W: Write>(writer: W, rows: &[ForecastRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    method: String,
    season: Season,
    week: u32,
    horizon: u32,
    abs_error: f64,
    wis: f64,
    covered50: bool,
    covered67: bool,
    covered95: bool,
    covered99: bool,
}

/// Write metric records
/// (`method,season,week,horizon,abs_error,wis,covered50,...,covered99`).
pub fn write_metrics<W: Write>(writer: W, records: &[EvalRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(MetricRow {
            method: r.method.clone(),
            season: r.season,
            week: r.week,
            horizon: r.horizon,
            abs_error: r.abs_error,
            wis: r.wis,
            covered50: r.covered50,
            covered67: r.covered67,
            covered95: r.covered95,
            covered99: r.covered99,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write per-method summary rows
/// (`method,horizon,n,mae,mean_wis,cov50,...,cov99,prop_best_wis`).
pub fn write_summary<W: Write>(writer: W, rows: &[crate::pipeline::SummaryRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "method",
        "horizon",
        "n",
        "mae",
        "mean_wis",
        "cov50",
        "cov67",
        "cov95",
        "cov99",
        "prop_best_wis",
    ])?;
    for r in rows {
        wtr.write_record([
            r.method.clone(),
            r.horizon.to_string(),
            r.n.to_string(),
            r.mae.to_string(),
            r.mean_wis.to_string(),
            r.cov50.to_string(),
            r.cov67.to_string(),
            r.cov95.to_string(),
            r.cov99.to_string(),
            r.prop_best_wis.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write sensitivity-grid cells (`true_a,assumed_a,coverage95,n`).
pub fn write_sensitivity<W: Write>(
    writer: W,
    cells: &[crate::pipeline::SensitivityCell],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["true_a", "assumed_a", "coverage95", "n"])?;
    for c in cells {
        wtr.write_record([
            c.true_a.to_string(),
            c.assumed_a.to_string(),
            c.coverage95.to_string(),
            c.n.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read metric records back from a metrics CSV.
pub fn read_metrics<R: Read>(reader: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: MetricRow = row?;
        out.push(EvalRecord {
            method: r.method,
            season: r.season,
            week: r.week,
            horizon: r.horizon,
            abs_error: r.abs_error,
            wis: r.wis,
            covered50: r.covered50,
            covered67: r.covered67,
            covered95: r.covered95,
            covered99: r.covered99,
        });
    }
    Ok(out)
}

/// Parse the flat `key=value` scenario configuration. Documented keys:
/// `scenario, a, r, replicates, proxy_sigma2, seed, weeks, seasons`;
/// `proxy_sigma2` is comma-separated.
pub fn parse_scenario_config(text: &str) -> Result<ScenarioConfig> {
    let mut config = ScenarioConfig::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: std::num::ParseFloatError| {
            Error::invalid(format!("line {}: bad value for {key}: {e}", lineno + 1))
        };
        match key {
            "scenario" => config.scenario = Scenario::parse(value)?,
            "a" => config.a = value.parse().map_err(bad)?,
            "r" => config.r = value.parse().map_err(bad)?,
            "replicates" => {
                config.replicates = value
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad replicates: {e}")))?
            }
            "proxy_sigma2" => {
                config.proxy_sigma2 = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(bad))
                    .collect::<Result<Vec<f64>>>()?
            }
            "seed" => {
                config.seed = value
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad seed: {e}")))?
            }
            "weeks" => {
                config.weeks = value
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad weeks: {e}")))?
            }
            "seasons" => {
                config.seasons = value
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad seasons: {e}")))?
            }
            other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
        }
    }
    Ok(config)
}

pub fn write_scenario_config(config: &ScenarioConfig) -> String {
    let sigmas: Vec<String> = config.proxy_sigma2.iter().map(|v| v.to_string()).collect();
    format!(
        "scenario={}\na={}\nr={}\nreplicates={}\nproxy_sigma2={}\nseed={}\nweeks={}\nseasons={}\n",
        config.scenario.as_str(),
        config.a,
        config.r,
        config.replicates,
        sigmas.join(","),
        config.seed,
        config.weeks,
        config.seasons
    )
}

/// Convenience: write a string to a file path, creating parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Serialize a validation-count series (`season,week,validation`).
pub fn write_series<W: Write>(writer: W, series: &BTreeMap<(Season, u32), f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (&(season, week), &validation) in series {
        wtr.serialize(ValidationRow {
            season,
            week,
            validation,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a validation-count series.
pub fn read_series<R: Read>(reader: R) -> Result<BTreeMap<(Season, u32), f64>> {
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: ValidationRow = row?;
        out.insert((r.season, r.week), r.validation);
    }
    Ok(out)
}
