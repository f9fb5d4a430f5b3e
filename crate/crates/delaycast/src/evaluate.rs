//! Forecast scoring against validation counts: absolute error, weighted
//! interval score, interval coverage, and per-week best-method rankings.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;
use crate::triangle::Season;

/// Central-interval exclusion probabilities for the 50/67/95/99% intervals.
pub const RHO: [f64; 4] = [0.5, 0.33, 0.05, 0.01];

/// Number of scored intervals.
pub const K: usize = 4;

/// One scored method-target cell.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub method: String,
    pub season: Season,
    pub week: u32,
    pub horizon: u32,
    pub abs_error: f64,
    pub wis: f64,
    pub covered50: bool,
    pub covered67: bool,
    pub covered95: bool,
    pub covered99: bool,
}

/// Interval score of the central `1 - rho` interval `[lower, upper]` at `y`.
pub fn interval_score(lower: f64, upper: f64, rho: f64, y: f64) -> f64 {
    let mut score = upper - lower;
    if y < lower {
        score += (2.0 / rho) * (lower - y);
    }
    if y > upper {
        score += (2.0 / rho) * (y - upper);
    }
    score
}

/// Weighted interval score with the distribution median as the point forecast:
/// `[0.5 |y - median| + sum_j (rho_j / 2) IS_j] / (K + 0.5)`.
pub fn wis(dist: &ForecastDistribution, y: f64) -> Result<f64> {
    let mut acc = 0.5 * (y - dist.median).abs();
    for &rho in &RHO {
        let (lo, hi) = dist.interval(rho)?;
        acc += (rho / 2.0) * interval_score(lo, hi, rho, y);
    }
    Ok(acc / (K as f64 + 0.5))
}

/// Score one forecast against its validation count.
pub fn evaluate(method: &str, dist: &ForecastDistribution, y: f64) -> Result<EvalRecord> {
    let contains = |rho: f64| -> Result<bool> {
        let (lo, hi) = dist.interval(rho)?;
        Ok(y >= lo && y <= hi)
    };
    Ok(EvalRecord {
        method: method.to_string(),
        season: dist.target.0,
        week: dist.target.1,
        horizon: dist.horizon,
        abs_error: (dist.median - y).abs(),
        wis: wis(dist, y)?,
        covered50: contains(0.5)?,
        covered67: contains(0.33)?,
        covered95: contains(0.05)?,
        covered99: contains(0.01)?,
    })
}

/// Empirical coverage of the central `level` interval (e.g. `level = 0.95`).
pub fn coverage(dists: &[ForecastDistribution], ys: &[f64], level: f64) -> Result<f64> {
    if dists.len() != ys.len() {
        return Err(Error::Evaluate(format!(
            "{} forecasts but {} validation values",
            dists.len(),
            ys.len()
        )));
    }
    if dists.is_empty() {
        return Err(Error::Evaluate("coverage of an empty set".into()));
    }
    let rho = 1.0 - level;
    let mut hits = 0usize;
    for (d, &y) in dists.iter().zip(ys) {
        let (lo, hi) = d.interval(rho)?;
        if y >= lo && y <= hi {
            hits += 1;
        }
    }
    Ok(hits as f64 / dists.len() as f64)
}

/// Ranking metric for [`rank_best`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Wis,
    AbsError,
}

/// Proportion of target weeks on which each method minimizes the metric,
/// with exact ties splitting the credit equally. Every method must appear at
/// every (season, week, horizon) cell.
pub fn rank_best(records: &[EvalRecord], metric: Metric) -> Result<BTreeMap<String, f64>> {
    if records.is_empty() {
        return Err(Error::Evaluate("no records to rank".into()));
    }
    let methods: BTreeSet<&str> = records.iter().map(|r| r.method.as_str()).collect();
    let mut by_origin: BTreeMap<(Season, u32, u32), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_origin
            .entry((r.season, r.week, r.horizon))
            .or_default()
            .push(r);
    }
    let mut credit: BTreeMap<String, f64> = methods
        .iter()
        .map(|m| (m.to_string(), 0.0))
        .collect();
    let n_origins = by_origin.len() as f64;
    for (origin, group) in &by_origin {
        if group.len() != methods.len() {
            return Err(Error::Evaluate(format!(
                "origin {origin:?} has {} of {} methods",
                group.len(),
                methods.len()
            )));
        }
        let value = |r: &EvalRecord| match metric {
            Metric::Wis => r.wis,
            Metric::AbsError => r.abs_error,
        };
        let best = group
            .iter()
            .map(|r| value(r))
            .fold(f64::INFINITY, f64::min);
        let winners: Vec<&str> = group
            .iter()
            .filter(|r| value(r) <= best)
            .map(|r| r.method.as_str())
            .collect();
        let share = 1.0 / (winners.len() as f64 * n_origins);
        for w in winners {
            *credit.get_mut(w).unwrap() += share;
        }
    }
    Ok(credit)
}
