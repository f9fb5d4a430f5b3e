//! Reporting-triangle data model and as-of snapshots.
//!
//! A reporting triangle stores, for each (season, week), the cumulative case
//! counts `N(d)` reported `d` weeks after the week's first report, together
//! with the finalized "validation" count `N(inf)`. A [`Snapshot`] is the view
//! of that triangle available at a forecast origin: the current season's
//! most recent reports plus prior seasons' validation series.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Season label (e.g. a year). Seasons are ordered by this value.
pub type Season = i32;

/// Whether counts are whole numbers (line-list data) or arbitrary
/// non-negative reals (weighted/revised surveillance series).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Integer,
    Real,
}

/// One case in a line list: when it was diagnosed and when it was reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineListRecord {
    pub diagnosis_season: Season,
    pub diagnosis_week: u32,
    pub report_season: Season,
    pub report_week: u32,
    /// Number of identical cases this record stands for.
    pub count: u32,
}

/// Case counts indexed by (season, week, lag) plus validation counts.
#[derive(Debug, Clone)]
pub struct ReportingTriangle {
    season_ids: Vec<Season>,
    weeks_per_season: u32,
    max_lag: u32,
    count_mode: CountMode,
    counts: BTreeMap<(Season, u32, u32), f64>,
    validation: BTreeMap<(Season, u32), f64>,
}

impl ReportingTriangle {
    pub fn new(
        season_ids: Vec<Season>,
        weeks_per_season: u32,
        max_lag: u32,
        count_mode: CountMode,
    ) -> Result<Self> {
        if season_ids.is_empty() {
            return Err(Error::invalid("triangle needs at least one season"));
        }
        if weeks_per_season == 0 {
            return Err(Error::invalid("weeks_per_season must be positive"));
        }
        let mut sorted = season_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != season_ids {
            return Err(Error::invalid("season ids must be strictly increasing"));
        }
        Ok(Self {
            season_ids,
            weeks_per_season,
            max_lag,
            count_mode,
            counts: BTreeMap::new(),
            validation: BTreeMap::new(),
        })
    }

    pub fn season_ids(&self) -> &[Season] {
        &self.season_ids
    }

    pub fn weeks_per_season(&self) -> u32 {
        self.weeks_per_season
    }

    pub fn max_lag(&self) -> u32 {
        self.max_lag
    }

    pub fn count_mode(&self) -> CountMode {
        self.count_mode
    }

    fn check_cell(&self, season: Season, week: u32) -> Result<()> {
        if !self.season_ids.contains(&season) {
            return Err(Error::invalid(format!("unknown season {season}")));
        }
        if week == 0 || week > self.weeks_per_season {
            return Err(Error::invalid(format!(
                "week {week} outside 1..={}",
                self.weeks_per_season
            )));
        }
        Ok(())
    }

    fn check_value(&self, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::invalid(format!("count {value} must be finite and >= 0")));
        }
        if self.count_mode == CountMode::Integer && value.fract() != 0.0 {
            return Err(Error::invalid(format!(
                "count {value} is not a whole number in integer mode"
            )));
        }
        Ok(())
    }

    /// Store `N_ts(d)`. Lags must be filled as a contiguous prefix: setting
    /// lag `d > 0` requires lag `d - 1` to be present already.
    pub fn set_count(&mut self, season: Season, week: u32, lag: u32, value: f64) -> Result<()> {
        self.check_cell(season, week)?;
        self.check_value(value)?;
        if lag > self.max_lag {
            return Err(Error::invalid(format!(
                "lag {lag} exceeds max lag {}",
                self.max_lag
            )));
        }
        if lag > 0 && !self.counts.contains_key(&(season, week, lag - 1)) {
            return Err(Error::invalid(format!(
                "lag {lag} set before lag {} for season {season} week {week}",
                lag - 1
            )));
        }
        self.counts.insert((season, week, lag), value);
        Ok(())
    }

    /// Store the finalized validation count. Validation values are final:
    /// overwriting with a different value is rejected.
    pub fn set_validation(&mut self, season: Season, week: u32, value: f64) -> Result<()> {
        self.check_cell(season, week)?;
        self.check_value(value)?;
        if let Some(&existing) = self.validation.get(&(season, week)) {
            if existing != value {
                return Err(Error::invalid(format!(
                    "validation for season {season} week {week} already set to {existing}"
                )));
            }
        }
        self.validation.insert((season, week), value);
        Ok(())
    }

    pub fn count(&self, season: Season, week: u32, lag: u32) -> Option<f64> {
        self.counts.get(&(season, week, lag)).copied()
    }

    pub fn require_count(&self, season: Season, week: u32, lag: u32) -> Result<f64> {
        self.count(season, week, lag)
            .ok_or(Error::MissingCell { season, week, lag })
    }

    pub fn validation(&self, season: Season, week: u32) -> Option<f64> {
        self.validation.get(&(season, week)).copied()
    }

    pub fn require_validation(&self, season: Season, week: u32) -> Result<f64> {
        self.validation(season, week)
            .ok_or(Error::MissingValidation { season, week })
    }

    /// Largest observed lag for a cell, if any lags are observed.
    pub fn d_max(&self, season: Season, week: u32) -> Option<u32> {
        (0..=self.max_lag)
            .take_while(|&d| self.counts.contains_key(&(season, week, d)))
            .last()
    }

    /// Iterate over all stored count cells in deterministic order.
    pub fn count_cells(&self) -> impl Iterator<Item = (Season, u32, u32, f64)> + '_ {
        self.counts.iter().map(|(&(s, t, d), &v)| (s, t, d, v))
    }

    /// Iterate over all stored validation cells in deterministic order.
    pub fn validation_cells(&self) -> impl Iterator<Item = (Season, u32, f64)> + '_ {
        self.validation.iter().map(|(&(s, t), &v)| (s, t, v))
    }

    /// Incremental counts `n(d) = N(d) - N(d-1)` over the observed lag prefix,
    /// with `n(0) = N(0)`. Increments may be negative (over-reporting).
    pub fn increments(&self, season: Season, week: u32) -> Result<Vec<f64>> {
        let d_max = self.d_max(season, week).ok_or(Error::MissingCell {
            season,
            week,
            lag: 0,
        })?;
        let mut out = Vec::with_capacity(d_max as usize + 1);
        let mut prev = 0.0;
        for d in 0..=d_max {
            let v = self.require_count(season, week, d)?;
            out.push(v - prev);
            prev = v;
        }
        Ok(out)
    }

    /// Build the as-of view at `origin = (season, week)`.
    ///
    /// Week `i` of the origin season carries `N_i(t* - i)` when `t* - i <=
    /// max_lag` and the validation count (finalized) otherwise. Prior seasons
    /// carry their validation series. No cell reported after the origin is
    /// visible.
    pub fn snapshot(&self, origin_season: Season, origin_week: u32) -> Result<Snapshot> {
        self.check_cell(origin_season, origin_week)?;
        let tau = self.max_lag;
        let mut current = Vec::with_capacity(origin_week as usize);
        for i in 1..=origin_week {
            let lag = origin_week - i;
            if lag > tau {
                let value = self.require_validation(origin_season, i)?;
                current.push(SnapshotEntry {
                    week: i,
                    value,
                    lag_used: lag,
                    finalized: true,
                });
            } else {
                let value = self.require_count(origin_season, i, lag)?;
                current.push(SnapshotEntry {
                    week: i,
                    value,
                    lag_used: lag,
                    finalized: false,
                });
            }
        }
        let mut history = Vec::new();
        for &s in &self.season_ids {
            if s >= origin_season {
                continue;
            }
            let mut series = Vec::with_capacity(self.weeks_per_season as usize);
            for t in 1..=self.weeks_per_season {
                series.push(self.require_validation(s, t)?);
            }
            history.push((s, series));
        }
        // Current-season sub-triangle: every report made up to the origin.
        let mut visible = BTreeMap::new();
        for i in 1..=origin_week {
            for d in 0..=tau.min(origin_week - i) {
                if let Some(v) = self.count(origin_season, i, d) {
                    visible.insert((i, d), v);
                }
            }
            if origin_week - i > tau {
                if let Some(v) = self.validation(origin_season, i) {
                    visible.insert((i, tau + 1), v);
                }
            }
        }
        Ok(Snapshot {
            origin: (origin_season, origin_week),
            max_lag: tau,
            weeks_per_season: self.weeks_per_season,
            current_season: current,
            history,
            visible,
            covariates: None,
            proxies: None,
            excluded: 0,
        })
    }
}

/// Expand a triangle with integer counts back into a line list, one record
/// per (diagnosis week, lag) cell. Report weeks past the end of a season
/// roll into the next season.
pub fn triangle_to_linelist(tri: &ReportingTriangle) -> Result<Vec<LineListRecord>> {
    let w = tri.weeks_per_season();
    let mut out = Vec::new();
    for &s in tri.season_ids() {
        for t in 1..=w {
            let increments = match tri.d_max(s, t) {
                Some(_) => tri.increments(s, t)?,
                None => continue,
            };
            for (d, inc) in increments.iter().enumerate() {
                if *inc <= 0.0 {
                    continue;
                }
                if (inc - inc.round()).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "non-integer increment {inc} at season {s} week {t} lag {d}"
                    )));
                }
                let (mut rs, mut rt) = (s, t + d as u32);
                while rt > w {
                    rt -= w;
                    rs += 1;
                }
                out.push(LineListRecord {
                    diagnosis_season: s,
                    diagnosis_week: t,
                    report_season: rs,
                    report_week: rt,
                    count: inc.round() as u32,
                });
            }
        }
    }
    Ok(out)
}

/// Roll a line list up into a reporting triangle.
///
/// `N_ts(d)` counts records diagnosed at (s, t) and reported with delay at
/// most `d`; the validation count is the total for (s, t). Records with a
/// report week before the diagnosis week are rejected with their index.
pub fn rollup_linelist(
    records: &[LineListRecord],
    max_lag: u32,
    weeks_per_season: u32,
) -> Result<ReportingTriangle> {
    if records.is_empty() {
        return Err(Error::invalid("line list is empty"));
    }
    if weeks_per_season == 0 {
        return Err(Error::invalid("weeks_per_season must be positive"));
    }
    let w = weeks_per_season as i64;
    let mut delays: BTreeMap<(Season, u32), Vec<(u32, u32)>> = BTreeMap::new();
    let mut min_season = Season::MAX;
    let mut max_season = Season::MIN;
    for (index, r) in records.iter().enumerate() {
        if r.diagnosis_week == 0
            || r.diagnosis_week > weeks_per_season
            || r.report_week == 0
            || r.report_week > weeks_per_season
        {
            return Err(Error::invalid(format!(
                "record {index}: week outside 1..={weeks_per_season}"
            )));
        }
        let delay = (r.report_season as i64 - r.diagnosis_season as i64) * w
            + (r.report_week as i64 - r.diagnosis_week as i64);
        if delay < 0 {
            return Err(Error::ReportBeforeDiagnosis { index });
        }
        min_season = min_season.min(r.diagnosis_season);
        max_season = max_season.max(r.diagnosis_season);
        delays
            .entry((r.diagnosis_season, r.diagnosis_week))
            .or_default()
            .push((delay.min(u32::MAX as i64) as u32, r.count));
    }
    let season_ids: Vec<Season> = (min_season..=max_season).collect();
    let mut tri = ReportingTriangle::new(season_ids.clone(), weeks_per_season, max_lag, CountMode::Integer)?;
    for &s in &season_ids {
        for t in 1..=weeks_per_season {
            let cell = delays.get(&(s, t));
            let total: u32 = cell.map_or(0, |v| v.iter().map(|&(_, c)| c).sum());
            for d in 0..=max_lag {
                let n: u32 = cell.map_or(0, |v| {
                    v.iter().filter(|&&(delay, _)| delay <= d).map(|&(_, c)| c).sum()
                });
                tri.set_count(s, t, d, n as f64)?;
            }
            tri.set_validation(s, t, total as f64)?;
        }
    }
    Ok(tri)
}

/// One current-season week as seen from the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotEntry {
    pub week: u32,
    pub value: f64,
    pub lag_used: u32,
    pub finalized: bool,
}

/// The dataset visible at a forecast origin.
///
/// Immutable once built; cheap to clone and safe to share across workers.
#[derive(Debug, Clone)]
pub struct Snapshot {
    origin: (Season, u32),
    max_lag: u32,
    weeks_per_season: u32,
    current_season: Vec<SnapshotEntry>,
    history: Vec<(Season, Vec<f64>)>,
    /// Current-season cells (week, lag) reported up to the origin. Finalized
    /// weeks appear at pseudo-lag `max_lag + 1` with their validation value.
    visible: BTreeMap<(u32, u32), f64>,
    covariates: Option<BTreeMap<(Season, u32), Vec<f64>>>,
    proxies: Option<BTreeMap<(Season, u32), f64>>,
    /// Weeks dropped from the end of the current season by [`crate::correct::exclude`];
    /// used for horizon bookkeeping relative to the original origin.
    excluded: u32,
}

impl Snapshot {
    pub fn origin(&self) -> (Season, u32) {
        self.origin
    }

    pub fn max_lag(&self) -> u32 {
        self.max_lag
    }

    pub fn weeks_per_season(&self) -> u32 {
        self.weeks_per_season
    }

    pub fn current_season(&self) -> &[SnapshotEntry] {
        &self.current_season
    }

    /// Prior seasons' validation series, oldest first.
    pub fn history(&self) -> &[(Season, Vec<f64>)] {
        &self.history
    }

    /// A current-season count at (week, lag), if reported by the origin.
    pub fn visible_count(&self, week: u32, lag: u32) -> Option<f64> {
        self.visible.get(&(week, lag)).copied()
    }

    /// The most recent count for a current-season week: `N_i(min(t*-i, tau))`,
    /// or the validation value once the week is finalized.
    pub fn latest_count(&self, week: u32) -> Option<f64> {
        let (_, t_star) = self.origin;
        if week == 0 || week > t_star {
            return None;
        }
        let lag = t_star - week;
        if lag > self.max_lag {
            self.visible.get(&(week, self.max_lag + 1)).copied()
        } else {
            self.visible.get(&(week, lag)).copied()
        }
    }

    pub fn proxies(&self) -> Option<&BTreeMap<(Season, u32), f64>> {
        self.proxies.as_ref()
    }

    pub fn proxy(&self, season: Season, week: u32) -> Option<f64> {
        self.proxies.as_ref().and_then(|m| m.get(&(season, week)).copied())
    }

    pub fn covariates(&self) -> Option<&BTreeMap<(Season, u32), Vec<f64>>> {
        self.covariates.as_ref()
    }

    pub fn with_proxies(mut self, proxies: BTreeMap<(Season, u32), f64>) -> Self {
        self.proxies = Some(proxies);
        self
    }

    pub fn with_covariates(mut self, covariates: BTreeMap<(Season, u32), Vec<f64>>) -> Self {
        self.covariates = Some(covariates);
        self
    }

    pub fn excluded(&self) -> u32 {
        self.excluded
    }

    /// Internal: used by the exclusion correction.
    pub(crate) fn drop_recent_weeks(&self, m: u32) -> Result<Snapshot> {
        let (_, t_star) = self.origin;
        if m == 0 {
            return Err(Error::invalid("exclusion depth must be >= 1"));
        }
        if (self.current_season.len() as i64 - m as i64) < 2 && self.history.is_empty() {
            return Err(Error::invalid(format!(
                "excluding {m} weeks leaves fewer than 2 weeks of data"
            )));
        }
        if m as usize > self.current_season.len() {
            return Err(Error::invalid(format!(
                "cannot exclude {m} weeks from a {}-week season prefix",
                self.current_season.len()
            )));
        }
        let keep = t_star - m;
        let mut out = self.clone();
        out.current_season.retain(|e| e.week <= keep);
        out.visible.retain(|&(w, _), _| w <= keep);
        out.excluded = self.excluded + m;
        Ok(out)
    }
}
