//! Inverse reporting factor estimation.
//!
//! The inverse reporting factor `pi_ts(d)` is the expected fraction of a
//! week's validation count that has been reported by lag `d`. This module
//! estimates it five ways: pooled over past seasons by lag, via count
//! regression on past validation data, "locally" from the current season's
//! own revision history, by shrinking toward an external proxy nowcast, or
//! as a fixed assumed profile for sensitivity analysis.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::glm::{fit_glm, predict_mean, DesignMatrix, Family, NaturalSpline};
use crate::triangle::{ReportingTriangle, Season, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMethod {
    Lag,
    Model,
    Local,
    Proxy,
    Fixed,
}

impl FactorMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FactorMethod::Lag => "lag",
            FactorMethod::Model => "model",
            FactorMethod::Local => "local",
            FactorMethod::Proxy => "proxy",
            FactorMethod::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    /// One factor per lag, constant in (season, week). Index d in 0..=threshold.
    ByLag(Vec<f64>),
    /// Cell-specific factors.
    ByCell(BTreeMap<(Season, u32, u32), f64>),
}

/// Estimated inverse reporting factors `pi_hat_ts(d)`.
///
/// `get` returns 1 for any lag beyond the table's threshold; every stored
/// entry is strictly positive by construction.
#[derive(Debug, Clone)]
pub struct FactorTable {
    threshold: u32,
    method: FactorMethod,
    repr: Repr,
}

impl FactorTable {
    pub fn by_lag(pi: Vec<f64>, method: FactorMethod) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::Factor("empty factor profile".into()));
        }
        for (d, &v) in pi.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Factor(format!("pi({d}) = {v} must be positive")));
            }
        }
        Ok(Self {
            threshold: (pi.len() - 1) as u32,
            method,
            repr: Repr::ByLag(pi),
        })
    }

    pub fn by_cell(
        cells: BTreeMap<(Season, u32, u32), f64>,
        threshold: u32,
        method: FactorMethod,
    ) -> Result<Self> {
        for (&(s, t, d), &v) in &cells {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Factor(format!(
                    "pi({s},{t},{d}) = {v} must be positive"
                )));
            }
            if d > threshold {
                return Err(Error::Factor(format!(
                    "cell lag {d} beyond threshold {threshold}"
                )));
            }
        }
        Ok(Self {
            threshold,
            method,
            repr: Repr::ByCell(cells),
        })
    }

    pub fn method(&self) -> FactorMethod {
        self.method
    }

    /// Lag beyond which the factor is 1.
    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn get(&self, season: Season, week: u32, lag: u32) -> Result<f64> {
        if lag > self.threshold {
            return Ok(1.0);
        }
        match &self.repr {
            Repr::ByLag(pi) => Ok(pi[lag as usize]),
            Repr::ByCell(cells) => cells
                .get(&(season, week, lag))
                .copied()
                .ok_or(Error::MissingFactor { season, week, lag }),
        }
    }

    /// Cell-level view for CSV export: the factor at each requested cell.
    pub fn expand<'a>(
        &'a self,
        cells: impl Iterator<Item = (Season, u32, u32)> + 'a,
    ) -> impl Iterator<Item = Result<(Season, u32, u32, f64)>> + 'a {
        cells.map(move |(s, t, d)| self.get(s, t, d).map(|v| (s, t, d, v)))
    }
}

/// A factor table plus any per-lag fallbacks taken during estimation.
#[derive(Debug, Clone)]
pub struct FactorEstimate {
    pub table: FactorTable,
    pub warnings: Vec<String>,
}

/// Pooled lag-based estimate: `pi_hat(d) = sum N_ij(d) / sum N_ij(inf)` over
/// the most recent `lookback_seasons` seasons with both real-time and
/// validation data, constant in week and season.
pub fn estimate_lag(
    history: &ReportingTriangle,
    tau: u32,
    lookback_seasons: usize,
) -> Result<FactorTable> {
    if lookback_seasons == 0 {
        return Err(Error::Factor("lookback must cover at least one season".into()));
    }
    let seasons: Vec<Season> = history
        .season_ids()
        .iter()
        .rev()
        .take(lookback_seasons)
        .copied()
        .collect();
    let mut pi = Vec::with_capacity(tau as usize + 1);
    for d in 0..=tau {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut seen = false;
        for &s in &seasons {
            for t in 1..=history.weeks_per_season() {
                if let (Some(nd), Some(ninf)) = (history.count(s, t, d), history.validation(s, t)) {
                    num += nd;
                    den += ninf;
                    seen = true;
                }
            }
        }
        if !seen {
            return Err(Error::Factor(format!(
                "no (season, week) pair with both N({d}) and validation observed"
            )));
        }
        if den <= 0.0 {
            return Err(Error::Factor(format!(
                "zero validation total at lag {d}; lag-based factor undefined"
            )));
        }
        let p = num / den;
        if !(p > 0.0) {
            return Err(Error::Factor(format!(
                "estimated pi({d}) = {p}; zero factors break rescaling and offsets"
            )));
        }
        pi.push(p);
    }
    FactorTable::by_lag(pi, FactorMethod::Lag)
}

/// Model-based factors together with the fitted validation predictions and
/// any zero-count training rows dropped from the fit.
#[derive(Debug, Clone)]
pub struct ModelFactors {
    pub table: FactorTable,
    /// Predicted validation counts `f(N(d); X)` for the corrected cells.
    pub predicted_validation: BTreeMap<(Season, u32), f64>,
    /// Training cells dropped because `N(d) = 0` (log offset undefined).
    pub dropped: Vec<(Season, u32, u32)>,
}

/// Model-based estimate: regress validation counts on lag, a season trend,
/// and a natural spline of week, with `log N(d)` as a fixed offset; then
/// `pi_hat_ts(d) = N_ts(d) / f(N_ts(d))` at the snapshot's unfinalized cells.
///
/// Season enters as a numeric trend so the fit extrapolates to the current
/// (unseen) season.
pub fn estimate_model(
    history: &ReportingTriangle,
    train_seasons: &[Season],
    snap: &Snapshot,
    spline_df: usize,
    family: Family,
) -> Result<ModelFactors> {
    let tau = history.max_lag();
    let mut rows: Vec<(Season, u32, u32, f64, f64)> = Vec::new(); // (s, t, d, n_d, n_inf)
    let mut dropped = Vec::new();
    for &s in train_seasons {
        for t in 1..=history.weeks_per_season() {
            let Some(ninf) = history.validation(s, t) else {
                continue;
            };
            for d in 0..=tau {
                let Some(nd) = history.count(s, t, d) else {
                    continue;
                };
                if nd <= 0.0 {
                    dropped.push((s, t, d));
                    continue;
                }
                rows.push((s, t, d, nd, ninf));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Factor("no usable training rows for model-based factors".into()));
    }
    let weeks: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
    let spline = NaturalSpline::fit(&weeks, spline_df)?;

    let build_design = |cells: &[(Season, u32, u32, f64)]| -> Result<DesignMatrix> {
        let n = cells.len();
        let p = 1 + tau as usize + 1 + spline_df; // intercept, lag dummies, season, spline
        let mut x = DMatrix::zeros(n, p);
        let xs: Vec<f64> = cells.iter().map(|c| c.1 as f64).collect();
        let basis = spline.basis(&xs);
        for (i, &(s, _t, d, _nd)) in cells.iter().enumerate() {
            x[(i, 0)] = 1.0;
            if d > 0 {
                x[(i, d as usize)] = 1.0;
            }
            x[(i, tau as usize + 1)] = s as f64;
            for j in 0..spline_df {
                x[(i, tau as usize + 2 + j)] = basis[(i, j)];
            }
        }
        let mut names = vec!["intercept".to_string()];
        for d in 1..=tau {
            names.push(format!("lag{d}"));
        }
        names.push("season".into());
        for j in 0..spline_df {
            names.push(format!("week_s{j}"));
        }
        let offset: Vec<f64> = cells.iter().map(|c| c.3.ln()).collect();
        DesignMatrix::new(names, x, Some(offset))
    };

    let train_cells: Vec<(Season, u32, u32, f64)> =
        rows.iter().map(|&(s, t, d, nd, _)| (s, t, d, nd)).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.4).collect();
    let design = build_design(&train_cells)?;
    let fit = fit_glm(&design, &y, family)?;

    // Predict at the snapshot's unfinalized current-season cells.
    let (s_star, _) = snap.origin();
    let targets: Vec<(Season, u32, u32, f64)> = snap
        .current_season()
        .iter()
        .filter(|e| !e.finalized && e.value > 0.0)
        .map(|e| (s_star, e.week, e.lag_used, e.value))
        .collect();
    let mut cells = BTreeMap::new();
    let mut predicted = BTreeMap::new();
    if !targets.is_empty() {
        let target_design = build_design(&targets)?;
        let f = predict_mean(&fit, &target_design)?;
        for (i, &(s, t, d, nd)) in targets.iter().enumerate() {
            let fhat = f[i];
            if !(fhat > 0.0) {
                return Err(Error::Factor(format!(
                    "model predicted non-positive validation count {fhat} at ({s},{t},{d})"
                )));
            }
            cells.insert((s, t, d), nd / fhat);
            predicted.insert((s, t), fhat);
        }
    }
    let table = FactorTable::by_cell(cells, tau, FactorMethod::Model)?;
    Ok(ModelFactors {
        table,
        predicted_validation: predicted,
        dropped,
    })
}

/// "Local" estimate from the current season's own revision history:
/// `pi_hat(d) = sum_{i=t-K}^{t-d-1} N_i(d) / sum N_i(t-i)`, with the factor
/// fixed at 1 beyond `min(K, tau)`. Conservative (biased toward 1) under
/// monotone reporting.
pub fn estimate_local(snap: &Snapshot, k: u32, tau: u32) -> Result<FactorEstimate> {
    if k == 0 {
        return Err(Error::Factor("local window K must be >= 1".into()));
    }
    let (_, t) = snap.origin();
    let d_top = k.min(tau);
    let mut pi = Vec::with_capacity(d_top as usize + 1);
    let mut warnings = Vec::new();
    for d in 0..=d_top {
        let lo = t.saturating_sub(k).max(1);
        let hi_signed = t as i64 - d as i64 - 1;
        if hi_signed < lo as i64 {
            warnings.push(format!("empty window for lag {d}; using pi({d}) = 1"));
            pi.push(1.0);
            continue;
        }
        let hi = hi_signed as u32;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in lo..=hi {
            let nd = snap.visible_count(i, d).ok_or(Error::MissingCell {
                season: snap.origin().0,
                week: i,
                lag: d,
            })?;
            let latest = snap.latest_count(i).ok_or(Error::MissingCell {
                season: snap.origin().0,
                week: i,
                lag: t - i,
            })?;
            num += nd;
            den += latest;
        }
        if den <= 0.0 {
            return Err(Error::Factor(format!(
                "zero denominator in local estimate at lag {d}"
            )));
        }
        let p = num / den;
        if !(p > 0.0) {
            return Err(Error::Factor(format!(
                "local pi({d}) = {p}; zero factors break downstream corrections"
            )));
        }
        pi.push(p);
    }
    let table = FactorTable::by_lag(pi, FactorMethod::Local)?;
    Ok(FactorEstimate { table, warnings })
}

/// Lag-dependent weight put on the proxy nowcast.
#[derive(Debug, Clone, Copy)]
pub enum WeightSchedule {
    /// `w_d = (omega / (d+1))^2`.
    Squared { omega: f64 },
    /// `w_d = omega / (d+1)`.
    Reciprocal { omega: f64 },
}

impl WeightSchedule {
    pub fn weight(&self, d: u32, tau: u32) -> f64 {
        if d > tau {
            return 0.0;
        }
        let w = match self {
            WeightSchedule::Squared { omega } => (omega / (d as f64 + 1.0)).powi(2),
            WeightSchedule::Reciprocal { omega } => omega / (d as f64 + 1.0),
        };
        w.clamp(0.0, 1.0)
    }
}

/// Log-linear proxy nowcast model: `g(p) = exp(a + b p) - 0.1`, floored at 0.
#[derive(Debug, Clone, Copy)]
pub struct ProxyModel {
    pub intercept: f64,
    pub slope: f64,
}

impl ProxyModel {
    pub fn predict(&self, p: f64) -> f64 {
        ((self.intercept + self.slope * p).exp() - 0.1).max(0.0)
    }
}

/// Fit the proxy nowcast model by regressing `log(N(inf) + 0.1)` on the
/// proxy value over historical pairs.
pub fn fit_proxy_model(pairs: &[(f64, f64)]) -> Result<ProxyModel> {
    if pairs.len() < 10 {
        return Err(Error::Factor(format!(
            "need at least 10 historical (proxy, validation) pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mean_p = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let ys: Vec<f64> = pairs.iter().map(|p| (p.1 + 0.1).ln()).collect();
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, &(p, _)) in pairs.iter().enumerate() {
        sxx += (p - mean_p) * (p - mean_p);
        sxy += (p - mean_p) * (ys[i] - mean_y);
    }
    if sxx < 1e-12 * n {
        return Err(Error::Factor("proxy is (nearly) constant; nowcast model degenerate".into()));
    }
    let slope = sxy / sxx;
    Ok(ProxyModel {
        intercept: mean_y - slope * mean_p,
        slope,
    })
}

/// Proxy-shrinkage estimate: `N_hat(inf) = w_d g(p) + (1 - w_d) N(d)`,
/// `pi_hat = N(d) / N_hat(inf)` at each unfinalized current-season week.
pub fn estimate_proxy(
    snap: &Snapshot,
    model: &ProxyModel,
    weights: WeightSchedule,
    tau: u32,
) -> Result<FactorTable> {
    let (s_star, _) = snap.origin();
    let mut cells = BTreeMap::new();
    for e in snap.current_season() {
        if e.finalized {
            continue;
        }
        let d = e.lag_used;
        let w = weights.weight(d, tau);
        let g = if w > 0.0 {
            let p = snap.proxy(s_star, e.week).ok_or_else(|| {
                Error::Factor(format!(
                    "missing proxy for unfinalized week {} of season {s_star}",
                    e.week
                ))
            })?;
            model.predict(p)
        } else {
            0.0
        };
        let n_hat = w * g + (1.0 - w) * e.value;
        if !(n_hat > 0.0) {
            return Err(Error::Factor(format!(
                "proxy-shrunk validation estimate {n_hat} <= 0 at week {}",
                e.week
            )));
        }
        // pi > 0 requires N(d) > 0; a zero count with a positive proxy
        // yields pi = 0, which downstream corrections cannot use.
        let pi = if e.value > 0.0 { e.value / n_hat } else { 1.0 };
        cells.insert((s_star, e.week, d), pi);
    }
    FactorTable::by_cell(cells, tau, FactorMethod::Proxy)
}

/// Broadcast a fixed assumed profile (sensitivity analysis).
pub fn fixed_factors(profile: &[f64]) -> Result<FactorTable> {
    FactorTable::by_lag(profile.to_vec(), FactorMethod::Fixed)
}
