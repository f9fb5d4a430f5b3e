//! Rolling-origin experiment engine: for every forecast origin it builds the
//! as-of snapshot, applies every requested correction method, forecasts,
//! scores against validation counts, and aggregates. All randomness is keyed
//! by (seed, origin, method), so results are identical for any worker count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::combine::{ensemble_stack, rubin_combine};
use crate::correct::{exclude, impute, offsets, rescale, CorrectedSeries, CorrectedWeek};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, rank_best, EvalRecord, Metric};
use crate::factors::{
    estimate_lag, estimate_local, estimate_model, estimate_proxy, fit_proxy_model, fixed_factors,
    FactorTable, WeightSchedule,
};
use crate::forecast::{fit_arma_with_c, forecast_arma, ForecastDistribution};
use crate::glm::Family;
use crate::rng::derive_key;
use crate::simulate::{draw_proxies, draw_validation, thin_reports, ScenarioConfig};
use crate::triangle::{ReportingTriangle, Season, Snapshot};

/// Where a correction method gets its reporting factors.
#[derive(Debug, Clone)]
pub enum FactorSpec {
    /// Pooled lag-based ratios from recent complete seasons.
    Lag,
    /// Model-based regression factors.
    Model,
    /// Current-season local window of width `k`.
    Local { k: u32 },
    /// Proxy-shrinkage nowcast with the given weight schedule.
    Proxy { weights: WeightSchedule },
    /// A fixed assumed profile.
    Fixed { profile: Vec<f64> },
}

impl FactorSpec {
    fn name(&self) -> String {
        match self {
            FactorSpec::Lag => "lag".into(),
            FactorSpec::Model => "model".into(),
            FactorSpec::Local { k } => format!("local_k{k}"),
            FactorSpec::Proxy { .. } => "proxy".into(),
            FactorSpec::Fixed { .. } => "fixed".into(),
        }
    }
}

/// One entry of the method roster.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    /// Latest reported counts, no correction.
    Uncorrected,
    /// Finalized counts everywhere (the oracle baseline).
    Validation,
    Rescale(FactorSpec),
    Offset(FactorSpec),
    Impute(FactorSpec),
    /// Drop the `m` most recent weeks and forecast across the gap.
    Exclude(u32),
}

impl MethodSpec {
    /// Parse a roster entry such as `rescale_lag`, `impute_local_k15`,
    /// `offset_model`, `rescale_proxy`, or `exclude_2`.
    pub fn parse(s: &str) -> Result<MethodSpec> {
        let parse_factor = |f: &str| -> Result<FactorSpec> {
            if f == "lag" {
                Ok(FactorSpec::Lag)
            } else if f == "model" {
                Ok(FactorSpec::Model)
            } else if f == "proxy" {
                Ok(FactorSpec::Proxy {
                    weights: WeightSchedule::Reciprocal { omega: 1.0 },
                })
            } else if let Some(k) = f.strip_prefix("local_k") {
                Ok(FactorSpec::Local {
                    k: k.parse()
                        .map_err(|_| Error::invalid(format!("bad window width in {f:?}")))?,
                })
            } else {
                Err(Error::invalid(format!("unknown factor source {f:?}")))
            }
        };
        if s == "uncorrected" {
            Ok(MethodSpec::Uncorrected)
        } else if s == "validation" {
            Ok(MethodSpec::Validation)
        } else if let Some(f) = s.strip_prefix("rescale_") {
            Ok(MethodSpec::Rescale(parse_factor(f)?))
        } else if let Some(f) = s.strip_prefix("offset_") {
            Ok(MethodSpec::Offset(parse_factor(f)?))
        } else if let Some(f) = s.strip_prefix("impute_") {
            Ok(MethodSpec::Impute(parse_factor(f)?))
        } else if let Some(m) = s.strip_prefix("exclude_") {
            Ok(MethodSpec::Exclude(m.parse().map_err(|_| {
                Error::invalid(format!("bad exclusion count in {s:?}"))
            })?))
        } else {
            Err(Error::invalid(format!("unknown method {s:?}")))
        }
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::Uncorrected => "uncorrected".into(),
            MethodSpec::Validation => "validation".into(),
            MethodSpec::Rescale(f) => format!("rescale_{}", f.name()),
            MethodSpec::Offset(f) => format!("offset_{}", f.name()),
            MethodSpec::Impute(f) => format!("impute_{}", f.name()),
            MethodSpec::Exclude(m) => format!("exclude_{m}"),
        }
    }
}

/// Experiment configuration shared by all origins.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub methods: Vec<MethodSpec>,
    pub horizons: Vec<u32>,
    /// Number of imputations for `MethodSpec::Impute`.
    pub m_imputations: usize,
    pub n_draws: usize,
    pub seed: u64,
    /// Lag beyond which reporting is treated as complete.
    pub tau: u32,
    /// Seasons pooled by the lag-based estimator.
    pub lookback_seasons: usize,
    pub arma_p: usize,
    pub arma_q: usize,
    /// Continuity constant for the log transform.
    pub continuity: f64,
    /// Also emit an equal-weight ensemble of all non-baseline methods.
    pub ensemble: bool,
    /// Complete seasons required before the first origin.
    pub min_history_seasons: usize,
    /// Restrict origins to this inclusive week range within each season.
    pub origin_weeks: Option<(u32, u32)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            methods: vec![
                MethodSpec::Rescale(FactorSpec::Lag),
                MethodSpec::Offset(FactorSpec::Lag),
                MethodSpec::Impute(FactorSpec::Lag),
            ],
            horizons: vec![0, 1, 4],
            m_imputations: 10,
            n_draws: 2500,
            seed: 0,
            tau: 5,
            lookback_seasons: 2,
            arma_p: 2,
            arma_q: 2,
            continuity: 1.0,
            ensemble: false,
            min_history_seasons: 2,
            origin_weeks: None,
        }
    }
}

/// Everything a rolling run produces.
#[derive(Debug, Clone, Default)]
pub struct RollingOutput {
    /// `(method, distribution)` per origin in deterministic order.
    pub forecasts: Vec<(String, ForecastDistribution)>,
    pub metrics: Vec<EvalRecord>,
    /// Per-cell failures, never silently imputed.
    pub failures: Vec<String>,
}

/// Name used for the ensemble pseudo-method.
pub const ENSEMBLE_NAME: &str = "ensemble";

fn history_triangle(tri: &ReportingTriangle, before: Season) -> Result<ReportingTriangle> {
    let seasons: Vec<Season> = tri
        .season_ids()
        .iter()
        .copied()
        .filter(|&s| s < before)
        .collect();
    let mut hist = ReportingTriangle::new(
        seasons.clone(),
        tri.weeks_per_season(),
        tri.max_lag(),
        tri.count_mode(),
    )?;
    for (s, t, d, c) in tri.count_cells() {
        if s < before {
            hist.set_count(s, t, d, c)?;
        }
    }
    for (s, t, v) in tri.validation_cells() {
        if s < before {
            hist.set_validation(s, t, v)?;
        }
    }
    Ok(hist)
}

fn validation_series(
    tri: &ReportingTriangle,
    s_star: Season,
    t_star: u32,
) -> Result<CorrectedSeries> {
    let mut weeks = Vec::new();
    for &s in tri.season_ids() {
        if s > s_star {
            break;
        }
        let top = if s == s_star {
            t_star
        } else {
            tri.weeks_per_season()
        };
        for t in 1..=top {
            weeks.push(CorrectedWeek {
                season: s,
                week: t,
                value: tri.require_validation(s, t)?,
                log_offset: 0.0,
                finalized: true,
            });
        }
    }
    Ok(CorrectedSeries {
        weeks,
        origin: (s_star, t_star),
        excluded: 0,
        weeks_per_season: tri.weeks_per_season(),
    })
}

fn unit_factors() -> FactorTable {
    fixed_factors(&[1.0]).expect("unit profile is valid")
}

fn factor_table(
    hist: &ReportingTriangle,
    snap: &Snapshot,
    spec: &FactorSpec,
    proxies: Option<&BTreeMap<(Season, u32), f64>>,
    config: &PipelineConfig,
) -> Result<FactorTable> {
    let tau = config.tau.min(hist.max_lag());
    match spec {
        FactorSpec::Lag => estimate_lag(hist, tau, config.lookback_seasons),
        FactorSpec::Model => Ok(estimate_model(
            hist,
            &hist.season_ids().to_vec(),
            snap,
            3,
            Family::Poisson,
        )?
        .table),
        FactorSpec::Local { k } => Ok(estimate_local(snap, *k, tau)?.table),
        FactorSpec::Proxy { weights } => {
            let proxies = proxies
                .ok_or_else(|| Error::Factor("proxy method needs a proxy stream".into()))?;
            let mut pairs = Vec::new();
            for &s in hist.season_ids() {
                for t in 1..=hist.weeks_per_season() {
                    if let (Some(&p), Some(v)) = (proxies.get(&(s, t)), hist.validation(s, t)) {
                        pairs.push((p, v));
                    }
                }
            }
            let model = fit_proxy_model(&pairs)?;
            estimate_proxy(snap, &model, *weights, tau)
        }
        FactorSpec::Fixed { profile } => fixed_factors(profile),
    }
}

fn arma_forecasts(
    series: &CorrectedSeries,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<ForecastDistribution>> {
    let model = fit_arma_with_c(series, config.arma_p, config.arma_q, config.continuity)?;
    forecast_arma(&model, &config.horizons, config.n_draws, seed)
}

fn method_forecasts(
    tri: &ReportingTriangle,
    snap: &Snapshot,
    hist: &ReportingTriangle,
    proxies: Option<&BTreeMap<(Season, u32), f64>>,
    method: &MethodSpec,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<ForecastDistribution>> {
    let (s_star, t_star) = snap.origin();
    match method {
        MethodSpec::Validation => {
            let series = validation_series(tri, s_star, t_star)?;
            arma_forecasts(&series, config, seed)
        }
        MethodSpec::Uncorrected => {
            let series = rescale(snap, &unit_factors())?;
            arma_forecasts(&series, config, seed)
        }
        MethodSpec::Rescale(f) => {
            let table = factor_table(hist, snap, f, proxies, config)?;
            let series = rescale(snap, &table)?;
            arma_forecasts(&series, config, seed)
        }
        MethodSpec::Offset(f) => {
            let table = factor_table(hist, snap, f, proxies, config)?;
            let series = offsets(snap, &table)?;
            arma_forecasts(&series, config, seed)
        }
        MethodSpec::Exclude(m) => {
            let dropped = exclude(snap, *m)?;
            let series = rescale(&dropped, &unit_factors())?;
            arma_forecasts(&series, config, seed)
        }
        MethodSpec::Impute(f) => {
            let table = factor_table(hist, snap, f, proxies, config)?;
            let set = impute(snap, &table, config.m_imputations, seed)?;
            let c = config.continuity;
            let mut models = Vec::with_capacity(set.series.len());
            for series in &set.series {
                models.push((
                    fit_arma_with_c(series, config.arma_p, config.arma_q, c)?,
                    series,
                ));
            }
            let mut out = Vec::with_capacity(config.horizons.len());
            for &h in &config.horizons {
                let target =
                    crate::forecast::advance_target((s_star, t_star), h, tri.weeks_per_season());
                let pairs: Vec<(f64, f64)> = models
                    .iter()
                    .map(|(model, series)| {
                        let steps = series.steps_for_horizon(h);
                        if steps == 0 {
                            let v = series.values().last().copied().unwrap_or(0.0);
                            ((v + c).ln(), 0.0)
                        } else {
                            model.predictive(steps)
                        }
                    })
                    .collect();
                let (_, dist) =
                    rubin_combine(&pairs, target, h, c, config.n_draws, derive_key(seed, &[h as u64]))?;
                out.push(dist);
            }
            Ok(out)
        }
    }
}

fn origin_results(
    tri: &ReportingTriangle,
    proxies: Option<&BTreeMap<(Season, u32), f64>>,
    config: &PipelineConfig,
    roster: &[MethodSpec],
    s_star: Season,
    t_star: u32,
) -> RollingOutput {
    let mut out = RollingOutput::default();
    let origin_tag = format!("season {s_star} week {t_star}");
    let snap = match tri.snapshot(s_star, t_star) {
        Ok(s) => match proxies {
            Some(p) => s.with_proxies(p.clone()),
            None => s,
        },
        Err(e) => {
            out.failures.push(format!("{origin_tag}: snapshot failed: {e}"));
            return out;
        }
    };
    let hist = match history_triangle(tri, s_star) {
        Ok(h) => h,
        Err(e) => {
            out.failures.push(format!("{origin_tag}: history failed: {e}"));
            return out;
        }
    };
    let mut member_dists: Vec<Vec<ForecastDistribution>> = Vec::new();
    for (mi, method) in roster.iter().enumerate() {
        let name = method.name();
        let seed = derive_key(
            config.seed,
            &[0x4f52_4947, s_star as u64, t_star as u64, mi as u64],
        );
        match method_forecasts(tri, &snap, &hist, proxies, method, config, seed) {
            Ok(dists) => {
                // Ensemble membership: everything except the validation
                // baseline and deep (4+ week) exclusion variants.
                let member = !matches!(method, MethodSpec::Validation)
                    && !matches!(method, MethodSpec::Exclude(m) if *m >= 4);
                if config.ensemble && member {
                    member_dists.push(dists.clone());
                }
                for d in dists {
                    score_and_push(tri, &name, d, &mut out);
                }
            }
            Err(e) => out.failures.push(format!("{origin_tag} {name}: {e}")),
        }
    }
    if config.ensemble && member_dists.len() >= 2 {
        for (hi, &h) in config.horizons.iter().enumerate() {
            let members: Vec<ForecastDistribution> = member_dists
                .iter()
                .map(|dists| dists[hi].clone())
                .collect();
            match ensemble_stack(&members, config.n_draws) {
                Ok(d) => {
                    debug_assert_eq!(d.horizon, h);
                    score_and_push(tri, ENSEMBLE_NAME, d, &mut out);
                }
                Err(e) => out
                    .failures
                    .push(format!("{origin_tag} {ENSEMBLE_NAME} h{h}: {e}")),
            }
        }
    }
    out
}

fn score_and_push(
    tri: &ReportingTriangle,
    method: &str,
    dist: ForecastDistribution,
    out: &mut RollingOutput,
) {
    let (s, t) = dist.target;
    match tri.validation(s, t) {
        Some(y) => match evaluate(method, &dist, y) {
            Ok(rec) => {
                out.metrics.push(rec);
                out.forecasts.push((method.to_string(), dist));
            }
            Err(e) => out
                .failures
                .push(format!("scoring {method} season {s} week {t}: {e}")),
        },
        None => {
            // Keep the forecast; the target is past the end of the data.
            out.forecasts.push((method.to_string(), dist));
        }
    }
}

/// Run the rolling-origin protocol over every origin with at least
/// `min_history_seasons` complete prior seasons. The uncorrected and
/// validation baselines are always included. Origins run in parallel;
/// the output order is deterministic.
pub fn run_rolling(
    tri: &ReportingTriangle,
    proxies: Option<&BTreeMap<(Season, u32), f64>>,
    config: &PipelineConfig,
) -> Result<RollingOutput> {
    if tri.season_ids().len() <= config.min_history_seasons {
        return Err(Error::invalid(format!(
            "need more than {} seasons of data",
            config.min_history_seasons
        )));
    }
    let mut roster: Vec<MethodSpec> = vec![MethodSpec::Uncorrected, MethodSpec::Validation];
    for m in &config.methods {
        if !matches!(m, MethodSpec::Uncorrected | MethodSpec::Validation) {
            roster.push(m.clone());
        }
    }
    let (w_lo, w_hi) = config
        .origin_weeks
        .unwrap_or((1, tri.weeks_per_season()));
    let mut origins = Vec::new();
    for &s in tri.season_ids().iter().skip(config.min_history_seasons) {
        for t in w_lo..=w_hi.min(tri.weeks_per_season()) {
            origins.push((s, t));
        }
    }
    let results: Vec<RollingOutput> = origins
        .par_iter()
        .map(|&(s, t)| origin_results(tri, proxies, config, &roster, s, t))
        .collect();
    let mut combined = RollingOutput::default();
    for r in results {
        combined.forecasts.extend(r.forecasts);
        combined.metrics.extend(r.metrics);
        combined.failures.extend(r.failures);
    }
    Ok(combined)
}

/// Aggregate metrics per method and horizon (the tabular analogue of the
/// headline figures).
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: String,
    pub horizon: u32,
    pub n: usize,
    pub mae: f64,
    pub mean_wis: f64,
    pub cov50: f64,
    pub cov67: f64,
    pub cov95: f64,
    pub cov99: f64,
    /// Share of complete origins on which the method minimizes WIS.
    pub prop_best_wis: f64,
}

pub fn summarize(metrics: &[EvalRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, u32), Vec<&EvalRecord>> = BTreeMap::new();
    for r in metrics {
        groups
            .entry((r.method.clone(), r.horizon))
            .or_default()
            .push(r);
    }
    // Best-method shares per horizon over origins where every method scored.
    let mut best_share: BTreeMap<(String, u32), f64> = BTreeMap::new();
    let mut horizons: Vec<u32> = metrics.iter().map(|r| r.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    for &h in &horizons {
        let methods: std::collections::BTreeSet<&str> = metrics
            .iter()
            .filter(|r| r.horizon == h)
            .map(|r| r.method.as_str())
            .collect();
        let mut by_origin: BTreeMap<(Season, u32), Vec<&EvalRecord>> = BTreeMap::new();
        for r in metrics.iter().filter(|r| r.horizon == h) {
            by_origin.entry((r.season, r.week)).or_default().push(r);
        }
        let complete: Vec<EvalRecord> = by_origin
            .values()
            .filter(|g| g.len() == methods.len())
            .flat_map(|g| g.iter().map(|r| (*r).clone()))
            .collect();
        if !complete.is_empty() {
            if let Ok(shares) = rank_best(&complete, Metric::Wis) {
                for (m, v) in shares {
                    best_share.insert((m, h), v);
                }
            }
        }
    }
    groups
        .into_iter()
        .map(|((method, horizon), rs)| {
            let n = rs.len();
            let nf = n as f64;
            let frac = |f: fn(&EvalRecord) -> bool| rs.iter().filter(|r| f(r)).count() as f64 / nf;
            SummaryRow {
                prop_best_wis: best_share
                    .get(&(method.clone(), horizon))
                    .copied()
                    .unwrap_or(0.0),
                method,
                horizon,
                n,
                mae: rs.iter().map(|r| r.abs_error).sum::<f64>() / nf,
                mean_wis: rs.iter().map(|r| r.wis).sum::<f64>() / nf,
                cov50: frac(|r| r.covered50),
                cov67: frac(|r| r.covered67),
                cov95: frac(|r| r.covered95),
                cov99: frac(|r| r.covered99),
            }
        })
        .collect()
}

/// One simulated replicate: validation counts, thinned reports, proxies.
pub struct Replicate {
    pub index: u32,
    pub triangle: ReportingTriangle,
    pub validation: BTreeMap<(Season, u32), f64>,
    pub proxies: Vec<(f64, BTreeMap<(Season, u32), f64>)>,
}

/// Generate replicate `index` of a scenario from a reference series.
pub fn make_replicate(
    reference: &BTreeMap<(Season, u32), f64>,
    scenario: &ScenarioConfig,
    index: u32,
) -> Result<Replicate> {
    let (theta, _) = crate::simulate::build_theta(reference)?;
    let rep_seed = derive_key(scenario.seed, &[0x5245_504c, index as u64]);
    let validation = draw_validation(&theta, scenario.r, rep_seed);
    let triangle = thin_reports(&validation, scenario, derive_key(rep_seed, &[1]))?;
    let proxies = draw_proxies(&validation, &scenario.proxy_sigma2, derive_key(rep_seed, &[2]));
    Ok(Replicate {
        index,
        triangle,
        validation,
        proxies,
    })
}

/// Run a scenario over all replicates in parallel. `proxy_sigma2` selects
/// which proxy stream the proxy method sees (None: the first, if any).
pub fn run_replicates(
    reference: &BTreeMap<(Season, u32), f64>,
    scenario: &ScenarioConfig,
    config: &PipelineConfig,
    proxy_sigma2: Option<f64>,
) -> Result<Vec<(u32, RollingOutput)>> {
    let indices: Vec<u32> = (0..scenario.replicates).collect();
    let results: Result<Vec<(u32, RollingOutput)>> = indices
        .par_iter()
        .map(|&i| {
            let rep = make_replicate(reference, scenario, i)?;
            let proxies = match proxy_sigma2 {
                Some(s2) => rep
                    .proxies
                    .iter()
                    .find(|(s, _)| (*s - s2).abs() < 1e-12)
                    .map(|(_, m)| m),
                None => rep.proxies.first().map(|(_, m)| m),
            };
            let mut cfg = config.clone();
            cfg.seed = derive_key(config.seed, &[0x5250_4c53, i as u64]);
            let out = run_rolling(&rep.triangle, proxies, &cfg)?;
            Ok((i, out))
        })
        .collect();
    let mut results = results?;
    results.sort_by_key(|(i, _)| *i);
    Ok(results)
}

/// A cell of the sensitivity grid: coverage of 1-week 95% intervals when the
/// truth uses `true_a` but the correction assumes `assumed_a`.
#[derive(Debug, Clone)]
pub struct SensitivityCell {
    pub true_a: f64,
    pub assumed_a: f64,
    pub coverage95: f64,
    pub n: usize,
}

/// Fig.-5-style grid: rescaling with a fixed assumed profile against data
/// generated under each true profile.
pub fn run_sensitivity(
    reference: &BTreeMap<(Season, u32), f64>,
    scenario: &ScenarioConfig,
    config: &PipelineConfig,
    true_a: &[f64],
    assumed_a: &[f64],
) -> Result<Vec<SensitivityCell>> {
    let cells: Result<Vec<Vec<SensitivityCell>>> = true_a
        .par_iter()
        .enumerate()
        .map(|(ai, &ta)| {
            let mut scen = scenario.clone();
            scen.a = ta;
            scen.seed = derive_key(scenario.seed, &[0x5345_4e53, ai as u64]);
            let mut counts: Vec<(usize, usize)> = vec![(0, 0); assumed_a.len()];
            for repl in 0..scen.replicates {
                let rep = make_replicate(reference, &scen, repl)?;
                let mut cfg = config.clone();
                cfg.horizons = vec![1];
                cfg.methods = assumed_a
                    .iter()
                    .map(|&aa| {
                        MethodSpec::Rescale(FactorSpec::Fixed {
                            profile: crate::simulate::profile_for(aa).unwrap().pi,
                        })
                    })
                    .collect();
                cfg.ensemble = false;
                cfg.seed = derive_key(scen.seed, &[repl as u64]);
                let out = run_rolling(&rep.triangle, None, &cfg)?;
                // Method roster order: uncorrected, validation, then one
                // rescale_fixed per assumed a. Those share a name, so count
                // by matching forecasts in roster order per origin.
                let mut per_origin: BTreeMap<(Season, u32), Vec<&EvalRecord>> = BTreeMap::new();
                for r in out.metrics.iter().filter(|r| r.method == "rescale_fixed") {
                    per_origin.entry((r.season, r.week)).or_default().push(r);
                }
                for group in per_origin.values() {
                    if group.len() != assumed_a.len() {
                        continue; // a cell failed; skip the origin entirely
                    }
                    for (j, r) in group.iter().enumerate() {
                        counts[j].1 += 1;
                        if r.covered95 {
                            counts[j].0 += 1;
                        }
                    }
                }
            }
            Ok(assumed_a
                .iter()
                .enumerate()
                .map(|(j, &aa)| SensitivityCell {
                    true_a: ta,
                    assumed_a: aa,
                    coverage95: counts[j].0 as f64 / counts[j].1.max(1) as f64,
                    n: counts[j].1,
                })
                .collect())
        })
        .collect();
    Ok(cells?.into_iter().flatten().collect())
}
