//! Combining forecasts across imputed datasets (Rubin's rules) and across
//! methods (equal-weight stacking of predictive draws).

use rand::distributions::Distribution;
use statrs::distribution::{Normal, StudentsT};

use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;
use crate::rng::stream;
use crate::triangle::Season;

/// Stream tag separating Rubin-pooled draws from other random consumers.
const TAG_RUBIN: u64 = 0x5255_4249;

/// Rubin's combining quantities for one target, on the log scale.
#[derive(Debug, Clone)]
pub struct RubinSummary {
    pub m: usize,
    /// Per-imputation point estimates.
    pub q: Vec<f64>,
    /// Per-imputation within variances.
    pub w: Vec<f64>,
    pub q_bar: f64,
    pub w_bar: f64,
    /// Between-imputation variance (sample variance of the `q`).
    pub between: f64,
    /// Total variance `W-bar + (1 + 1/M) B`.
    pub total: f64,
    /// Small-sample degrees of freedom; infinite when `B = 0`.
    pub df: f64,
}

/// Combine per-imputation `(q_m, W_m)` pairs.
pub fn rubin_summary(per_imputation: &[(f64, f64)]) -> Result<RubinSummary> {
    let m = per_imputation.len();
    if m < 2 {
        return Err(Error::invalid("Rubin combining needs M >= 2 imputations"));
    }
    if per_imputation.iter().any(|&(_, w)| w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("within variances must be finite and >= 0"));
    }
    let q: Vec<f64> = per_imputation.iter().map(|&(qm, _)| qm).collect();
    let w: Vec<f64> = per_imputation.iter().map(|&(_, wm)| wm).collect();
    let mf = m as f64;
    let q_bar = q.iter().sum::<f64>() / mf;
    let w_bar = w.iter().sum::<f64>() / mf;
    let between = q.iter().map(|v| (v - q_bar).powi(2)).sum::<f64>() / (mf - 1.0);
    let inflated = (1.0 + 1.0 / mf) * between;
    let total = w_bar + inflated;
    let df = if inflated > 0.0 {
        (mf - 1.0) * (1.0 + w_bar / inflated).powi(2)
    } else {
        f64::INFINITY
    };
    Ok(RubinSummary {
        m,
        q,
        w,
        q_bar,
        w_bar,
        between,
        total,
        df,
    })
}

/// Full combination: summary plus a back-transformed predictive distribution
/// from a location-scale t on the log scale (`z = log(y + c)`).
pub fn rubin_combine(
    per_imputation: &[(f64, f64)],
    target: (Season, u32),
    horizon: u32,
    c: f64,
    n_draws: usize,
    seed: u64,
) -> Result<(RubinSummary, ForecastDistribution)> {
    let summary = rubin_summary(per_imputation)?;
    let scale = summary.total.max(0.0).sqrt();
    let mut rng = stream(seed, &[TAG_RUBIN, horizon as u64]);
    let draws: Vec<f64> = if scale == 0.0 {
        vec![(summary.q_bar.exp() - c).max(0.0); n_draws.max(1)]
    } else if summary.df.is_finite() {
        let t = StudentsT::new(0.0, 1.0, summary.df.max(2.5))
            .map_err(|e| Error::invalid(format!("bad Rubin df: {e}")))?;
        (0..n_draws.max(1))
            .map(|_| {
                let z = summary.q_bar + scale * t.sample(&mut rng);
                (z.exp() - c).max(0.0)
            })
            .collect()
    } else {
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n_draws.max(1))
            .map(|_| {
                let z = summary.q_bar + scale * normal.sample(&mut rng);
                (z.exp() - c).max(0.0)
            })
            .collect()
    };
    let dist = ForecastDistribution::from_draws(target, horizon, draws)?;
    Ok((summary, dist))
}

/// Equal-weight ensemble: pool `draws_per_method` draws from each member.
pub fn ensemble_stack(
    dists: &[ForecastDistribution],
    draws_per_method: usize,
) -> Result<ForecastDistribution> {
    if dists.is_empty() {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    if draws_per_method == 0 {
        return Err(Error::invalid("draws_per_method must be positive"));
    }
    let target = dists[0].target;
    let horizon = dists[0].horizon;
    let mut pooled = Vec::with_capacity(dists.len() * draws_per_method);
    for d in dists {
        if d.target != target || d.horizon != horizon {
            return Err(Error::invalid(format!(
                "ensemble members target different weeks: {:?} h{} vs {:?} h{}",
                target, horizon, d.target, d.horizon
            )));
        }
        if d.draws.len() < draws_per_method {
            return Err(Error::invalid(format!(
                "member has {} draws, need {draws_per_method}",
                d.draws.len()
            )));
        }
        pooled.extend_from_slice(&d.draws[..draws_per_method]);
    }
    ForecastDistribution::from_draws(target, horizon, pooled)
}
