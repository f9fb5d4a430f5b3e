//! Corrections that turn a snapshot plus a factor table into
//! forecaster-ready inputs: rescaling, log-offsets, multiple imputation from
//! a truncated normal, and exclusion of the most recent weeks.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::factors::FactorTable;
use crate::rng::stream;
use crate::triangle::{Season, Snapshot};

/// Stream tag separating imputation draws from other random consumers.
const TAG_IMPUTE: u64 = 0x494d_5055;

/// One week of the modeling series after correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedWeek {
    pub season: Season,
    pub week: u32,
    /// Estimate of the validation count (or the raw report for the offset method).
    pub value: f64,
    /// Log-scale mean-model offset; 0 except for the offset method's
    /// unfinalized weeks.
    pub log_offset: f64,
    pub finalized: bool,
}

/// The full modeling series: prior seasons' validation data followed by the
/// current season up to the (possibly exclusion-shifted) origin.
#[derive(Debug, Clone)]
pub struct CorrectedSeries {
    pub weeks: Vec<CorrectedWeek>,
    /// The original forecast origin (before any exclusion).
    pub origin: (Season, u32),
    /// Weeks dropped from the end by exclusion; an h-step-ahead forecast from
    /// the series end targets origin week + h - excluded.
    pub excluded: u32,
    /// Season length, used to label forecast targets across season boundaries.
    pub weeks_per_season: u32,
}

impl CorrectedSeries {
    pub fn values(&self) -> Vec<f64> {
        self.weeks.iter().map(|w| w.value).collect()
    }

    pub fn offsets(&self) -> Vec<f64> {
        self.weeks.iter().map(|w| w.log_offset).collect()
    }

    /// Steps ahead from the series end that target origin week + h.
    pub fn steps_for_horizon(&self, h: u32) -> u32 {
        h + self.excluded
    }
}

fn base_series(snap: &Snapshot) -> Vec<CorrectedWeek> {
    let mut weeks = Vec::new();
    for (s, series) in snap.history() {
        for (i, &v) in series.iter().enumerate() {
            weeks.push(CorrectedWeek {
                season: *s,
                week: i as u32 + 1,
                value: v,
                log_offset: 0.0,
                finalized: true,
            });
        }
    }
    weeks
}

/// Rescaling correction: replace each unfinalized week by `N(d) / pi_hat(d)`.
pub fn rescale(snap: &Snapshot, factors: &FactorTable) -> Result<CorrectedSeries> {
    let (s_star, _) = snap.origin();
    let mut weeks = base_series(snap);
    for e in snap.current_season() {
        let value = if e.finalized {
            e.value
        } else {
            let pi = factors.get(s_star, e.week, e.lag_used)?;
            e.value / pi
        };
        weeks.push(CorrectedWeek {
            season: s_star,
            week: e.week,
            value,
            log_offset: 0.0,
            finalized: e.finalized,
        });
    }
    Ok(CorrectedSeries {
        weeks,
        origin: snap.origin(),
        excluded: snap.excluded(),
        weeks_per_season: snap.weeks_per_season(),
    })
}

/// Mean-model offset correction: keep the observed counts and attach
/// `log pi_hat(d)` for the forecaster's log-link mean.
pub fn offsets(snap: &Snapshot, factors: &FactorTable) -> Result<CorrectedSeries> {
    let (s_star, _) = snap.origin();
    let mut weeks = base_series(snap);
    for e in snap.current_season() {
        let log_offset = if e.finalized {
            0.0
        } else {
            factors.get(s_star, e.week, e.lag_used)?.ln()
        };
        weeks.push(CorrectedWeek {
            season: s_star,
            week: e.week,
            value: e.value,
            log_offset,
            finalized: e.finalized,
        });
    }
    Ok(CorrectedSeries {
        weeks,
        origin: snap.origin(),
        excluded: snap.excluded(),
        weeks_per_season: snap.weeks_per_season(),
    })
}

/// Exclusion correction: drop the `m` most recently reported weeks. Forecast
/// horizons stay relative to the original origin (a 1-week forecast after
/// excluding 2 weeks is a 3-step-ahead prediction).
pub fn exclude(snap: &Snapshot, m: u32) -> Result<Snapshot> {
    snap.drop_recent_weeks(m)
}

/// The truncated-normal imputation parameters for one week.
#[derive(Debug, Clone, Copy)]
pub struct ImputeParams {
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Imputation distribution for a week with report `n_d` and factor `pi`:
/// `TruncNormal(n_d/pi, |1 - pi| n_d / pi^2)` bounded below by `n_d` when
/// under-reported and above by `n_d` (and below by 0) when over-reported.
pub fn impute_params(n_d: f64, pi: f64) -> ImputeParams {
    let mean = n_d / pi;
    let variance = (1.0 - pi).abs() * n_d / (pi * pi);
    let (lower, upper) = if pi < 1.0 {
        (n_d, f64::INFINITY)
    } else {
        (0.0, n_d)
    };
    ImputeParams {
        mean,
        variance,
        lower,
        upper,
    }
}

/// Draw from a truncated normal by inverse-CDF sampling.
pub fn truncnorm_sample<R: Rng>(rng: &mut R, p: &ImputeParams) -> f64 {
    if p.variance <= 0.0 {
        return p.mean.clamp(p.lower, p.upper.max(p.lower));
    }
    let sd = p.variance.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let a = if p.lower.is_finite() {
        normal.cdf((p.lower - p.mean) / sd)
    } else {
        0.0
    };
    let b = if p.upper.is_finite() {
        normal.cdf((p.upper - p.mean) / sd)
    } else {
        1.0
    };
    let u: f64 = rng.gen_range(0.0..1.0);
    let q = a + u * (b - a);
    let x = p.mean + sd * normal.inverse_cdf(q.clamp(1e-15, 1.0 - 1e-15));
    x.clamp(p.lower, if p.upper.is_finite() { p.upper } else { f64::INFINITY })
}

/// Closed-form mean and variance of the truncated normal (moment oracle).
pub fn truncnorm_moments(p: &ImputeParams) -> (f64, f64) {
    if p.variance <= 0.0 {
        return (p.mean, 0.0);
    }
    let sd = p.variance.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let alpha = (p.lower - p.mean) / sd;
    let beta = (p.upper - p.mean) / sd;
    let (phi_a, cdf_a) = if p.lower.is_finite() {
        (phi(alpha), normal.cdf(alpha))
    } else {
        (0.0, 0.0)
    };
    let (phi_b, cdf_b) = if p.upper.is_finite() {
        (phi(beta), normal.cdf(beta))
    } else {
        (0.0, 1.0)
    };
    let z = cdf_b - cdf_a;
    let mean = p.mean + sd * (phi_a - phi_b) / z;
    let a_term = if p.lower.is_finite() { alpha * phi_a } else { 0.0 };
    let b_term = if p.upper.is_finite() { beta * phi_b } else { 0.0 };
    let var = p.variance * (1.0 + (a_term - b_term) / z - ((phi_a - phi_b) / z).powi(2));
    (mean, var)
}

/// `M` imputed copies of the corrected series.
#[derive(Debug, Clone)]
pub struct ImputationSet {
    pub m: usize,
    pub series: Vec<CorrectedSeries>,
    pub seed: u64,
    /// Weeks imputed deterministically because `N(d) = 0` left the
    /// imputation variance degenerate.
    pub warnings: Vec<String>,
}

/// Multiple imputation of the unfinalized weeks from the truncated normal.
///
/// Draws are keyed by `(seed, imputation, week)`, so results do not depend
/// on evaluation order or parallel schedule. Finalized weeks are identical
/// across imputations.
pub fn impute(snap: &Snapshot, factors: &FactorTable, m: usize, seed: u64) -> Result<ImputationSet> {
    if m < 2 {
        return Err(Error::invalid("multiple imputation needs M >= 2"));
    }
    let (s_star, _) = snap.origin();
    let base = base_series(snap);
    let mut warnings = Vec::new();
    let mut series = Vec::with_capacity(m);
    for imp in 0..m {
        let mut weeks = base.clone();
        for e in snap.current_season() {
            let value = if e.finalized {
                e.value
            } else {
                let pi = factors.get(s_star, e.week, e.lag_used)?;
                if pi == 1.0 {
                    e.value
                } else if e.value <= 0.0 {
                    if imp == 0 {
                        warnings.push(format!(
                            "week {}: N(d) = 0 gives degenerate variance; imputed deterministically",
                            e.week
                        ));
                    }
                    e.value / pi
                } else {
                    let params = impute_params(e.value, pi);
                    let mut rng = stream(seed, &[TAG_IMPUTE, imp as u64, e.week as u64]);
                    let draw = truncnorm_sample(&mut rng, &params);
                    debug_assert!(draw >= params.lower && draw <= params.upper);
                    draw
                }
            };
            weeks.push(CorrectedWeek {
                season: s_star,
                week: e.week,
                value,
                log_offset: 0.0,
                finalized: e.finalized,
            });
        }
        series.push(CorrectedSeries {
            weeks,
            origin: snap.origin(),
            excluded: snap.excluded(),
            weeks_per_season: snap.weeks_per_season(),
        });
    }
    Ok(ImputationSet {
        m,
        series,
        seed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::fixed_factors;
    use crate::triangle::{CountMode, ReportingTriangle};
    use approx::assert_abs_diff_eq;

    fn snapshot_fixture() -> Snapshot {
        let mut tri = ReportingTriangle::new(vec![1, 2], 6, 2, CountMode::Real).unwrap();
        for t in 1..=6 {
            for d in 0..=2 {
                tri.set_count(1, t, d, 30.0 + t as f64 + d as f64).unwrap();
            }
            tri.set_validation(1, t, 40.0 + t as f64).unwrap();
        }
        let reports = [10.0, 12.0, 8.0, 10.0];
        for (i, &v) in reports.iter().enumerate() {
            let t = i as u32 + 1;
            for d in 0..=2.min(4 - t) {
                tri.set_count(2, t, d, v + d as f64).unwrap();
            }
        }
        tri.set_validation(2, 1, 13.0).unwrap();
        tri.snapshot(2, 4).unwrap()
    }

    #[test]
    fn rescale_divides_by_factor() {
        let snap = snapshot_fixture();
        let factors = fixed_factors(&[0.5, 0.8, 1.0]).unwrap();
        let series = rescale(&snap, &factors).unwrap();
        let current: Vec<&CorrectedWeek> =
            series.weeks.iter().filter(|w| w.season == 2).collect();
        // Week 4 has lag 0, report 10 -> 20.
        assert_abs_diff_eq!(current[3].value, 10.0 / 0.5, epsilon = 1e-12);
        // Week 3 has lag 1, report 9 -> 11.25.
        assert_abs_diff_eq!(current[2].value, 9.0 / 0.8, epsilon = 1e-12);
        // Week 2 has lag 2, factor 1 -> unchanged.
        assert_abs_diff_eq!(current[1].value, 14.0, epsilon = 1e-12);
    }

    #[test]
    fn rescale_with_unit_factors_is_identity() {
        let snap = snapshot_fixture();
        let factors = fixed_factors(&[1.0, 1.0, 1.0]).unwrap();
        let series = rescale(&snap, &factors).unwrap();
        for (w, e) in series
            .weeks
            .iter()
            .filter(|w| w.season == 2)
            .zip(snap.current_season())
        {
            assert_eq!(w.value, e.value);
        }
    }

    #[test]
    fn rescale_instability_at_low_counts() {
        // N(0) = 1 vs 2 with pi = 0.05: rescaled estimates 20 vs 40.
        assert_abs_diff_eq!(1.0 / 0.05, 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(2.0 / 0.05, 40.0, epsilon = 1e-12);
    }

    #[test]
    fn offsets_attach_log_pi() {
        let snap = snapshot_fixture();
        let factors = fixed_factors(&[0.05, 0.8, 1.0]).unwrap();
        let series = offsets(&snap, &factors).unwrap();
        let current: Vec<&CorrectedWeek> =
            series.weeks.iter().filter(|w| w.season == 2).collect();
        assert_abs_diff_eq!(current[3].log_offset, 0.05_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(current[3].log_offset, -2.9957, epsilon = 1e-4);
        // Values unchanged.
        assert_abs_diff_eq!(current[3].value, 10.0, epsilon = 1e-12);
        // Finalized history weeks carry zero offsets.
        assert!(series
            .weeks
            .iter()
            .filter(|w| w.finalized)
            .all(|w| w.log_offset == 0.0));
    }

    #[test]
    fn unit_factors_give_zero_offsets() {
        let snap = snapshot_fixture();
        let factors = fixed_factors(&[1.0, 1.0, 1.0]).unwrap();
        let series = offsets(&snap, &factors).unwrap();
        assert!(series.weeks.iter().all(|w| w.log_offset == 0.0));
    }

    #[test]
    fn exclude_removes_recent_weeks_and_tracks_horizons() {
        let snap = snapshot_fixture();
        let reduced = exclude(&snap, 1).unwrap();
        assert_eq!(reduced.current_season().len(), 3);
        assert_eq!(reduced.excluded(), 1);
        let reduced3 = exclude(&snap, 3).unwrap();
        assert_eq!(reduced3.current_season().len(), 1);
        assert_eq!(reduced3.excluded(), 3);
        assert!(exclude(&snap, 0).is_err());

        let factors = fixed_factors(&[1.0, 1.0, 1.0]).unwrap();
        let series = rescale(&reduced3, &factors).unwrap();
        // 1-week forecast after excluding 3 weeks is 4 steps ahead.
        assert_eq!(series.steps_for_horizon(1), 4);
    }

    #[test]
    fn impute_params_match_stated_example() {
        // N(d) = 10, pi = 0.5 -> TruncNormal(20, 20; l = 10, u = inf).
        let p = impute_params(10.0, 0.5);
        assert_abs_diff_eq!(p.mean, 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.variance, 20.0, epsilon = 1e-12);
        assert_eq!(p.lower, 10.0);
        assert!(p.upper.is_infinite());

        // Over-reporting bounds: pi > 1 restricts to (0, N(d)].
        let q = impute_params(10.0, 1.25);
        assert_eq!(q.lower, 0.0);
        assert_eq!(q.upper, 10.0);
    }

    #[test]
    fn impute_unit_factor_passes_through() {
        let snap = snapshot_fixture();
        let factors = fixed_factors(&[1.0, 1.0, 1.0]).unwrap();
        let set = impute(&snap, &factors, 3, 7).unwrap();
        for s in &set.series {
            for (w, e) in s
                .weeks
                .iter()
                .filter(|w| w.season == 2)
                .zip(snap.current_season())
            {
                assert_eq!(w.value, e.value);
            }
        }
    }

    #[test]
    fn imputed_draws_respect_bounds_and_reproduce() {
        let snap = snapshot_fixture();
        let factors = fixed_factors(&[0.3, 0.7, 1.0]).unwrap();
        let a = impute(&snap, &factors, 5, 123).unwrap();
        let b = impute(&snap, &factors, 5, 123).unwrap();
        for (sa, sb) in a.series.iter().zip(&b.series) {
            for (wa, wb) in sa.weeks.iter().zip(&sb.weeks) {
                assert_eq!(wa.value, wb.value);
            }
        }
        // Under-reporting bounds: imputed value >= observed report.
        for s in &a.series {
            for (w, e) in s
                .weeks
                .iter()
                .filter(|w| w.season == 2)
                .zip(snap.current_season())
            {
                if !e.finalized {
                    assert!(w.value >= e.value);
                }
            }
        }
        // Finalized weeks identical across imputations.
        let finalized: Vec<Vec<f64>> = a
            .series
            .iter()
            .map(|s| s.weeks.iter().filter(|w| w.finalized).map(|w| w.value).collect())
            .collect();
        assert!(finalized.windows(2).all(|w| w[0] == w[1]));
        assert!(impute(&snap, &factors, 1, 1).is_err());
    }

    #[test]
    fn truncnorm_empirical_moments_match_oracle() {
        let p = impute_params(10.0, 0.5);
        let (m_exact, v_exact) = truncnorm_moments(&p);
        let mut rng = crate::rng::stream(5, &[11]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| truncnorm_sample(&mut rng, &p)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - m_exact).abs() / m_exact < 0.02, "{mean} vs {m_exact}");
        assert!((var - v_exact).abs() / v_exact < 0.02, "{var} vs {v_exact}");
    }

    #[test]
    fn truncation_error_shrinks_with_stronger_underreporting() {
        // Percent error of the truncated mean relative to N(d)/pi decreases
        // as pi -> 0 (larger reporting error, bounds further in the tail).
        let mut errors = Vec::new();
        for &pi in &[0.8, 0.5, 0.2, 0.05] {
            let p = impute_params(10.0, pi);
            let (m_trunc, _) = truncnorm_moments(&p);
            errors.push((m_trunc - p.mean).abs() / p.mean);
        }
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "errors not decreasing: {errors:?}");
        }
    }

    #[test]
    fn zero_count_weeks_impute_deterministically() {
        let mut tri = ReportingTriangle::new(vec![1], 6, 1, CountMode::Real).unwrap();
        tri.set_count(1, 1, 0, 0.0).unwrap();
        tri.set_count(1, 1, 1, 0.0).unwrap();
        tri.set_count(1, 2, 0, 0.0).unwrap();
        let snap = tri.snapshot(1, 2).unwrap();
        let factors = fixed_factors(&[0.5, 1.0]).unwrap();
        let set = impute(&snap, &factors, 2, 1).unwrap();
        assert!(!set.warnings.is_empty());
        for s in &set.series {
            assert!(s.weeks.iter().all(|w| w.value == 0.0));
        }
    }

    /// Incremental-chain offset model (kept as an oracle only): on a
    /// noise-free positive-increment fixture, modeling increments with
    /// offsets `log(pi(d) - pi(d-1))` recovers the same validation mean as
    /// the cumulative formulation with offsets `log pi(d)`.
    #[test]
    fn incremental_chain_oracle_matches_cumulative_offsets() {
        use crate::glm::{fit_glm, DesignMatrix, Family};
        use nalgebra::DMatrix;
        let pi: [f64; 4] = [0.2, 0.6, 0.9, 1.0];
        let n_inf = 80.0;
        let weeks = 12;

        // Cumulative: response N(d), offset log pi(d).
        let mut y_cum = Vec::new();
        let mut off_cum = Vec::new();
        for _t in 0..weeks {
            for d in 0..pi.len() {
                y_cum.push(n_inf * pi[d]);
                off_cum.push(pi[d].ln());
            }
        }
        let n = y_cum.len();
        let design = DesignMatrix::new(
            vec!["intercept".into()],
            DMatrix::from_element(n, 1, 1.0),
            Some(off_cum),
        )
        .unwrap();
        let fit_cum = fit_glm(&design, &y_cum, Family::Poisson).unwrap();

        // Incremental chain: response n(d), offset log(pi(d) - pi(d-1)).
        let mut y_inc = Vec::new();
        let mut off_inc = Vec::new();
        for _t in 0..weeks {
            let mut prev = 0.0;
            for d in 0..pi.len() {
                let inc = pi[d] - prev;
                y_inc.push(n_inf * inc);
                off_inc.push(inc.ln());
                prev = pi[d];
            }
        }
        let n2 = y_inc.len();
        let design2 = DesignMatrix::new(
            vec!["intercept".into()],
            DMatrix::from_element(n2, 1, 1.0),
            Some(off_inc),
        )
        .unwrap();
        let fit_inc = fit_glm(&design2, &y_inc, Family::Poisson).unwrap();

        // Both intercepts are log E N(inf).
        assert_abs_diff_eq!(fit_cum.coefficients[0], n_inf.ln(), epsilon = 1e-8);
        assert_abs_diff_eq!(fit_inc.coefficients[0], n_inf.ln(), epsilon = 1e-8);
    }
}
