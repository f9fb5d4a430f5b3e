//! Synthetic data generation: validation counts from a seasonal negative
//! binomial, delayed real-time reports by case-level multinomial thinning
//! under configurable reporting scenarios, and noisy proxies.

use std::collections::BTreeMap;

use rand::distributions::Distribution;
use rand::Rng;
use statrs::distribution::{Binomial, Gamma, Normal, Poisson};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::triangle::{CountMode, ReportingTriangle, Season};

/// Stream tags separating the simulation's random consumers.
const TAG_VALIDATION: u64 = 0x5349_4d56;
const TAG_THIN: u64 = 0x5349_4d54;
const TAG_PROXY: u64 = 0x5349_4d50;
const TAG_SPURIOUS: u64 = 0x5349_4d53;

/// Maximum reporting lag of the generated profiles.
pub const PROFILE_LAGS: usize = 6;

/// Anchor profiles: lag-0 proportion 0.05 and 0.50.
const ANCHOR_LOW: [f64; PROFILE_LAGS] = [0.05, 0.55, 0.85, 0.95, 0.98, 1.0];
const ANCHOR_HIGH: [f64; PROFILE_LAGS] = [0.50, 0.84, 0.94, 0.97, 0.99, 1.0];

/// Reporting-mechanism scenarios for the thinning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Scenario 1: a single lag-0 proportion `a` everywhere.
    Constant,
    /// Scenario 2: `a` rises 0.05 to 1 over the first half of each season,
    /// then falls back.
    VaryByWeek,
    /// Scenario 3: `a = 0.05` historically, `a = 0.50` in the final season.
    Improve,
    /// Scenario 4: `a = 0.50` historically, `a = 0.05` in the final season.
    Worsen,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Constant => "constant",
            Scenario::VaryByWeek => "vary_by_week",
            Scenario::Improve => "improve",
            Scenario::Worsen => "worsen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Scenario::Constant),
            "vary_by_week" => Ok(Scenario::VaryByWeek),
            "improve" => Ok(Scenario::Improve),
            "worsen" => Ok(Scenario::Worsen),
            other => Err(Error::Simulate(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Configuration for one simulated dataset.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Lag-0 reporting proportion (the base value for scheduled scenarios).
    pub a: f64,
    /// Negative-binomial size of the validation counts.
    pub r: f64,
    pub replicates: u32,
    pub proxy_sigma2: Vec<f64>,
    pub seed: u64,
    pub weeks: u32,
    pub seasons: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::Constant,
            a: 0.05,
            r: 100.0,
            replicates: 1,
            proxy_sigma2: vec![0.01, 1.0, 4.0, 16.0],
            seed: 0,
            weeks: 50,
            seasons: 3,
        }
    }
}

impl ScenarioConfig {
    /// The lag-0 proportion in force at season index `si` (0-based), week `t`.
    pub fn a_for(&self, si: u32, week: u32) -> f64 {
        match self.scenario {
            Scenario::Constant => self.a,
            Scenario::VaryByWeek => {
                let half = (self.weeks / 2).max(1);
                let pos = if week <= half {
                    (week - 1) as f64 / (half - 1).max(1) as f64
                } else {
                    (self.weeks - week) as f64 / (self.weeks - half).max(1) as f64
                };
                0.05 + pos.clamp(0.0, 1.0) * 0.95
            }
            Scenario::Improve => {
                if si + 1 == self.seasons {
                    0.50
                } else {
                    0.05
                }
            }
            Scenario::Worsen => {
                if si + 1 == self.seasons {
                    0.05
                } else {
                    0.50
                }
            }
        }
    }
}

/// A monotone reporting profile `pi(0..)` with terminal value 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportingProfile {
    pub pi: Vec<f64>,
}

impl ReportingProfile {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() || pi.iter().any(|&p| !(p > 0.0) || p > 1.0) {
            return Err(Error::Simulate("profile entries must lie in (0, 1]".into()));
        }
        if pi.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Simulate("profile must be nondecreasing".into()));
        }
        if (pi.last().unwrap() - 1.0).abs() > 1e-12 {
            return Err(Error::Simulate("profile must end at 1".into()));
        }
        Ok(ReportingProfile { pi })
    }

    /// Per-lag report probabilities `pi(d) - pi(d-1)`.
    pub fn increments(&self) -> Vec<f64> {
        let mut inc = Vec::with_capacity(self.pi.len());
        let mut prev = 0.0;
        for &p in &self.pi {
            inc.push(p - prev);
            prev = p;
        }
        inc
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The reporting profile with lag-0 proportion `a`, by per-lag log-odds
/// interpolation between the anchors at a = 0.05 and a = 0.50. Extrapolated
/// values are clamped and made monotone by a running maximum.
pub fn profile_for(a: f64) -> Result<ReportingProfile> {
    if !(a > 0.0) || a > 1.0 {
        return Err(Error::Simulate(format!("a = {a} outside (0, 1]")));
    }
    if a >= 1.0 {
        return ReportingProfile::new(vec![1.0; PROFILE_LAGS]);
    }
    let s = (logit(a) - logit(ANCHOR_LOW[0])) / (logit(ANCHOR_HIGH[0]) - logit(ANCHOR_LOW[0]));
    let mut pi = Vec::with_capacity(PROFILE_LAGS);
    let mut running = 0.0f64;
    for d in 0..PROFILE_LAGS {
        let v = if d + 1 == PROFILE_LAGS {
            1.0
        } else {
            let l1 = logit(ANCHOR_LOW[d]);
            let l2 = logit(ANCHOR_HIGH[d]);
            sigmoid(l1 + s * (l2 - l1)).min(1.0)
        };
        running = running.max(v);
        pi.push(running);
    }
    ReportingProfile::new(pi)
}

/// Seasonal mean grid: `beta` is a centered 3-week moving average of the
/// reference, `seasonal_ratio(t)` the across-season mean of reference/beta,
/// and `theta = beta * seasonal_ratio`. Returns the grid plus warnings for
/// zero-average cells (replaced by 0.5).
pub fn build_theta(
    reference: &BTreeMap<(Season, u32), f64>,
) -> Result<(BTreeMap<(Season, u32), f64>, Vec<String>)> {
    if reference.is_empty() {
        return Err(Error::Simulate("empty reference series".into()));
    }
    let mut warnings = Vec::new();
    let mut beta: BTreeMap<(Season, u32), f64> = BTreeMap::new();
    let seasons: Vec<Season> = {
        let mut s: Vec<Season> = reference.keys().map(|k| k.0).collect();
        s.dedup();
        s
    };
    for &s in &seasons {
        let weeks: Vec<u32> = reference
            .keys()
            .filter(|k| k.0 == s)
            .map(|k| k.1)
            .collect();
        for &t in &weeks {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dt in [-1i64, 0, 1] {
                let tt = t as i64 + dt;
                if tt >= 1 {
                    if let Some(&v) = reference.get(&(s, tt as u32)) {
                        sum += v;
                        n += 1.0;
                    }
                }
            }
            let mut b = sum / n;
            if b == 0.0 {
                warnings.push(format!(
                    "season {s} week {t}: zero moving average replaced by 0.5"
                ));
                b = 0.5;
            }
            beta.insert((s, t), b);
        }
    }
    // Weekly ratio averaged across seasons.
    let mut ratio: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for (&(s, t), &v) in reference {
        let b = beta[&(s, t)];
        let e = ratio.entry(t).or_insert((0.0, 0.0));
        e.0 += v / b;
        e.1 += 1.0;
    }
    let mut theta = BTreeMap::new();
    for (&(s, t), _) in reference {
        let (sum, n) = ratio[&t];
        theta.insert((s, t), beta[&(s, t)] * (sum / n));
    }
    Ok((theta, warnings))
}

/// One negative-binomial draw with mean `theta` and size `r` (Gamma-Poisson).
pub fn nb_draw<R: Rng>(rng: &mut R, theta: f64, r: f64) -> f64 {
    if theta <= 0.0 {
        return 0.0;
    }
    let lambda = Gamma::new(r, r / theta).unwrap().sample(rng);
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).unwrap().sample(rng)
}

/// Independent validation counts `NB(mean theta_ts, size r)`, keyed per cell
/// so results do not depend on iteration order.
pub fn draw_validation(
    theta: &BTreeMap<(Season, u32), f64>,
    r: f64,
    seed: u64,
) -> BTreeMap<(Season, u32), f64> {
    theta
        .iter()
        .map(|(&(s, t), &th)| {
            let mut rng = stream(seed, &[TAG_VALIDATION, s as u64, t as u64]);
            ((s, t), nb_draw(&mut rng, th, r))
        })
        .collect()
}

fn binomial_draw<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(p, n).unwrap().sample(rng) as u64
}

/// Assign each validation case a report lag multinomially with the profile's
/// increment probabilities and return the cumulative reporting triangle with
/// validation counts attached. Conserves cases: `N(tau_max) = N(inf)`.
pub fn thin_reports(
    validation: &BTreeMap<(Season, u32), f64>,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<ReportingTriangle> {
    let seasons: Vec<Season> = {
        let mut s: Vec<Season> = validation.keys().map(|k| k.0).collect();
        s.dedup();
        s
    };
    let max_lag = PROFILE_LAGS as u32 - 1;
    let mut tri = ReportingTriangle::new(
        seasons.clone(),
        config.weeks,
        max_lag,
        CountMode::Integer,
    )?;
    for (&(s, t), &n_inf) in validation {
        let si = seasons.iter().position(|&x| x == s).unwrap() as u32;
        let profile = profile_for(config.a_for(si, t))?;
        let inc = profile.increments();
        let mut rng = stream(seed, &[TAG_THIN, s as u64, t as u64]);
        let mut remaining = n_inf as u64;
        let mut mass_left = 1.0;
        let mut cum = 0.0;
        for (d, &p) in inc.iter().enumerate() {
            let draw = if d + 1 == inc.len() {
                remaining
            } else {
                binomial_draw(&mut rng, remaining, (p / mass_left).clamp(0.0, 1.0))
            };
            remaining -= draw;
            mass_left -= p;
            cum += draw as f64;
            tri.set_count(s, t, d as u32, cum)?;
        }
        tri.set_validation(s, t, n_inf)?;
    }
    Ok(tri)
}

/// Over-reporting generator for exercising `pi > 1` code paths: early lags
/// add spurious cases `Poisson((pi(d) - 1) N(inf))` that finalization
/// removes. The profile here is decreasing toward 1 and must stay >= 1.
pub fn overreport_reports(
    validation: &BTreeMap<(Season, u32), f64>,
    profile: &[f64],
    weeks_per_season: u32,
    seed: u64,
) -> Result<ReportingTriangle> {
    if profile.is_empty() || profile.iter().any(|&p| p < 1.0) {
        return Err(Error::Simulate(
            "over-reporting profile entries must be >= 1".into(),
        ));
    }
    let seasons: Vec<Season> = {
        let mut s: Vec<Season> = validation.keys().map(|k| k.0).collect();
        s.dedup();
        s
    };
    let max_lag = profile.len() as u32 - 1;
    let mut tri =
        ReportingTriangle::new(seasons, weeks_per_season, max_lag, CountMode::Integer)?;
    for (&(s, t), &n_inf) in validation {
        let mut rng = stream(seed, &[TAG_SPURIOUS, s as u64, t as u64]);
        for (d, &pi) in profile.iter().enumerate() {
            let excess = (pi - 1.0) * n_inf;
            let spurious = if excess > 0.0 {
                Poisson::new(excess).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            tri.set_count(s, t, d as u32, n_inf + spurious)?;
        }
        tri.set_validation(s, t, n_inf)?;
    }
    Ok(tri)
}

/// A built-in epidemic curve on the scale of weekly dengue surveillance
/// counts: a seasonal bump (baseline 1000, peak 5000) modulated by a
/// deterministic per-season autoregressive wiggle, so seasons differ and
/// trajectories are irregular the way real surveillance series are rather
/// than smoothly extrapolable. Used as the reference series when no
/// empirical one is supplied; identical for a given grid on every call.
pub fn default_reference(seasons: u32, weeks: u32) -> BTreeMap<(Season, u32), f64> {
    let mut out = BTreeMap::new();
    for s in 1..=seasons {
        let mut rng = stream(0x5245_4643, &[s as u64]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut wiggle = 0.0_f64;
        for t in 1..=weeks {
            wiggle = 0.9 * wiggle + 0.2 * normal.sample(&mut rng);
            let z = (t as f64 - weeks as f64 / 2.0) / 6.0;
            let base = 1000.0 + 4000.0 * (-z * z).exp();
            out.insert((s as Season, t), (base * wiggle.exp()).round().max(1.0));
        }
    }
    out
}

/// One proxy stream per noise variance: `p = 2 log(N + 0.1) + e`,
/// `e ~ Normal(0, sigma2)`.
pub fn draw_proxies(
    validation: &BTreeMap<(Season, u32), f64>,
    sigma2: &[f64],
    seed: u64,
) -> Vec<(f64, BTreeMap<(Season, u32), f64>)> {
    sigma2
        .iter()
        .enumerate()
        .map(|(i, &s2)| {
            let normal = Normal::new(0.0, s2.max(0.0).sqrt().max(1e-300)).unwrap();
            let map = validation
                .iter()
                .map(|(&(s, t), &n)| {
                    let mut rng = stream(seed, &[TAG_PROXY, i as u64, s as u64, t as u64]);
                    let e = if s2 > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    ((s, t), 2.0 * (n + 0.1).ln() + e)
                })
                .collect();
            (s2, map)
        })
        .collect()
}
