//! Count regression with a log link: IRLS for Poisson and negative-binomial
//! families, fixed offsets, and natural cubic spline bases.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::optim::golden_section;

const MAX_IRLS_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-8;
const COEF_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Poisson,
    NegativeBinomial,
}

/// Natural cubic spline basis with knots placed at quantiles of the
/// training data. Natural constraints make the basis linear beyond the
/// boundary knots, so evaluation extrapolates linearly.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    df: usize,
}

impl NaturalSpline {
    /// Choose `df + 1` knots at evenly spaced quantiles of `x`.
    pub fn fit(x: &[f64], df: usize) -> Result<Self> {
        if df < 1 {
            return Err(Error::invalid("spline df must be >= 1"));
        }
        let mut sorted: Vec<f64> = x.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        if sorted.len() < df + 1 {
            return Err(Error::invalid(format!(
                "need at least {} distinct values for a {df}-df natural spline, got {}",
                df + 1,
                sorted.len()
            )));
        }
        let k = df + 1;
        let knots: Vec<f64> = (0..k)
            .map(|i| {
                let q = i as f64 / (k - 1) as f64;
                let pos = q * (sorted.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = pos - lo as f64;
                sorted[lo] * (1.0 - frac) + sorted[hi] * frac
            })
            .collect();
        Ok(Self { knots, df })
    }

    pub fn df(&self) -> usize {
        self.df
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Evaluate the `df` basis columns at the given points.
    pub fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut out = DMatrix::zeros(n, self.df);
        let k = self.knots.len();
        let last = self.knots[k - 1];
        let second_last = self.knots[k - 2];
        let plus_cubed = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |xi: f64, knot: f64| {
            (plus_cubed(xi - knot) - plus_cubed(xi - last)) / (last - knot)
        };
        for (i, &xi) in x.iter().enumerate() {
            out[(i, 0)] = xi;
            for j in 0..self.df.saturating_sub(1) {
                out[(i, j + 1)] = d(xi, self.knots[j]) - d(xi, second_last);
            }
        }
        out
    }
}

/// Convenience: fit a natural spline basis to `x` and evaluate it at `x`.
pub fn natural_spline_basis(x: &[f64], df: usize) -> Result<DMatrix<f64>> {
    Ok(NaturalSpline::fit(x, df)?.basis(x))
}

/// Named design matrix with an optional per-row log-scale offset.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    names: Vec<String>,
    x: DMatrix<f64>,
    offset: DVector<f64>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, x: DMatrix<f64>, offset: Option<Vec<f64>>) -> Result<Self> {
        if names.len() != x.ncols() {
            return Err(Error::invalid("column name count must match design columns"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design matrix entries must be finite"));
        }
        let offset = match offset {
            Some(o) => {
                if o.len() != x.nrows() {
                    return Err(Error::invalid("offset length must match rows"));
                }
                if o.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("offsets must be finite"));
                }
                DVector::from_vec(o)
            }
            None => DVector::zeros(x.nrows()),
        };
        Ok(Self { names, x, offset })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    fn rank_check(&self) -> Result<()> {
        let svd = self.x.clone().svd(false, false);
        let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let tol = max_sv * 1e-10 * self.x.nrows().max(self.x.ncols()) as f64;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < self.x.ncols() {
            return Err(Error::Glm(format!(
                "design matrix is rank deficient (rank {rank} < {} columns); drop aliased columns",
                self.x.ncols()
            )));
        }
        Ok(())
    }
}

/// A fitted log-link count regression.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Negative-binomial size `r` (variance = mu + mu^2 / r); infinite for
    /// the Poisson family.
    pub dispersion: f64,
    pub family: Family,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
}

impl GlmFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }
}

fn poisson_deviance(y: &[f64], mu: &DVector<f64>) -> f64 {
    let mut dev = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let mui = mu[i];
        let term = if yi > 0.0 { yi * (yi / mui).ln() } else { 0.0 };
        dev += 2.0 * (term - (yi - mui));
    }
    dev
}

fn negbin_deviance(y: &[f64], mu: &DVector<f64>, r: f64) -> f64 {
    let mut dev = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let mui = mu[i];
        let term = if yi > 0.0 { yi * (yi / mui).ln() } else { 0.0 };
        dev += 2.0 * (term - (yi + r) * ((yi + r) / (mui + r)).ln());
    }
    dev
}

fn negbin_loglik(y: &[f64], mu: &DVector<f64>, r: f64) -> f64 {
    let mut ll = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let mui = mu[i].max(1e-300);
        ll += ln_gamma(yi + r) - ln_gamma(r) - ln_gamma(yi + 1.0)
            + r * (r / (r + mui)).ln()
            + yi * (mui / (r + mui)).ln();
    }
    ll
}

struct IrlsOutcome {
    beta: DVector<f64>,
    deviance: f64,
    iterations: usize,
    trace: Vec<f64>,
    converged: bool,
}

/// One IRLS run at a fixed dispersion. `size = None` means Poisson.
fn irls(design: &DesignMatrix, y: &[f64], size: Option<f64>) -> Result<IrlsOutcome> {
    let x = design.matrix();
    let offset = design.offset();
    let n = x.nrows();
    let p = x.ncols();

    // Start from a least-squares fit to the link-transformed response.
    let z0 = DVector::from_iterator(n, y.iter().enumerate().map(|(i, &yi)| (yi + 0.5).ln() - offset[i]));
    let xtx = x.transpose() * x;
    let mut beta = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&(x.transpose() * &z0)))
        .unwrap_or_else(|| DVector::zeros(p));

    let deviance_of = |mu: &DVector<f64>| match size {
        None => poisson_deviance(y, mu),
        Some(r) => negbin_deviance(y, mu, r),
    };

    let mean_of = |beta: &DVector<f64>| -> DVector<f64> {
        let eta = x * beta + offset;
        eta.map(|e| e.min(700.0).exp())
    };

    let mut mu = mean_of(&beta);
    let mut dev = deviance_of(&mu);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_IRLS_ITER {
        iterations += 1;
        let eta = x * &beta + offset;
        let mut w = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let mui = mu[i].max(1e-10);
            let wi = match size {
                None => mui,
                Some(r) => mui / (1.0 + mui / r),
            };
            w[i] = wi;
            z[i] = (eta[i] - offset[i]) + (y[i] - mui) / mui;
        }
        // Weighted least squares: (X' W X) beta = X' W z.
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let wi = w[i];
            let row = x.row(i);
            for a in 0..p {
                xtwz[a] += wi * row[a] * z[i];
                for b in a..p {
                    xtwx[(a, b)] += wi * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = xtwx
            .cholesky()
            .ok_or_else(|| Error::Glm("weighted normal equations are singular".into()))?;
        let proposal = chol.solve(&xtwz);

        // Step-halving if the deviance would increase.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let candidate = &beta + step * (&proposal - &beta);
            let mu_c = mean_of(&candidate);
            let dev_c = deviance_of(&mu_c);
            if dev_c.is_finite() && dev_c <= dev * (1.0 + 1e-12) + 1e-12 {
                let rel_change = (dev - dev_c).abs() / (dev.abs() + 0.1);
                beta = candidate;
                mu = mu_c;
                dev = dev_c;
                trace.push(dev);
                accepted = true;
                if rel_change < IRLS_TOL {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            converged = true; // no improving step exists at this resolution
            break;
        }
        if beta.iter().any(|b| b.abs() > COEF_BOUND) {
            return Err(Error::Glm(format!(
                "coefficient diverged beyond |{COEF_BOUND}| (possible separation): {:?}",
                beta.as_slice()
            )));
        }
        if converged {
            break;
        }
    }

    Ok(IrlsOutcome {
        beta,
        deviance: dev,
        iterations,
        trace,
        converged,
    })
}

/// Fit a log-link count regression by IRLS.
///
/// For the negative-binomial family the size parameter is profiled by an
/// outer one-dimensional search over `log r`.
pub fn fit_glm(design: &DesignMatrix, y: &[f64], family: Family) -> Result<GlmFit> {
    if y.len() != design.nrows() {
        return Err(Error::invalid("response length must match design rows"));
    }
    if y.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::invalid("responses must be finite and non-negative"));
    }
    design.rank_check()?;

    match family {
        Family::Poisson => {
            let out = irls(design, y, None)?;
            if !out.converged {
                return Err(Error::GlmNonConvergence {
                    iterations: out.iterations,
                    trace: out.trace,
                });
            }
            Ok(GlmFit {
                names: design.names().to_vec(),
                coefficients: out.beta.as_slice().to_vec(),
                dispersion: f64::INFINITY,
                family,
                converged: true,
                iterations: out.iterations,
                deviance: out.deviance,
            })
        }
        Family::NegativeBinomial => {
            // Profile log r; larger r approaches the Poisson limit.
            let objective = |log_r: f64| -> f64 {
                let r = log_r.exp();
                match irls(design, y, Some(r)) {
                    Ok(out) => {
                        let eta = design.matrix() * &out.beta + design.offset();
                        let mu = eta.map(|e| e.min(700.0).exp());
                        -negbin_loglik(y, &mu, r)
                    }
                    Err(_) => f64::INFINITY,
                }
            };
            let (log_r, _) = golden_section(objective, -3.0, 14.0, 1e-4);
            let r = log_r.exp();
            let out = irls(design, y, Some(r))?;
            if !out.converged {
                return Err(Error::GlmNonConvergence {
                    iterations: out.iterations,
                    trace: out.trace,
                });
            }
            Ok(GlmFit {
                names: design.names().to_vec(),
                coefficients: out.beta.as_slice().to_vec(),
                dispersion: r,
                family,
                converged: true,
                iterations: out.iterations,
                deviance: out.deviance,
            })
        }
    }
}

/// Negative-binomial fit at a fixed size parameter (no profiling).
pub fn fit_glm_with_size(design: &DesignMatrix, y: &[f64], size: f64) -> Result<GlmFit> {
    if !(size > 0.0) {
        return Err(Error::invalid("negative-binomial size must be positive"));
    }
    if y.len() != design.nrows() {
        return Err(Error::invalid("response length must match design rows"));
    }
    design.rank_check()?;
    let out = irls(design, y, Some(size))?;
    if !out.converged {
        return Err(Error::GlmNonConvergence {
            iterations: out.iterations,
            trace: out.trace,
        });
    }
    Ok(GlmFit {
        names: design.names().to_vec(),
        coefficients: out.beta.as_slice().to_vec(),
        dispersion: size,
        family: Family::NegativeBinomial,
        converged: true,
        iterations: out.iterations,
        deviance: out.deviance,
    })
}

/// Fitted mean `exp(X beta + offset)` for new rows.
pub fn predict_mean(fit: &GlmFit, design: &DesignMatrix) -> Result<Vec<f64>> {
    if design.names() != fit.names.as_slice() {
        return Err(Error::Glm(format!(
            "design columns {:?} do not match fit columns {:?}",
            design.names(),
            fit.names
        )));
    }
    let beta = DVector::from_vec(fit.coefficients.clone());
    let eta = design.matrix() * beta + design.offset();
    Ok(eta.iter().map(|e| e.exp()).collect())
}
