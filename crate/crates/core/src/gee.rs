//! Marginal models for clustered binary outcomes: generalised estimating
//! equations with exchangeable or independence working correlation.

use nalgebra::{DMatrix, DVector};

use crate::data::{AnalysisSpec, EffectEstimate, Link, Scale, TrialDataset, WorkingCorrelation};
use crate::design::{build_design, Design, Rows};
use crate::error::{Error, Result};
use crate::glm::fit_glm;
use crate::special::expit;

const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-8;
const ALPHA_CAP: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub coefficients: DVector<f64>,
    pub columns: Vec<String>,
    pub sandwich_cov: DMatrix<f64>,
    pub model_cov: DMatrix<f64>,
    pub alpha_hat: f64,
    pub link: Link,
    pub working: WorkingCorrelation,
    pub converged: bool,
    pub fell_back_to_independence: bool,
    pub iterations: usize,
}

impl GeeFit {
    /// Coefficient and uncorrected sandwich standard error of the intervention indicator.
    pub fn intervention(&self) -> (f64, f64) {
        let c = self.columns.iter().position(|c| c == "arm").expect("intervention column");
        (self.coefficients[c], self.sandwich_cov[(c, c)].max(0.0).sqrt())
    }
}

/// Per-row mean, `dmu/deta / sqrt(v)` and `sqrt(v)`.
#[inline]
fn components(link: Link, eta: f64) -> (f64, f64, f64) {
    match link {
        Link::Logit => {
            let mu = expit(eta);
            let sd = (mu * (1.0 - mu)).sqrt();
            (mu, sd, sd)
        }
        Link::Log => {
            let mu = eta.exp();
            let sd = (mu * (1.0 - mu)).sqrt();
            (mu, mu / sd, sd)
        }
    }
}

struct Pieces {
    bread: DMatrix<f64>,
    estfun: DVector<f64>,
    meat: DMatrix<f64>,
}

struct Gee<'a> {
    design: &'a Design,
    link: Link,
}

impl Gee<'_> {
    fn valid(&self, eta: &DVector<f64>) -> bool {
        match self.link {
            Link::Logit => eta.iter().all(|e| e.is_finite()),
            Link::Log => eta.iter().all(|&e| e < 0.0),
        }
    }

    /// Standardised Pearson residuals and scaled design rows for each cluster.
    fn alpha(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.design.x * beta;
        let p = beta.len() as f64;
        let (mut num, mut pairs) = (0.0, 0.0);
        for (_, rows) in &self.design.groups {
            let (mut s, mut s2) = (0.0, 0.0);
            for i in rows.clone() {
                let (mu, _, sd) = components(self.link, eta[i]);
                let r = (self.design.y[i] - mu) / sd;
                s += r;
                s2 += r * r;
            }
            num += 0.5 * (s * s - s2);
            let m = rows.len() as f64;
            pairs += 0.5 * m * (m - 1.0);
        }
        let denom = pairs - p;
        if denom <= 0.0 {
            return 0.0;
        }
        (num / denom).clamp(0.0, ALPHA_CAP)
    }

    fn pieces(&self, beta: &DVector<f64>, alpha: f64, with_meat: bool) -> Pieces {
        let p = beta.len();
        let eta = &self.design.x * beta;
        let mut bread = DMatrix::zeros(p, p);
        let mut estfun = DVector::zeros(p);
        let mut meat = DMatrix::zeros(p, p);
        for (_, rows) in &self.design.groups {
            let m = rows.len() as f64;
            let c1 = 1.0 / (1.0 - alpha);
            let c2 = alpha / ((1.0 - alpha) * (1.0 + (m - 1.0) * alpha));
            let xt = DMatrix::from_fn(rows.len(), p, |r, c| {
                let i = rows.start + r;
                components(self.link, eta[i]).1 * self.design.x[(i, c)]
            });
            let resid = DVector::from_fn(rows.len(), |r, _| {
                let i = rows.start + r;
                let (mu, _, sd) = components(self.link, eta[i]);
                (self.design.y[i] - mu) / sd
            });
            let col_sum = DVector::from_fn(p, |c, _| xt.column(c).sum());
            let r_sum = resid.sum();
            let xtx = xt.transpose() * &xt;
            bread += xtx * c1 - &col_sum * col_sum.transpose() * c2;
            let u = xt.transpose() * &resid * c1 - &col_sum * (r_sum * c2);
            if with_meat {
                meat += &u * u.transpose();
            }
            estfun += u;
        }
        Pieces { bread, estfun, meat }
    }

    fn solve(&self, start: DVector<f64>, working: WorkingCorrelation) -> Result<(DVector<f64>, f64, usize)> {
        let mut beta = start;
        let mut alpha = 0.0;
        for it in 1..=MAX_ITERATIONS {
            if working == WorkingCorrelation::Exchangeable {
                alpha = self.alpha(&beta);
            }
            let pc = self.pieces(&beta, alpha, false);
            let Some(chol) = pc.bread.cholesky() else {
                return Err(match self.link {
                    Link::Logit => Error::RankDeficient,
                    Link::Log => Error::NoConvergence { iterations: it },
                });
            };
            let step = chol.solve(&pc.estfun);
            let mut scale = 1.0;
            let mut next = &beta + &step;
            let mut halvings = 0;
            while !self.valid(&(&self.design.x * &next)) {
                halvings += 1;
                if halvings > 30 {
                    return Err(Error::NoConvergence { iterations: it });
                }
                scale *= 0.5;
                next = &beta + &step * scale;
            }
            let change = (&next - &beta).amax();
            beta = next;
            if !beta.iter().all(|b| b.is_finite()) || beta.norm() > 1e3 {
                return Err(Error::NoConvergence { iterations: it });
            }
            if change <= TOLERANCE * (1.0 + beta.amax()) {
                if working == WorkingCorrelation::Exchangeable {
                    alpha = self.alpha(&beta);
                }
                return Ok((beta, alpha, it));
            }
        }
        Err(Error::NoConvergence { iterations: MAX_ITERATIONS })
    }
}

pub fn fit_gee(dataset: &TrialDataset, spec: &AnalysisSpec) -> Result<GeeFit> {
    let design = build_design(dataset, spec, true, Rows::Observed)?;
    fit_gee_design(&design, spec.link, spec.working_correlation)
}

pub fn fit_gee_design(design: &Design, link: Link, working: WorkingCorrelation) -> Result<GeeFit> {
    let start = fit_glm(&design.x, &design.y, link)?.coefficients;
    let gee = Gee { design, link };
    let (result, fell_back) = match gee.solve(start.clone(), working) {
        Ok(r) => (r, false),
        Err(Error::RankDeficient) => return Err(Error::RankDeficient),
        Err(_) if working == WorkingCorrelation::Exchangeable => {
            (gee.solve(start, WorkingCorrelation::Independence)?, true)
        }
        Err(e) => return Err(e),
    };
    let (beta, alpha, iterations) = result;
    let pc = gee.pieces(&beta, alpha, true);
    let model_cov = pc.bread.clone().cholesky().ok_or(Error::RankDeficient)?.inverse();
    let sandwich_cov = &model_cov * &pc.meat * &model_cov;
    Ok(GeeFit {
        coefficients: beta,
        columns: design.columns.clone(),
        sandwich_cov,
        model_cov,
        alpha_hat: alpha,
        link,
        working,
        converged: true,
        fell_back_to_independence: fell_back,
        iterations,
    })
}

/// Norm of the estimating function at the fitted coefficients.
pub fn estimating_function_norm(design: &Design, fit: &GeeFit) -> f64 {
    let gee = Gee { design, link: fit.link };
    gee.pieces(&fit.coefficients, fit.alpha_hat, false).estfun.norm()
}

/// Intervention effect with the sandwich standard error inflated by
/// `sqrt(k/(k-1))` and `2k - 2 - d` degrees of freedom, `k` being clusters per arm.
pub fn corrected_interval(fit: &GeeFit, k_per_arm: f64, d: usize, ci_level: f64) -> Result<EffectEstimate> {
    let df = 2.0 * k_per_arm - 2.0 - d as f64;
    if df <= 0.0 || k_per_arm <= 1.0 {
        return Err(Error::NonPositiveDf(df));
    }
    let (estimate, raw) = fit.intervention();
    let scale = match fit.link {
        Link::Logit => Scale::LogOrMarginal,
        Link::Log => Scale::LogRr,
    };
    Ok(EffectEstimate::with_t_interval(scale, estimate, corrected_se(raw, k_per_arm), df, ci_level))
}

pub fn corrected_se(raw: f64, k_per_arm: f64) -> f64 {
    raw * (k_per_arm / (k_per_arm - 1.0)).sqrt()
}
