//! Binomial regression (logit or log link) by Fisher scoring.

use nalgebra::{DMatrix, DVector};

use crate::data::Link;
use crate::error::{Error, Result};
use crate::special::{expit, log1pexp};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;
const SEPARATION_NORM: f64 = 1e3;
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    /// Inverse Fisher information at the estimate.
    pub covariance: DMatrix<f64>,
    pub link: Link,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    /// Rows whose log-link prediction exceeds one.
    pub above_one: Vec<usize>,
}

#[inline]
fn mean_of(link: Link, eta: f64) -> f64 {
    match link {
        Link::Logit => expit(eta),
        Link::Log => eta.exp(),
    }
}

/// Binomial log-likelihood; `-inf` when a log-link mean leaves (0, 1).
pub fn log_likelihood(design: &DMatrix<f64>, response: &[f64], beta: &DVector<f64>, link: Link) -> f64 {
    let eta = design * beta;
    let mut ll = 0.0;
    for (e, &y) in eta.iter().zip(response) {
        ll += match link {
            Link::Logit => y * e - log1pexp(*e),
            Link::Log => {
                if *e >= 0.0 {
                    if y == 1.0 && *e == 0.0 {
                        0.0
                    } else {
                        return f64::NEG_INFINITY;
                    }
                } else {
                    y * e + (1.0 - y) * (-e.exp()).ln_1p()
                }
            }
        };
    }
    ll
}

/// Gradient of [`log_likelihood`] with respect to the coefficients.
pub fn score(design: &DMatrix<f64>, response: &[f64], beta: &DVector<f64>, link: Link) -> DVector<f64> {
    let eta = design * beta;
    let resid = DVector::from_iterator(
        response.len(),
        eta.iter().zip(response).map(|(&e, &y)| {
            let mu = mean_of(link, e);
            match link {
                Link::Logit => y - mu,
                Link::Log => (y - mu) / (1.0 - mu),
            }
        }),
    );
    design.transpose() * resid
}

fn is_intercept(design: &DMatrix<f64>, col: usize) -> bool {
    design.column(col).iter().all(|&v| v == 1.0)
}

/// Working weights `(dmu/deta)^2 / var(mu)` and working response.
fn working(link: Link, eta: f64, y: f64) -> (f64, f64) {
    let mu = mean_of(link, eta);
    match link {
        Link::Logit => {
            let w = (mu * (1.0 - mu)).max(1e-300);
            (w, eta + (y - mu) / w)
        }
        Link::Log => {
            let w = (mu / (1.0 - mu)).max(1e-300);
            (w, eta + (y - mu) / mu)
        }
    }
}

fn weighted_cross(design: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = design.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w) {
        row *= wi;
    }
    design.transpose() * xw
}

pub fn fit_glm(design: &DMatrix<f64>, response: &[f64], link: Link) -> Result<GlmFit> {
    let (n, p) = design.shape();
    if n != response.len() {
        return Err(Error::InvalidConfig(format!("design has {n} rows, response {}", response.len())));
    }
    if n < p || (design.transpose() * design).cholesky().is_none() {
        return Err(Error::RankDeficient);
    }

    let mut beta = match link {
        Link::Logit => {
            let (w, z): (Vec<f64>, Vec<f64>) = response
                .iter()
                .map(|&y| {
                    let mu = (y + 0.5) / 2.0;
                    (mu * (1.0 - mu), (mu / (1.0 - mu)).ln())
                })
                .unzip();
            solve_weighted(design, &w, &z).ok_or(Error::RankDeficient)?
        }
        Link::Log => {
            let mut b = DVector::zeros(p);
            let mean = response.iter().sum::<f64>() / n as f64;
            match (0..p).find(|&c| is_intercept(design, c)) {
                Some(c) => b[c] = mean.clamp(1e-3, 0.99).ln(),
                None => {
                    let (w, z): (Vec<f64>, Vec<f64>) = response
                        .iter()
                        .map(|&y| {
                            let mu = (y + 0.5) / 3.0;
                            (mu / (1.0 - mu), mu.ln())
                        })
                        .unzip();
                    b = solve_weighted(design, &w, &z).ok_or(Error::RankDeficient)?;
                }
            }
            b
        }
    };
    let mut ll = log_likelihood(design, response, &beta, link);
    if !ll.is_finite() {
        return Err(Error::NoConvergence { iterations: 0 });
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let eta = design * &beta;
        let (w, z): (Vec<f64>, Vec<f64>) = eta.iter().zip(response).map(|(&e, &y)| working(link, e, y)).unzip();
        let Some(mut proposal) = solve_weighted(design, &w, &z) else {
            return Err(match link {
                _ if separated(link, &eta, &beta) => Error::Separation,
                // weights diverge as fitted means approach one
                Link::Log => Error::NoConvergence { iterations },
                Link::Logit => Error::RankDeficient,
            });
        };
        let mut new_ll = log_likelihood(design, response, &proposal, link);
        let mut halvings = 0;
        while (!new_ll.is_finite() || new_ll < ll - 1e-12 * ll.abs()) && halvings < 40 {
            proposal = (&proposal + &beta) * 0.5;
            new_ll = log_likelihood(design, response, &proposal, link);
            halvings += 1;
        }
        if !new_ll.is_finite() {
            return Err(Error::NoConvergence { iterations });
        }
        let change = (&proposal - &beta).amax();
        beta = proposal;
        ll = new_ll;
        let eta = design * &beta;
        if separated(link, &eta, &beta) {
            return Err(Error::Separation);
        }
        let grad = score(design, response, &beta, link);
        if change <= TOLERANCE * (1.0 + beta.amax()) || grad.amax() < TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations });
    }

    let eta = design * &beta;
    let w: Vec<f64> = eta.iter().zip(response).map(|(&e, &y)| working(link, e, y).0).collect();
    let info = weighted_cross(design, &w);
    let covariance = match info.cholesky() {
        Some(c) => c.inverse(),
        None if link == Link::Log => return Err(Error::NoConvergence { iterations }),
        None => return Err(Error::RankDeficient),
    };
    Ok(GlmFit { coefficients: beta, covariance, link, converged, iterations, deviance: -2.0 * ll })
}

fn separated(link: Link, eta: &DVector<f64>, beta: &DVector<f64>) -> bool {
    if beta.norm() > SEPARATION_NORM {
        return true;
    }
    match link {
        Link::Logit => eta.amax() > SEPARATION_ETA,
        Link::Log => eta.min() < -SEPARATION_ETA,
    }
}

fn solve_weighted(design: &DMatrix<f64>, w: &[f64], z: &[f64]) -> Option<DVector<f64>> {
    let lhs = weighted_cross(design, w);
    let wz = DVector::from_iterator(z.len(), z.iter().zip(w).map(|(z, w)| z * w));
    let rhs = design.transpose() * wz;
    let beta = lhs.cholesky()?.solve(&rhs);
    beta.iter().all(|v| v.is_finite()).then_some(beta)
}

pub fn predict(fit: &GlmFit, design: &DMatrix<f64>) -> Prediction {
    predict_with(&fit.coefficients, fit.link, design)
}

pub fn predict_with(beta: &DVector<f64>, link: Link, design: &DMatrix<f64>) -> Prediction {
    let eta = design * beta;
    let values: Vec<f64> = eta.iter().map(|&e| mean_of(link, e)).collect();
    let above_one = match link {
        Link::Logit => Vec::new(),
        Link::Log => values.iter().enumerate().filter(|(_, &v)| v > 1.0).map(|(i, _)| i).collect(),
    };
    Prediction { values, above_one }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::logit;

    fn column(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(v.len(), 2, |i, j| if j == 0 { 1.0 } else { v[i] })
    }

    #[test]
    fn intercept_only_closed_form() {
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let x = DMatrix::from_element(8, 1, 1.0);
        let fit = fit_glm(&x, &y, Link::Logit).unwrap();
        assert!((fit.coefficients[0] - (-1.0986122886681098)).abs() < 1e-9);
        // Fisher information n p (1-p)
        assert!((fit.covariance[(0, 0)] - 1.0 / (8.0 * 0.25 * 0.75)).abs() < 1e-9);
    }

    #[test]
    fn saturated_two_group_slope() {
        // group 0: 1 of 5 successes; group 1: 3 of 5
        let xs: Vec<f64> = (0..10).map(|i| if i < 5 { 0.0 } else { 1.0 }).collect();
        let y = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let fit = fit_glm(&column(&xs), &y, Link::Logit).unwrap();
        assert!((fit.coefficients[1] - (logit(0.6) - logit(0.2))).abs() < 1e-9);
        assert!((fit.coefficients[1] - 1.791_759_469_228_055).abs() < 1e-9);
        let at_one = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!((predict(&fit, &at_one).values[0] - 0.6).abs() < 1e-9);
        // log link on the same data reproduces the group means
        let fit_log = fit_glm(&column(&xs), &y, Link::Log).unwrap();
        assert!((fit_log.coefficients[1] - (0.6f64 / 0.2).ln()).abs() < 1e-7);
    }

    #[test]
    fn separation_detected() {
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(fit_glm(&column(&xs), &y, Link::Logit).unwrap_err(), Error::Separation);
    }

    #[test]
    fn rank_deficiency_detected() {
        let x = DMatrix::from_fn(6, 2, |_, _| 1.0);
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(fit_glm(&x, &y, Link::Logit).unwrap_err(), Error::RankDeficient);
    }

    #[test]
    fn zero_coefficients_predict_half_and_one() {
        let x = column(&[0.3, -1.0, 2.0]);
        let b = DVector::zeros(2);
        assert!(predict_with(&b, Link::Logit, &x).values.iter().all(|&v| v == 0.5));
        let b1 = DVector::from_vec(vec![0.0]);
        let x1 = DMatrix::from_element(3, 1, 1.0);
        let p = predict_with(&b1, Link::Log, &x1);
        assert!(p.values.iter().all(|&v| v == 1.0));
        let b2 = DVector::from_vec(vec![0.1]);
        assert_eq!(predict_with(&b2, Link::Log, &x1).above_one, vec![0, 1, 2]);
    }
}
