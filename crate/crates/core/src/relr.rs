//! Random-intercept logistic regression fitted by maximum likelihood, with the
//! cluster integrals approximated by adaptive Gauss–Hermite quadrature.

use std::f64::consts::{LN_2, PI};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::data::{AnalysisSpec, EffectEstimate, Link, Scale, TrialDataset};
use crate::design::{build_design, Design, Rows};
use crate::error::{Error, Result};
use crate::glm::fit_glm;
use crate::special::{expit, gauss_hermite, log1pexp};

pub const DEFAULT_QUAD_POINTS: usize = 15;
const GRADIENT_TOLERANCE: f64 = 1e-6;
const MAX_ITERATIONS: usize = 200;
/// Fits whose log standard deviation falls below this are treated as boundary fits.
const LOG_SD_FLOOR: f64 = -8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelrOptions {
    pub quad_points: usize,
    /// Fix the random-intercept variance instead of estimating it.
    pub pinned_sigma_b2: Option<f64>,
}

impl Default for RelrOptions {
    fn default() -> Self {
        RelrOptions { quad_points: DEFAULT_QUAD_POINTS, pinned_sigma_b2: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelrFit {
    pub fixed_effects: DVector<f64>,
    pub columns: Vec<String>,
    pub sigma_b2_hat: f64,
    /// Covariance of the fixed effects.
    pub covariance: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    /// The variance estimate sits on the zero boundary.
    pub boundary: bool,
    pub quad_points: usize,
    pub iterations: usize,
}

impl RelrFit {
    /// Coefficient and standard error of the intervention indicator.
    pub fn intervention(&self) -> (f64, f64) {
        let c = self.columns.iter().position(|c| c == "arm").expect("intervention column");
        (self.fixed_effects[c], self.covariance[(c, c)].max(0.0).sqrt())
    }
}

/// Integrated log-likelihood of a random-intercept logistic model for a fixed
/// design, parameterised by the fixed effects and `tau = log sigma_b`.
pub struct RelrProblem {
    x: DMatrix<f64>,
    y: Vec<f64>,
    groups: Vec<Range<usize>>,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Centre {
    mode: f64,
    scale: f64,
}

struct Evaluation {
    loglik: f64,
    gradient: DVector<f64>,
    hessian: Option<DMatrix<f64>>,
}

impl RelrProblem {
    pub fn new(design: &Design, quad_points: usize) -> Self {
        let (nodes, weights) = gauss_hermite(quad_points);
        let log_weights = nodes.iter().zip(&weights).map(|(x, w)| w.ln() + x * x).collect();
        RelrProblem {
            x: design.x.clone(),
            y: design.y.clone(),
            groups: design.groups.iter().map(|(_, r)| r.clone()).collect(),
            nodes,
            log_weights,
        }
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// Adaptive quadrature log-likelihood at `(beta, tau)`.
    pub fn loglik(&self, beta: &DVector<f64>, tau: f64) -> f64 {
        let eta = &self.x * beta;
        let mut warm = vec![0.0; self.groups.len()];
        let centres = self.centres(&eta, tau, &mut warm);
        self.evaluate(&eta, tau, &centres, false, true).loglik
    }

    /// Gradient with respect to `(beta, tau)`, holding the quadrature nodes at
    /// their adaptive positions for the given parameters.
    pub fn gradient(&self, beta: &DVector<f64>, tau: f64) -> DVector<f64> {
        let eta = &self.x * beta;
        let mut warm = vec![0.0; self.groups.len()];
        let centres = self.centres(&eta, tau, &mut warm);
        self.evaluate(&eta, tau, &centres, false, true).gradient
    }

    fn centres(&self, eta: &DVector<f64>, tau: f64, warm: &mut [f64]) -> Vec<Centre> {
        let prec = (-2.0 * tau).exp();
        self.groups
            .iter()
            .zip(warm.iter_mut())
            .map(|(rows, b)| {
                let mut info = 0.0;
                for _ in 0..100 {
                    let mut score = -*b * prec;
                    info = prec;
                    for i in rows.clone() {
                        let mu = expit(eta[i] + *b);
                        score += self.y[i] - mu;
                        info += mu * (1.0 - mu);
                    }
                    let step = (score / info).clamp(-2.0, 2.0);
                    *b += step;
                    if step.abs() < 1e-10 * (1.0 + b.abs()) {
                        break;
                    }
                }
                let mut curvature = prec;
                for i in rows.clone() {
                    let mu = expit(eta[i] + *b);
                    curvature += mu * (1.0 - mu);
                }
                debug_assert!(info > 0.0);
                Centre { mode: *b, scale: curvature.sqrt().recip() }
            })
            .collect()
    }

    fn evaluate(
        &self,
        eta: &DVector<f64>,
        tau: f64,
        centres: &[Centre],
        with_hessian: bool,
        with_tau: bool,
    ) -> Evaluation {
        let p = self.n_fixed();
        let dim = p + usize::from(with_tau);
        let prec = (-2.0 * tau).exp();
        let q_len = self.nodes.len();
        let mut loglik = 0.0;
        let mut gradient = DVector::zeros(dim);
        let mut hessian = with_hessian.then(|| DMatrix::zeros(dim, dim));

        let mut log_terms = vec![0.0; q_len];
        let mut grads = DMatrix::<f64>::zeros(dim, q_len);
        let mut curv = vec![DMatrix::<f64>::zeros(p, p); if with_hessian { q_len } else { 0 }];
        for (rows, c) in self.groups.iter().zip(centres) {
            for q in 0..q_len {
                let b = c.mode + std::f64::consts::SQRT_2 * c.scale * self.nodes[q];
                let mut g = -0.5 * b * b * prec;
                let mut gq = grads.column_mut(q);
                gq.fill(0.0);
                if with_hessian {
                    curv[q].fill(0.0);
                }
                for i in rows.clone() {
                    let e = eta[i] + b;
                    g += self.y[i] * e - log1pexp(e);
                    let mu = expit(e);
                    let xi = self.x.row(i);
                    let r = self.y[i] - mu;
                    for a in 0..p {
                        gq[a] += r * xi[a];
                    }
                    if with_hessian {
                        let w = mu * (1.0 - mu);
                        let h = &mut curv[q];
                        for a in 0..p {
                            let wa = w * xi[a];
                            for bb in 0..=a {
                                h[(a, bb)] -= wa * xi[bb];
                            }
                        }
                    }
                }
                if with_tau {
                    gq[p] = b * b * prec;
                }
                log_terms[q] = self.log_weights[q] + g;
            }
            let top = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in log_terms.iter_mut() {
                *t = (*t - top).exp();
                total += *t;
            }
            loglik += (0.5 * LN_2 + c.scale.ln()) - 0.5 * (2.0 * PI).ln() - tau + top + total.ln();

            let mut mean = DVector::<f64>::zeros(dim);
            for (q, w) in log_terms.iter().enumerate() {
                mean.axpy(w / total, &grads.column(q), 1.0);
            }
            gradient += &mean;
            if with_tau {
                gradient[p] -= 1.0;
            }
            if let Some(h) = hessian.as_mut() {
                for q in 0..q_len {
                    let pq = log_terms[q] / total;
                    let gq = grads.column(q);
                    for a in 0..dim {
                        for bb in 0..=a {
                            let mut v = gq[a] * gq[bb];
                            if a < p {
                                v += curv[q][(a, bb)];
                            } else if bb == p {
                                v -= 2.0 * gq[p];
                            }
                            h[(a, bb)] += pq * v;
                        }
                    }
                }
                for a in 0..dim {
                    for bb in 0..=a {
                        h[(a, bb)] -= mean[a] * mean[bb];
                    }
                }
            }
        }
        if let Some(h) = hessian.as_mut() {
            h.fill_upper_triangle_with_lower_triangle();
        }
        Evaluation { loglik, gradient, hessian }
    }
}

pub fn fit_relr(dataset: &TrialDataset, spec: &AnalysisSpec) -> Result<RelrFit> {
    fit_relr_with(dataset, spec, RelrOptions::default())
}

/// Fits on the observed individuals; covariates are centred before any row is
/// dropped.
pub fn fit_relr_with(dataset: &TrialDataset, spec: &AnalysisSpec, options: RelrOptions) -> Result<RelrFit> {
    let design = build_design(dataset, spec, true, Rows::Observed)?;
    fit_design(&design, options)
}

fn glm_fallback(design: &Design, options: RelrOptions, boundary: bool) -> Result<RelrFit> {
    let glm = fit_glm(&design.x, &design.y, Link::Logit)?;
    Ok(RelrFit {
        fixed_effects: glm.coefficients,
        columns: design.columns.clone(),
        sigma_b2_hat: 0.0,
        covariance: glm.covariance,
        loglik: -0.5 * glm.deviance,
        converged: true,
        boundary,
        quad_points: options.quad_points,
        iterations: glm.iterations,
    })
}

pub fn fit_design(design: &Design, options: RelrOptions) -> Result<RelrFit> {
    if options.quad_points == 0 {
        return Err(Error::InvalidConfig("quadrature needs at least one node".into()));
    }
    let pinned_tau = match options.pinned_sigma_b2 {
        Some(v) if v < 0.0 || !v.is_finite() => {
            return Err(Error::InvalidConfig(format!("pinned variance {v} must be a nonnegative number")))
        }
        Some(0.0) => return glm_fallback(design, options, false),
        Some(v) => Some(0.5 * v.ln()),
        None => None,
    };
    let start = fit_glm(&design.x, &design.y, Link::Logit)?;
    let problem = RelrProblem::new(design, options.quad_points);
    let p = problem.n_fixed();
    let free_tau = pinned_tau.is_none();
    let dim = p + usize::from(free_tau);

    let mut beta = start.coefficients.clone();
    let mut tau = pinned_tau.unwrap_or(0.5 * 0.2f64.ln());
    let mut warm = vec![0.0; problem.groups.len()];

    let state = |beta: &DVector<f64>, tau: f64, warm: &mut Vec<f64>, hess: bool| {
        let eta = &problem.x * beta;
        let centres = problem.centres(&eta, tau, warm);
        problem.evaluate(&eta, tau, &centres, hess, free_tau)
    };

    let mut current = state(&beta, tau, &mut warm, true);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        if current.gradient.amax() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;
        let neg_h = -current.hessian.clone().expect("hessian requested");
        let mut ridge = 0.0;
        let step = loop {
            let mut m = neg_h.clone();
            for a in 0..dim {
                m[(a, a)] += ridge;
            }
            if let Some(ch) = m.cholesky() {
                break ch.solve(&current.gradient);
            }
            ridge = if ridge == 0.0 { 1e-6 * (1.0 + neg_h.diagonal().amax()) } else { ridge * 10.0 };
            if !ridge.is_finite() {
                return Err(Error::NoConvergence { iterations });
            }
        };
        let mut scale = 1.0;
        if free_tau && step[p].abs() > 2.0 {
            scale = 2.0 / step[p].abs();
        }
        let mut accepted = None;
        for _ in 0..40 {
            let cand_beta = &beta + step.rows(0, p) * scale;
            let cand_tau = if free_tau { tau + step[p] * scale } else { tau };
            let mut cand_warm = warm.clone();
            let cand = state(&cand_beta, cand_tau, &mut cand_warm, false);
            if cand.loglik.is_finite() && cand.loglik >= current.loglik - 1e-12 * current.loglik.abs() {
                accepted = Some((cand_beta, cand_tau, cand_warm));
                break;
            }
            scale *= 0.5;
        }
        let Some((b, t, w)) = accepted else {
            break;
        };
        let moved = (&b - &beta).amax().max((t - tau).abs());
        beta = b;
        tau = t;
        warm = w;
        if free_tau && tau < LOG_SD_FLOOR {
            return glm_fallback(design, options, true);
        }
        current = state(&beta, tau, &mut warm, true);
        if moved < 1e-12 * (1.0 + beta.amax()) {
            converged = current.gradient.amax() < 1e3 * GRADIENT_TOLERANCE;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations });
    }
    if beta.norm() > 1e3 {
        return Err(Error::Separation);
    }

    let neg_h = -current.hessian.expect("hessian requested");
    let inverse = neg_h.clone().cholesky().map(|c| c.inverse()).or_else(|| neg_h.try_inverse());
    let Some(inverse) = inverse else {
        return Err(Error::NoConvergence { iterations });
    };
    Ok(RelrFit {
        fixed_effects: beta,
        columns: design.columns.clone(),
        sigma_b2_hat: (2.0 * tau).exp(),
        covariance: inverse.view((0, 0), (p, p)).into_owned(),
        loglik: current.loglik,
        converged,
        boundary: false,
        quad_points: options.quad_points,
        iterations,
    })
}

/// Conditional log odds ratio with a t interval on `n_clusters - 2` degrees of
/// freedom. With centred covariates the intervention coefficient is the effect
/// at the covariate mean.
pub fn relr_interval(fit: &RelrFit, n_clusters: usize, ci_level: f64) -> Result<EffectEstimate> {
    if n_clusters <= 2 {
        return Err(Error::NonPositiveDf(n_clusters as f64 - 2.0));
    }
    let (estimate, se) = fit.intervention();
    Ok(EffectEstimate::with_t_interval(Scale::LogOrConditional, estimate, se, (n_clusters - 2) as f64, ci_level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, ClusterRecord};
    use crate::datagen::{builtin_scenario, simulate_trial};
    use crate::rng::SeedSpec;

    fn toy() -> TrialDataset {
        TrialDataset::new(
            vec![
                ClusterRecord::new(
                    "a",
                    Arm::Control,
                    vec![Some(1), Some(0), Some(0), Some(1), Some(0)],
                    vec![vec![0.3], vec![-1.2], vec![0.8], vec![2.0], vec![-0.1]],
                ),
                ClusterRecord::new(
                    "b",
                    Arm::Intervention,
                    vec![Some(1), Some(1), Some(0), Some(1)],
                    vec![vec![1.1], vec![-0.4], vec![0.0], vec![0.6]],
                ),
            ],
            vec!["x".into()],
        )
    }

    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec<F: Fn(f64) -> f64>(
            f: &F,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    #[test]
    fn quadrature_matches_brute_force_integration() {
        let d = toy();
        let design = build_design(&d, &AnalysisSpec::adjusted(&["x"]), true, Rows::Observed).unwrap();
        let beta = DVector::from_vec(vec![-0.3, 0.9, 0.7]);
        for &(sigma, nodes) in &[(0.3, 15), (0.2f64.sqrt(), 15), (1.0, 15), (2.5, 25)] {
            let tau = f64::ln(sigma);
            let aghq = RelrProblem::new(&design, nodes).loglik(&beta, tau);
            let eta = &design.x * &beta;
            let mut oracle = 0.0;
            for (_, rows) in &design.groups {
                let f = |b: f64| {
                    let mut l = -0.5 * (b / sigma).powi(2) - (sigma * (2.0 * PI).sqrt()).ln();
                    for i in rows.clone() {
                        let p = 1.0 / (1.0 + (-(eta[i] + b)).exp());
                        l += if design.y[i] == 1.0 { p.ln() } else { (1.0 - p).ln() };
                    }
                    l.exp()
                };
                oracle += simpson(&f, -10.0 * sigma, 10.0 * sigma, 1e-12).ln();
            }
            assert!((aghq - oracle).abs() < 1e-6, "sigma={sigma}: {aghq} vs {oracle}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = simulate_trial(&builtin_scenario("S1").unwrap().with_design(6, 12), SeedSpec::new(5, 0)).unwrap();
        let design = build_design(&t.full, &AnalysisSpec::adjusted(&["x"]), true, Rows::Observed).unwrap();
        let problem = RelrProblem::new(&design, 15);
        let beta = DVector::from_vec(vec![0.1, 1.2, 0.9]);
        let tau = -0.7;
        let g = problem.gradient(&beta, tau);
        let h = 1e-5;
        for a in 0..4 {
            let (mut bp, mut bm) = (beta.clone(), beta.clone());
            let (mut tp, mut tm) = (tau, tau);
            if a < 3 {
                bp[a] += h;
                bm[a] -= h;
            } else {
                tp += h;
                tm -= h;
            }
            let fd = (problem.loglik(&bp, tp) - problem.loglik(&bm, tm)) / (2.0 * h);
            assert!((g[a] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "component {a}: {} vs {fd}", g[a]);
        }
    }

    #[test]
    fn zero_variance_matches_logistic_fit() {
        let t = simulate_trial(&builtin_scenario("S1").unwrap().with_design(5, 20), SeedSpec::new(2, 1)).unwrap();
        let spec = AnalysisSpec::adjusted(&["x"]);
        let fit =
            fit_relr_with(&t.full, &spec, RelrOptions { pinned_sigma_b2: Some(0.0), ..Default::default() }).unwrap();
        let design = build_design(&t.full, &spec, true, Rows::Observed).unwrap();
        let glm = fit_glm(&design.x, &design.y, Link::Logit).unwrap();
        assert!((&fit.fixed_effects - &glm.coefficients).amax() < 1e-6);
        // a tiny pinned variance approaches the same answer through the quadrature path
        let tiny =
            fit_relr_with(&t.full, &spec, RelrOptions { pinned_sigma_b2: Some(1e-10), ..Default::default() }).unwrap();
        assert!((&tiny.fixed_effects - &fit.fixed_effects).amax() < 1e-4);
    }

    #[test]
    fn node_count_stability_and_location_invariance() {
        let t = simulate_trial(&builtin_scenario("S1").unwrap().with_design(10, 50), SeedSpec::new(8, 3)).unwrap();
        let spec = AnalysisSpec::adjusted(&["x"]);
        let f15 = fit_relr(&t.full, &spec).unwrap();
        let f25 = fit_relr_with(&t.full, &spec, RelrOptions { quad_points: 25, ..Default::default() }).unwrap();
        assert!((f15.intervention().0 - f25.intervention().0).abs() < 1e-4);
        assert!(f15.sigma_b2_hat > 0.0 && !f15.boundary);

        let mut shifted = t.full.clone();
        for c in &mut shifted.clusters {
            for v in &mut c.covariates {
                *v += 7.5;
            }
        }
        let fs = fit_relr(&shifted, &spec).unwrap();
        assert!((fs.intervention().0 - f15.intervention().0).abs() < 1e-6);
        assert!((fs.sigma_b2_hat - f15.sigma_b2_hat).abs() < 1e-6);
        assert!((fs.fixed_effects[2] - f15.fixed_effects[2]).abs() < 1e-6);
    }

    #[test]
    fn interval_uses_cluster_degrees_of_freedom() {
        let t = simulate_trial(&builtin_scenario("S1").unwrap().with_design(5, 30), SeedSpec::new(4, 0)).unwrap();
        let fit = fit_relr(&t.full, &AnalysisSpec::adjusted(&["x"])).unwrap();
        let e = relr_interval(&fit, 10, 0.95).unwrap();
        assert_eq!(e.df, 8.0);
        assert!(((e.ci_upper - e.estimate) - 2.306004135 * e.se).abs() < 1e-8);
        let mut degenerate = fit.clone();
        degenerate.covariance.fill(0.0);
        let d = relr_interval(&degenerate, 10, 0.95).unwrap();
        assert_eq!((d.ci_lower, d.ci_upper), (d.estimate, d.estimate));
    }
}
