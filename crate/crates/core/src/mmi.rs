//! Multilevel multiple imputation of missing binary outcomes with a probit
//! random-intercept Gibbs sampler, and pooling by Rubin's rules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, complete_data_df, Method};
use crate::data::{AnalysisSpec, EffectEstimate, Link, TrialDataset};
use crate::design::{build_design, Rows};
use crate::error::{Error, Result};
use crate::glm::fit_glm;
use crate::rng::{stream, SeedSpec, StreamRole};
use crate::special::{norm_cdf, norm_quantile, t_critical};

/// Share of failed per-imputation analyses tolerated before giving up.
pub const MAX_FAILURE_SHARE: f64 = 0.2;
/// Logistic-to-probit coefficient scaling used for the starting values.
const PROBIT_SCALE: f64 = 0.588;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationConfig {
    pub n_imputations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub include_interaction: bool,
    pub adjust_for: Vec<String>,
    pub prior_variance_shape: f64,
    pub prior_variance_scale: f64,
    pub seed: SeedSpec,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        ImputationConfig {
            n_imputations: 15,
            burn_in: 100,
            thinning: 25,
            include_interaction: false,
            adjust_for: Vec::new(),
            prior_variance_shape: 0.5,
            prior_variance_scale: 0.5,
            seed: SeedSpec::default(),
        }
    }
}

impl ImputationConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_imputations < 2 {
            return Err(Error::InvalidConfig(format!("n_imputations must be at least 2, got {}", self.n_imputations)));
        }
        if self.thinning < 1 {
            return Err(Error::InvalidConfig("thinning must be at least 1".into()));
        }
        if !(self.prior_variance_shape > 0.0 && self.prior_variance_scale > 0.0) {
            return Err(Error::InvalidConfig("inverse-gamma prior parameters must be positive".into()));
        }
        if self.include_interaction && self.adjust_for.is_empty() {
            return Err(Error::InvalidConfig("an interaction needs at least one imputation covariate".into()));
        }
        Ok(())
    }

    fn model_spec(&self) -> AnalysisSpec {
        AnalysisSpec {
            adjust_for: self.adjust_for.clone(),
            include_interaction: self.include_interaction,
            center_covariates: self.include_interaction,
            ..Default::default()
        }
    }
}

/// Draw from a standard normal truncated to `(a, inf)`.
fn truncated_above(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    let tail = norm_cdf(-a);
    if tail <= 0.0 {
        return a;
    }
    let u: f64 = rng.random();
    let p = (u * tail).max(f64::MIN_POSITIVE);
    (-norm_quantile(p)).max(a)
}

/// Latent-normal Gibbs sampler for a probit model with a normal cluster intercept.
pub struct GibbsSampler {
    x: DMatrix<f64>,
    y: Vec<f64>,
    groups: Vec<(usize, std::ops::Range<usize>)>,
    /// Upper Cholesky factor of `X'X` inverted: `beta ~ mean + chol_inv * w`.
    xtx_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    beta: DVector<f64>,
    intercepts: Vec<f64>,
    sigma2: f64,
    latent: Vec<f64>,
    prior: (f64, f64),
    rng: ChaCha8Rng,
    iteration: usize,
}

impl GibbsSampler {
    pub fn new(dataset: &TrialDataset, config: &ImputationConfig) -> Result<GibbsSampler> {
        config.check()?;
        let design = build_design(dataset, &config.model_spec(), true, Rows::All)?;
        let xtx_chol = (design.x.transpose() * &design.x).cholesky().ok_or(Error::RankDeficient)?;
        let observed = build_design(dataset, &config.model_spec(), true, Rows::Observed)?;
        let beta = match fit_glm(&observed.x, &observed.y, Link::Logit) {
            Ok(fit) => fit.coefficients * PROBIT_SCALE,
            Err(Error::RankDeficient) => return Err(Error::RankDeficient),
            Err(_) => DVector::zeros(design.x.ncols()),
        };
        let latent = design
            .y
            .iter()
            .map(|&y| {
                if y.is_nan() {
                    0.0
                } else if y == 1.0 {
                    0.5
                } else {
                    -0.5
                }
            })
            .collect();
        Ok(GibbsSampler {
            intercepts: vec![0.0; design.groups.len()],
            xtx_chol,
            beta,
            sigma2: 1.0,
            latent,
            prior: (config.prior_variance_shape, config.prior_variance_scale),
            rng: stream(config.seed, StreamRole::Imputation),
            iteration: 0,
            x: design.x,
            y: design.y,
            groups: design.groups,
        })
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<()> {
        self.iteration += 1;
        let fixed = &self.x * &self.beta;

        for (g, (_, rows)) in self.groups.iter().enumerate() {
            let u = self.intercepts[g];
            for i in rows.clone() {
                let mean = fixed[i] + u;
                let y = self.y[i];
                self.latent[i] = if y.is_nan() {
                    mean + self.rng.sample::<f64, _>(StandardNormal)
                } else if y == 1.0 {
                    mean + truncated_above(&mut self.rng, -mean)
                } else {
                    mean - truncated_above(&mut self.rng, mean)
                };
            }
        }

        let mut target = DVector::from_column_slice(&self.latent);
        for (g, (_, rows)) in self.groups.iter().enumerate() {
            for i in rows.clone() {
                target[i] -= self.intercepts[g];
            }
        }
        let mean = self.xtx_chol.solve(&(self.x.transpose() * target));
        let w = DVector::from_fn(mean.len(), |_, _| self.rng.sample::<f64, _>(StandardNormal));
        let l = self.xtx_chol.l();
        let noise = l.transpose().solve_upper_triangular(&w).expect("nonsingular factor");
        self.beta = mean + noise;

        let fixed = &self.x * &self.beta;
        let prec_prior = 1.0 / self.sigma2;
        let mut ss = 0.0;
        for (g, (_, rows)) in self.groups.iter().enumerate() {
            let resid: f64 = rows.clone().map(|i| self.latent[i] - fixed[i]).sum();
            let prec = rows.len() as f64 + prec_prior;
            let z: f64 = self.rng.sample(StandardNormal);
            let u = resid / prec + z / prec.sqrt();
            self.intercepts[g] = u;
            ss += u * u;
        }

        let shape = self.prior.0 + 0.5 * self.groups.len() as f64;
        let rate = self.prior.1 + 0.5 * ss;
        let precision = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(&mut self.rng);
        self.sigma2 = 1.0 / precision;

        if !(self.beta.iter().all(|b| b.is_finite()) && self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::SamplerDivergence { iteration: self.iteration });
        }
        Ok(())
    }

    /// The dataset with each missing outcome set to the sign of its latent value.
    fn completed(&self, dataset: &TrialDataset) -> TrialDataset {
        let mut out = dataset.clone();
        let mut i = 0;
        for c in &mut out.clusters {
            for y in &mut c.outcomes {
                if y.is_none() {
                    *y = Some(u8::from(self.latent[i] > 0.0));
                }
                i += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    /// Sampler iteration the draw was taken at (0 when nothing was missing).
    pub iteration: usize,
    pub dataset: TrialDataset,
}

/// Completed datasets drawn lazily from one chain: the first after `burn_in +
/// thinning` iterations, then one every `thinning` iterations.
pub struct ImputationStream<'a> {
    source: &'a TrialDataset,
    sampler: Option<GibbsSampler>,
    burn_in: usize,
    thinning: usize,
}

impl<'a> ImputationStream<'a> {
    pub fn new(dataset: &'a TrialDataset, config: &ImputationConfig) -> Result<Self> {
        config.check()?;
        let sampler = if dataset.has_missing() { Some(GibbsSampler::new(dataset, config)?) } else { None };
        Ok(ImputationStream { source: dataset, sampler, burn_in: config.burn_in, thinning: config.thinning })
    }

    pub fn next_imputation(&mut self) -> Result<Imputation> {
        let Some(sampler) = self.sampler.as_mut() else {
            return Ok(Imputation { iteration: 0, dataset: self.source.clone() });
        };
        let target = if sampler.iteration() < self.burn_in + self.thinning {
            self.burn_in + self.thinning
        } else {
            sampler.iteration() + self.thinning
        };
        while sampler.iteration() < target {
            sampler.step()?;
        }
        Ok(Imputation { iteration: sampler.iteration(), dataset: sampler.completed(self.source) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSet {
    pub imputations: Vec<Imputation>,
    pub config: ImputationConfig,
}

pub fn impute(dataset: &TrialDataset, config: &ImputationConfig) -> Result<ImputationSet> {
    let mut stream = ImputationStream::new(dataset, config)?;
    let imputations = (0..config.n_imputations).map(|_| stream.next_imputation()).collect::<Result<_>>()?;
    Ok(ImputationSet { imputations, config: config.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub estimate: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    /// Infinite when the between-imputation variance is zero.
    pub nu: f64,
    pub nu_com: f64,
    pub nu_obs_hat: f64,
    pub nu_adj: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Rubin's rules with the small-sample degrees of freedom of Barnard and Rubin.
pub fn pool(per_imputation: &[(f64, f64)], nu_com: f64, ci_level: f64) -> Result<PooledEstimate> {
    let n = per_imputation.len();
    if n < 2 {
        return Err(Error::TooFewImputations(n));
    }
    if nu_com <= 0.0 {
        return Err(Error::NonPositiveDf(nu_com));
    }
    let nf = n as f64;
    let first = per_imputation[0].0;
    let identical = per_imputation.iter().all(|p| p.0 == first);
    let estimate = if identical { first } else { per_imputation.iter().map(|p| p.0).sum::<f64>() / nf };
    let within = per_imputation.iter().map(|p| p.1).sum::<f64>() / nf;
    let between =
        if identical { 0.0 } else { per_imputation.iter().map(|p| (p.0 - estimate).powi(2)).sum::<f64>() / (nf - 1.0) };
    let total = within + (1.0 + 1.0 / nf) * between;
    let shrink = (nu_com + 1.0) / (nu_com + 3.0) * nu_com;
    let (nu, nu_obs_hat) = if between == 0.0 {
        (f64::INFINITY, shrink)
    } else if within == 0.0 {
        return Err(Error::DegenerateVariance);
    } else {
        let r = within / between;
        ((nf - 1.0) * (1.0 + nf / (nf + 1.0) * r).powi(2), shrink / (1.0 + (nf + 1.0) / nf / r))
    };
    let nu_adj = if nu.is_infinite() { nu_obs_hat } else { 1.0 / (1.0 / nu + 1.0 / nu_obs_hat) };
    let half = if total > 0.0 { t_critical(nu_adj, ci_level) * total.sqrt() } else { 0.0 };
    Ok(PooledEstimate {
        estimate,
        within_var: within,
        between_var: between,
        total_var: total,
        nu,
        nu_com,
        nu_obs_hat,
        nu_adj,
        ci_lower: estimate - half,
        ci_upper: estimate + half,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmiResult {
    pub estimate: EffectEstimate,
    pub pooled: PooledEstimate,
    /// Analyses that failed even after a retry on a spare draw.
    pub failed: usize,
    /// Spare draws consumed by retries.
    pub retries: usize,
}

/// Imputes, analyses every completed dataset with `method` and pools on the
/// estimation scale. A failed analysis is retried once on a fresh draw.
pub fn mmi_analyze(
    dataset: &TrialDataset,
    config: &ImputationConfig,
    method: Method,
    spec: &AnalysisSpec,
    ci_level: f64,
) -> Result<MmiResult> {
    let mut stream = ImputationStream::new(dataset, config)?;
    mmi_from_stream(&mut stream, config.n_imputations, dataset, &[method], spec, ci_level).map(|mut v| v.remove(0))?
}

/// As [`mmi_analyze`] for several methods sharing one chain. Each method gets
/// its own result; spare draws for retries are shared.
pub fn mmi_from_stream(
    stream: &mut ImputationStream<'_>,
    n_imputations: usize,
    dataset: &TrialDataset,
    methods: &[Method],
    spec: &AnalysisSpec,
    ci_level: f64,
) -> Result<Vec<Result<MmiResult>>> {
    let draws: Vec<Imputation> = (0..n_imputations).map(|_| stream.next_imputation()).collect::<Result<_>>()?;
    let mut spares: Vec<Imputation> = Vec::new();
    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let nu_com = complete_data_df(dataset, method, spec)?;
        let mut ok = Vec::with_capacity(n_imputations);
        let (mut failed, mut retries, mut spare_idx) = (0, 0, 0);
        let mut last_error = None;
        let mut all_converged = true;
        for draw in &draws {
            let mut outcome = analyze(&draw.dataset, method, spec, ci_level);
            if outcome.is_err() {
                retries += 1;
                if spare_idx == spares.len() {
                    spares.push(stream.next_imputation()?);
                }
                outcome = analyze(&spares[spare_idx].dataset, method, spec, ci_level);
                spare_idx += 1;
            }
            match outcome {
                Ok(e) => {
                    all_converged &= e.converged;
                    ok.push((e.estimate, e.se * e.se));
                }
                Err(e) => {
                    failed += 1;
                    last_error = Some(e);
                }
            }
        }
        if failed as f64 > MAX_FAILURE_SHARE * n_imputations as f64 {
            results.push(Err(Error::ImputationFailures {
                failed,
                total: n_imputations,
                last: last_error.map(|e| e.to_string()).unwrap_or_default(),
            }));
            continue;
        }
        results.push(pool(&ok, nu_com, ci_level).map(|pooled| MmiResult {
            estimate: EffectEstimate {
                scale: method.scale(),
                estimate: pooled.estimate,
                se: pooled.total_var.sqrt(),
                df: pooled.nu_adj,
                ci_level,
                ci_lower: pooled.ci_lower,
                ci_upper: pooled.ci_upper,
                converged: all_converged,
            },
            pooled,
            failed,
            retries,
        }));
    }
    Ok(results)
}
