//! Synthetic cluster randomised trials with covariate-dependent missing outcomes.
//!
//! Clusters `0..k` form the control arm and `k..2k` the intervention arm. A
//! cluster-level covariate effect `alpha ~ N(mu_x, sigma_alpha2)` is shared by the
//! cluster and each individual adds `u ~ N(0, sigma_u2)`. Outcomes follow a
//! random-intercept model on the logit (or log) scale and each outcome goes
//! missing with probability `expit(psi_i + phi_i * x)`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, ClusterRecord, Link, TrialDataset};
use crate::error::{Error, Result};
use crate::rng::{stream, SeedSpec, StreamRole};
use crate::special::expit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Clusters per arm.
    pub k: usize,
    /// Individuals per cluster.
    pub m: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2_control: f64,
    pub beta2_treat: f64,
    pub sigma_b2: f64,
    pub mu_x: f64,
    pub sigma_alpha2: f64,
    pub sigma_u2: f64,
    pub psi_control: f64,
    pub psi_treat: f64,
    pub phi_control: f64,
    pub phi_treat: f64,
    #[serde(default)]
    pub outcome_link: Link,
}

/// Intervention effect giving a marginal risk difference of 15% when the other
/// parameters keep their S1-S4 values.
pub const RD15_BETA1: f64 = 0.997;

impl ScenarioConfig {
    pub fn sigma_x2(&self) -> f64 {
        self.sigma_alpha2 + self.sigma_u2
    }

    pub fn rho_x(&self) -> f64 {
        self.sigma_alpha2 / self.sigma_x2()
    }

    pub fn with_design(mut self, k: usize, m: usize) -> Self {
        self.k = k;
        self.m = m;
        self
    }

    pub fn has_interaction(&self) -> bool {
        self.beta2_control != self.beta2_treat
    }

    pub fn beta2(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.beta2_control,
            Arm::Intervention => self.beta2_treat,
        }
    }

    pub fn psi(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.psi_control,
            Arm::Intervention => self.psi_treat,
        }
    }

    pub fn phi(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.phi_control,
            Arm::Intervention => self.phi_treat,
        }
    }

    pub fn arm_of(&self, cluster: usize) -> Arm {
        if cluster < self.k {
            Arm::Control
        } else {
            Arm::Intervention
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.k == 0 || self.m == 0 {
            return bad("k and m must be positive");
        }
        for (name, v) in [("sigma_b2", self.sigma_b2), ("sigma_alpha2", self.sigma_alpha2), ("sigma_u2", self.sigma_u2)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be strictly positive, got {v}")));
            }
        }
        let all = [
            self.beta0,
            self.beta1,
            self.beta2_control,
            self.beta2_treat,
            self.mu_x,
            self.psi_control,
            self.psi_treat,
            self.phi_control,
            self.phi_treat,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("scenario parameters must be finite");
        }
        Ok(())
    }
}

/// The four simulation scenarios, plus `A1-S1`..`A1-S4` which keep the same
/// structure with a 15% true risk difference.
pub fn builtin_scenario(name: &str) -> Result<ScenarioConfig> {
    let (base, variant) = match name.strip_prefix("A1-") {
        Some(rest) => (RD15_BETA1, rest),
        None => (1.36, name),
    };
    let (beta2_control, psi_treat) = match variant {
        "S1" => (1.0, -1.34),
        "S2" => (1.0, 0.65),
        "S3" => (0.588, -1.34),
        "S4" => (0.588, 0.65),
        _ => return Err(Error::UnknownScenario(name.to_string())),
    };
    Ok(ScenarioConfig {
        k: 50,
        m: 50,
        beta0: 0.0,
        beta1: base,
        beta2_control,
        beta2_treat: 1.0,
        sigma_b2: 0.2,
        mu_x: 0.0,
        sigma_alpha2: 0.18,
        sigma_u2: 3.37,
        psi_control: -1.34,
        psi_treat,
        phi_control: 1.0,
        phi_treat: 1.0,
        outcome_link: Link::Logit,
    })
}

/// Covariate values, one row of `m` values per cluster (`2k` rows).
pub type CovariateMatrix = Vec<Vec<f64>>;

pub fn generate_covariates(config: &ScenarioConfig, seed: SeedSpec) -> CovariateMatrix {
    let mut rng = stream(seed, StreamRole::Covariates);
    let sd_alpha = config.sigma_alpha2.sqrt();
    let sd_u = config.sigma_u2.sqrt();
    (0..2 * config.k)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let alpha = config.mu_x + sd_alpha * z;
            (0..config.m)
                .map(|_| {
                    let u: f64 = rng.sample(StandardNormal);
                    alpha + sd_u * u
                })
                .collect()
        })
        .collect()
}

/// Individual success probabilities given covariates; draws the cluster
/// intercepts from their own stream.
pub fn success_probabilities(
    config: &ScenarioConfig,
    covariates: &CovariateMatrix,
    seed: SeedSpec,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream(seed, StreamRole::RandomIntercepts);
    let delta_dist = Normal::new(0.0, config.sigma_b2.sqrt()).expect("positive variance");
    let mut max_eta = f64::NEG_INFINITY;
    let probs: Vec<Vec<f64>> = covariates
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let arm = config.arm_of(j);
            let delta = delta_dist.sample(&mut rng);
            row.iter()
                .map(|&x| {
                    let eta = config.beta0 + config.beta1 * arm.indicator() + config.beta2(arm) * x + delta;
                    max_eta = max_eta.max(eta);
                    match config.outcome_link {
                        Link::Logit => expit(eta),
                        Link::Log => eta.exp(),
                    }
                })
                .collect()
        })
        .collect();
    if config.outcome_link == Link::Log && max_eta >= 0.0 {
        return Err(Error::ProbabilityOverflow { max_linear_predictor: max_eta, max_probability: max_eta.exp() });
    }
    Ok(probs)
}

pub fn generate_outcomes(
    config: &ScenarioConfig,
    covariates: &CovariateMatrix,
    seed: SeedSpec,
) -> Result<Vec<Vec<u8>>> {
    let probs = success_probabilities(config, covariates, seed)?;
    Ok(draw_outcomes(&probs, seed))
}

fn draw_outcomes(probs: &[Vec<f64>], seed: SeedSpec) -> Vec<Vec<u8>> {
    let mut rng = stream(seed, StreamRole::Outcomes);
    probs.iter().map(|row| row.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect()).collect()
}

/// Observation indicators (`true` = outcome observed).
pub fn apply_missingness(config: &ScenarioConfig, covariates: &CovariateMatrix, seed: SeedSpec) -> Vec<Vec<bool>> {
    let mut rng = stream(seed, StreamRole::Missingness);
    covariates
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let arm = config.arm_of(j);
            row.iter()
                .map(|&x| {
                    let p_missing = expit(config.psi(arm) + config.phi(arm) * x);
                    rng.random::<f64>() >= p_missing
                })
                .collect()
        })
        .collect()
}

/// One generated trial: the full data, the same trial after missingness, and the
/// average true success probability per arm.
#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub full: TrialDataset,
    pub incomplete: TrialDataset,
    pub mean_probability: [f64; 2],
}

pub fn simulate_trial(config: &ScenarioConfig, seed: SeedSpec) -> Result<SimulatedTrial> {
    config.check()?;
    let covariates = generate_covariates(config, seed);
    let probs = success_probabilities(config, &covariates, seed)?;
    let outcomes = draw_outcomes(&probs, seed);
    let observed = apply_missingness(config, &covariates, seed);

    let width = (2 * config.k).to_string().len().max(3);
    let mut full = Vec::with_capacity(2 * config.k);
    let mut incomplete = Vec::with_capacity(2 * config.k);
    let mut prob_sum = [0.0; 2];
    for (j, row) in covariates.iter().enumerate() {
        let arm = config.arm_of(j);
        let id = format!("c{:0width$}", j + 1, width = width);
        let ys: Vec<Option<u8>> = outcomes[j].iter().map(|&y| Some(y)).collect();
        let masked: Vec<Option<u8>> = ys.iter().zip(&observed[j]).map(|(y, &r)| if r { *y } else { None }).collect();
        prob_sum[arm.index()] += probs[j].iter().sum::<f64>();
        full.push(ClusterRecord { id: id.clone(), arm, outcomes: ys, covariates: row.clone(), width: 1 });
        incomplete.push(ClusterRecord { id, arm, outcomes: masked, covariates: row.clone(), width: 1 });
    }
    let per_arm = (config.k * config.m) as f64;
    let names = vec!["x".to_string()];
    Ok(SimulatedTrial {
        full: TrialDataset::new(full, names.clone()).validate()?,
        incomplete: TrialDataset::new(incomplete, names).validate()?,
        mean_probability: [prob_sum[0] / per_arm, prob_sum[1] / per_arm],
    })
}

/// Generated trial with missing outcomes and one covariate named `x`.
pub fn generate_trial(config: &ScenarioConfig, seed: SeedSpec) -> Result<TrialDataset> {
    Ok(simulate_trial(config, seed)?.incomplete)
}

/// Synthetic school-style trial: about 50 clusters per arm of varying size, an
/// `age` and a binary `baseline_anaemia` covariate, no intervention effect and
/// roughly 18% of outcomes missing depending on age.
pub fn demo_trial(master_seed: u64) -> TrialDataset {
    let mut rng = stream(SeedSpec::new(master_seed, 0), StreamRole::Demo);
    let k = 50;
    let mut clusters = Vec::with_capacity(2 * k);
    for j in 0..2 * k {
        let arm = if j < k { Arm::Control } else { Arm::Intervention };
        let size = rng.random_range(35..=60);
        let school_age: f64 = 9.0 + 0.4 * rng.sample::<f64, _>(StandardNormal);
        let school_effect: f64 = 0.45 * rng.sample::<f64, _>(StandardNormal);
        let mut outcomes = Vec::with_capacity(size);
        let mut rows = Vec::with_capacity(size);
        for _ in 0..size {
            let age = school_age + 1.4 * rng.sample::<f64, _>(StandardNormal);
            let age = (age * 10.0).round() / 10.0;
            let anaemia = u8::from(rng.random::<f64>() < 0.3);
            let eta = -1.6 + 0.25 * (age - 9.0) + 1.4 * f64::from(anaemia) + school_effect;
            let y = u8::from(rng.random::<f64>() < expit(eta));
            let p_missing = expit(-1.7 + 0.6 * (age - 9.0));
            let observed = rng.random::<f64>() >= p_missing;
            outcomes.push(if observed { Some(y) } else { None });
            rows.push(vec![age, f64::from(anaemia)]);
        }
        clusters.push(ClusterRecord::new(format!("school{:03}", j + 1), arm, outcomes, rows));
    }
    TrialDataset::new(clusters, vec!["age".into(), "baseline_anaemia".into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(m: &CovariateMatrix) -> Vec<f64> {
        m.iter().flatten().copied().collect()
    }

    fn variance(v: &[f64]) -> f64 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn table_parameters() {
        let s1 = builtin_scenario("S1").unwrap();
        assert_eq!((s1.beta2_control, s1.psi_treat), (1.0, -1.34));
        let s2 = builtin_scenario("S2").unwrap();
        assert_eq!((s2.psi_treat, s2.beta2_control), (0.65, 1.0));
        let s4 = builtin_scenario("S4").unwrap();
        assert_eq!((s4.beta2_control, s4.psi_treat), (0.588, 0.65));
        assert!((s1.sigma_x2() - 3.55).abs() < 1e-12);
        assert!((s1.rho_x() - 0.05).abs() < 0.001);
        assert!(matches!(builtin_scenario("S9"), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn covariate_variance_decomposition() {
        let cfg = builtin_scenario("S1").unwrap().with_design(1000, 50);
        let x = generate_covariates(&cfg, SeedSpec::new(11, 0));
        let all = flat(&x);
        assert_eq!(all.len(), 100_000);
        assert!((variance(&all) - 3.55).abs() < 0.1, "var {}", variance(&all));
        // one-way ANOVA estimate of the intraclass correlation
        let m = 50.0;
        let means: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / m).collect();
        let within: f64 =
            x.iter().zip(&means).map(|(r, mu)| r.iter().map(|v| (v - mu).powi(2)).sum::<f64>()).sum::<f64>()
                / (all.len() as f64 - x.len() as f64);
        let between = variance(&means) - within / m;
        let icc = between / (between + within);
        assert!((icc - 0.05).abs() < 0.01, "icc {icc}");
    }

    #[test]
    fn vanishing_cluster_variance_limit() {
        let mut cfg = builtin_scenario("S1").unwrap().with_design(1000, 50);
        cfg.sigma_alpha2 = 1e-12;
        let x = generate_covariates(&cfg, SeedSpec::new(5, 1));
        let all = flat(&x);
        let within: f64 = x
            .iter()
            .map(|r| {
                let mu = r.iter().sum::<f64>() / r.len() as f64;
                r.iter().map(|v| (v - mu).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / (all.len() - x.len()) as f64;
        // both estimate sigma_u2; they differ only through the mean adjustment
        assert!((within - variance(&all)).abs() < 0.05);
        assert!((within - 3.37).abs() < 0.1);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = builtin_scenario("S2").unwrap().with_design(5, 50);
        let seed = SeedSpec::new(99, 4);
        let a = generate_covariates(&cfg, seed);
        let b = generate_covariates(&cfg, seed);
        assert!(flat(&a).iter().zip(flat(&b)).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(generate_trial(&cfg, seed).unwrap(), generate_trial(&cfg, seed).unwrap());
        assert_ne!(generate_trial(&cfg, SeedSpec::new(99, 5)).unwrap(), generate_trial(&cfg, seed).unwrap());
    }

    #[test]
    fn fair_coin_when_all_effects_vanish() {
        let mut cfg = builtin_scenario("S1").unwrap().with_design(1000, 100);
        cfg.beta1 = 0.0;
        cfg.beta2_control = 0.0;
        cfg.beta2_treat = 0.0;
        cfg.sigma_b2 = 1e-12;
        let x = generate_covariates(&cfg, SeedSpec::new(3, 0));
        let y = generate_outcomes(&cfg, &x, SeedSpec::new(3, 0)).unwrap();
        let rate = y.iter().flatten().map(|&v| v as f64).sum::<f64>() / 200_000.0;
        assert!((rate - 0.5).abs() < 0.01, "{rate}");
    }

    #[test]
    fn log_link_overflow_is_rejected() {
        let mut cfg = builtin_scenario("S1").unwrap().with_design(5, 50);
        cfg.outcome_link = Link::Log;
        let err = generate_trial(&cfg, SeedSpec::new(1, 0)).unwrap_err();
        assert!(matches!(err, Error::ProbabilityOverflow { .. }));
        cfg.beta0 = -40.0;
        cfg.beta2_control = 0.1;
        cfg.beta2_treat = 0.1;
        assert!(generate_trial(&cfg, SeedSpec::new(1, 0)).is_ok());
    }

    #[test]
    fn no_missingness_in_the_limit() {
        let mut cfg = builtin_scenario("S1").unwrap().with_design(20, 50);
        cfg.psi_control = -50.0;
        cfg.psi_treat = -50.0;
        cfg.phi_control = 0.0;
        cfg.phi_treat = 0.0;
        let d = generate_trial(&cfg, SeedSpec::new(8, 0)).unwrap();
        assert_eq!(d.n_missing(), 0);
    }

    #[test]
    fn small_trial_shapes() {
        let cfg = builtin_scenario("S1").unwrap().with_design(5, 50);
        let d = generate_trial(&cfg, SeedSpec::new(2024, 0)).unwrap();
        assert_eq!(d.clusters.len(), 10);
        assert_eq!(d.n_individuals(), 500);
        assert_eq!(d.covariate_names, vec!["x".to_string()]);
        let frac = d.n_missing() as f64 / 500.0;
        assert!((0.2..0.4).contains(&frac), "{frac}");

        let cfg2 = builtin_scenario("S2").unwrap().with_design(5, 50);
        let d2 = generate_trial(&cfg2, SeedSpec::new(2024, 0)).unwrap();
        let miss = |arm| {
            let (n, miss) = d2.clusters_in(arm).fold((0, 0), |(n, m), c| (n + c.len(), m + c.len() - c.n_observed()));
            miss as f64 / n as f64
        };
        assert!((0.2..0.4).contains(&miss(Arm::Control)));
        assert!((0.5..0.7).contains(&miss(Arm::Intervention)));
    }

    #[test]
    fn missingness_ignores_outcome_when_slope_is_zero() {
        let mut cfg = builtin_scenario("S1").unwrap().with_design(500, 50);
        cfg.phi_control = 0.0;
        cfg.phi_treat = 0.0;
        cfg.psi_treat = -1.34;
        let sim = simulate_trial(&cfg, SeedSpec::new(17, 0)).unwrap();
        let mut pairs = Vec::new();
        for (f, i) in sim.full.clusters.iter().zip(&sim.incomplete.clusters) {
            for (y, r) in f.outcomes.iter().zip(&i.outcomes) {
                pairs.push((y.unwrap() as f64, if r.is_some() { 0.0 } else { 1.0 }));
            }
        }
        let n = pairs.len() as f64;
        let my = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mr = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov = pairs.iter().map(|p| (p.0 - my) * (p.1 - mr)).sum::<f64>() / n;
        let corr = cov / (my * (1.0 - my) * mr * (1.0 - mr)).sqrt();
        // 3 standard errors of a correlation over 50 000 pairs
        assert!(corr.abs() < 3.0 / n.sqrt(), "{corr}");
    }

    #[test]
    fn demo_trial_shape() {
        let d = demo_trial(2016).validate().unwrap();
        assert_eq!(d.clusters.len(), 100);
        let frac = d.n_missing() as f64 / d.n_individuals() as f64;
        assert!((0.12..0.25).contains(&frac), "{frac}");
    }
}
