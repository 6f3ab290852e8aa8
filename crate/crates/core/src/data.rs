//! Clustered trial data, effect estimates and analysis settings.
//!
//! A [`TrialDataset`] is a list of clusters, each randomised to one arm, holding a
//! binary outcome per individual (possibly missing) and a dense row of baseline
//! covariates. Covariates are never missing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation, Violations};
use crate::special::t_critical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Intervention,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Intervention];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Intervention => 1,
        }
    }

    pub fn code(self) -> u8 {
        self.index() as u8
    }

    pub fn from_code(code: u8) -> Option<Arm> {
        match code {
            0 => Some(Arm::Control),
            1 => Some(Arm::Intervention),
            _ => None,
        }
    }

    /// Intervention indicator used in design matrices.
    pub fn indicator(self) -> f64 {
        self.index() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub id: String,
    pub arm: Arm,
    /// `None` marks a missing outcome; valid values are 0 and 1.
    pub outcomes: Vec<Option<u8>>,
    /// Row-major covariate values, `outcomes.len() * width` entries.
    pub covariates: Vec<f64>,
    pub width: usize,
}

impl ClusterRecord {
    pub fn new(id: impl Into<String>, arm: Arm, outcomes: Vec<Option<u8>>, rows: Vec<Vec<f64>>) -> Self {
        let width = rows.first().map_or(0, Vec::len);
        let covariates = rows.into_iter().flatten().collect();
        ClusterRecord { id: id.into(), arm, outcomes, covariates, width }
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn covariate_row(&self, individual: usize) -> &[f64] {
        &self.covariates[individual * self.width..(individual + 1) * self.width]
    }

    pub fn n_observed(&self) -> usize {
        self.outcomes.iter().filter(|y| y.is_some()).count()
    }

    /// True when no individual in the cluster has an observed outcome.
    pub fn is_empty_of_observed(&self) -> bool {
        self.n_observed() == 0
    }

    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|y| **y == Some(1)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub clusters: Vec<ClusterRecord>,
    pub covariate_names: Vec<String>,
}

impl TrialDataset {
    pub fn new(clusters: Vec<ClusterRecord>, covariate_names: Vec<String>) -> Self {
        TrialDataset { clusters, covariate_names }
    }

    /// Checks every dataset invariant and reports all violations at once.
    pub fn validate(self) -> Result<Self> {
        let mut violations = Vec::new();
        for arm in Arm::BOTH {
            if !self.clusters.iter().any(|c| c.arm == arm) {
                violations.push(Violation::EmptyArm { arm: arm.code() });
            }
        }
        let width = self.covariate_names.len();
        for cluster in &self.clusters {
            if cluster.is_empty() {
                violations.push(Violation::EmptyCluster { cluster: cluster.id.clone() });
                continue;
            }
            if cluster.width != width || cluster.covariates.len() != cluster.len() * width {
                violations.push(Violation::CovariateLength {
                    cluster: cluster.id.clone(),
                    expected: width,
                    found: cluster.width,
                });
                continue;
            }
            for (l, y) in cluster.outcomes.iter().enumerate() {
                if let Some(v) = *y {
                    if v > 1 {
                        violations.push(Violation::NonBinaryOutcome {
                            cluster: cluster.id.clone(),
                            individual: l,
                            value: v,
                        });
                    }
                }
                for (c, x) in cluster.covariate_row(l).iter().enumerate() {
                    if !x.is_finite() {
                        violations.push(Violation::MissingCovariate {
                            cluster: cluster.id.clone(),
                            individual: l,
                            covariate: self.covariate_names[c].clone(),
                        });
                    }
                }
            }
        }
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::Invalid(Violations(violations)))
        }
    }

    /// Drops individuals with a missing outcome. Clusters left without observed
    /// outcomes stay in place (see [`ClusterRecord::is_empty_of_observed`]).
    pub fn complete_records(&self) -> TrialDataset {
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let mut outcomes = Vec::with_capacity(c.len());
                let mut covariates = Vec::with_capacity(c.covariates.len());
                for (l, y) in c.outcomes.iter().enumerate() {
                    if y.is_some() {
                        outcomes.push(*y);
                        covariates.extend_from_slice(c.covariate_row(l));
                    }
                }
                ClusterRecord { id: c.id.clone(), arm: c.arm, outcomes, covariates, width: c.width }
            })
            .collect();
        TrialDataset { clusters, covariate_names: self.covariate_names.clone() }
    }

    pub fn n_individuals(&self) -> usize {
        self.clusters.iter().map(ClusterRecord::len).sum()
    }

    pub fn n_missing(&self) -> usize {
        self.clusters.iter().map(|c| c.len() - c.n_observed()).sum()
    }

    pub fn has_missing(&self) -> bool {
        self.n_missing() > 0
    }

    pub fn clusters_in(&self, arm: Arm) -> impl Iterator<Item = &ClusterRecord> {
        self.clusters.iter().filter(move |c| c.arm == arm)
    }

    /// Individuals with an observed outcome per arm.
    pub fn observed_per_arm(&self) -> [usize; 2] {
        let mut n = [0; 2];
        for c in &self.clusters {
            n[c.arm.index()] += c.n_observed();
        }
        n
    }

    /// Clusters with at least one observed outcome per arm.
    pub fn nonempty_clusters_per_arm(&self) -> [usize; 2] {
        let mut n = [0; 2];
        for c in &self.clusters {
            if !c.is_empty_of_observed() {
                n[c.arm.index()] += 1;
            }
        }
        n
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    /// Mean of a covariate over every individual, observed outcome or not.
    pub fn grand_mean(&self, column: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in &self.clusters {
            for l in 0..c.len() {
                sum += c.covariate_row(l)[column];
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "RD")]
    Rd,
    #[serde(rename = "logRR")]
    LogRr,
    #[serde(rename = "logOR_conditional")]
    LogOrConditional,
    #[serde(rename = "logOR_marginal")]
    LogOrMarginal,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Rd => "RD",
            Scale::LogRr => "logRR",
            Scale::LogOrConditional => "logOR_conditional",
            Scale::LogOrMarginal => "logOR_marginal",
        }
    }

    pub fn parse(s: &str) -> Option<Scale> {
        match s {
            "RD" => Some(Scale::Rd),
            "logRR" => Some(Scale::LogRr),
            "logOR_conditional" => Some(Scale::LogOrConditional),
            "logOR_marginal" => Some(Scale::LogOrMarginal),
            _ => None,
        }
    }

    pub fn is_log(self) -> bool {
        !matches!(self, Scale::Rd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub scale: Scale,
    pub estimate: f64,
    pub se: f64,
    pub df: f64,
    pub ci_level: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub converged: bool,
}

impl EffectEstimate {
    /// Builds a t-based interval `estimate ± t_{df} · se`.
    pub fn with_t_interval(scale: Scale, estimate: f64, se: f64, df: f64, ci_level: f64) -> Self {
        let half = if se > 0.0 { t_critical(df, ci_level) * se } else { 0.0 };
        EffectEstimate {
            scale,
            estimate,
            se,
            df,
            ci_level,
            ci_lower: estimate - half,
            ci_upper: estimate + half,
            converged: true,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lower <= truth && truth <= self.ci_upper
    }

    /// Estimate and interval on the display scale (ratios exponentiated).
    pub fn display(&self) -> (f64, f64, f64) {
        if self.scale.is_log() {
            (self.estimate.exp(), self.ci_lower.exp(), self.ci_upper.exp())
        } else {
            (self.estimate, self.ci_lower, self.ci_upper)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WorkingCorrelation {
    #[default]
    Exchangeable,
    Independence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AnalysisSpec {
    pub adjust_for: Vec<String>,
    pub include_interaction: bool,
    pub center_covariates: bool,
    pub link: Link,
    pub working_correlation: WorkingCorrelation,
}

impl AnalysisSpec {
    pub fn adjusted(names: &[&str]) -> Self {
        AnalysisSpec { adjust_for: names.iter().map(|s| s.to_string()).collect(), ..Default::default() }
    }

    pub fn with_interaction(mut self) -> Self {
        self.include_interaction = true;
        self.center_covariates = true;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.include_interaction && self.adjust_for.is_empty() {
            return Err(Error::InvalidConfig("interaction requires at least one adjustment covariate".into()));
        }
        if self.include_interaction && !self.center_covariates {
            return Err(Error::InvalidConfig("interaction requires centred covariates".into()));
        }
        Ok(())
    }
}
