//! Cluster-level estimators: unadjusted (CL_U) and covariate-adjusted (CL_A)
//! risk difference and risk ratio with two-sample t inference.

use serde::{Deserialize, Serialize};

use crate::data::{AnalysisSpec, Arm, EffectEstimate, Link, Scale, TrialDataset};
use crate::design::{build_design, Rows};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, predict};

/// Which individuals a cluster-level analysis uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Records {
    /// Every individual; the dataset must not contain missing outcomes.
    Full,
    /// Observed individuals only; clusters with no observed outcome are dropped.
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    /// Index into `dataset.clusters`.
    pub cluster: usize,
    pub id: String,
    pub arm: Arm,
    pub observed: usize,
    pub successes: usize,
    pub proportion: f64,
    /// First-stage predicted successes summed over the observed individuals.
    pub predicted: Option<f64>,
}

impl ClusterSummary {
    pub fn diff_residual(&self) -> Option<f64> {
        self.predicted.map(|p| (self.successes as f64 - p) / self.observed as f64)
    }

    pub fn ratio_residual(&self) -> Option<f64> {
        self.predicted.map(|p| self.successes as f64 / p)
    }
}

pub fn summarize_clusters(dataset: &TrialDataset, records: Records) -> Result<Vec<ClusterSummary>> {
    if records == Records::Full && dataset.has_missing() {
        return Err(Error::MissingOutcomes);
    }
    let summaries: Vec<ClusterSummary> = dataset
        .clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.n_observed() > 0)
        .map(|(j, c)| {
            let observed = c.n_observed();
            let successes = c.successes();
            ClusterSummary {
                cluster: j,
                id: c.id.clone(),
                arm: c.arm,
                observed,
                successes,
                proportion: successes as f64 / observed as f64,
                predicted: None,
            }
        })
        .collect();
    for arm in Arm::BOTH {
        if !summaries.iter().any(|s| s.arm == arm) {
            return Err(Error::EmptyArmAfterDrop { arm: arm.code() });
        }
    }
    Ok(summaries)
}

/// Summaries carrying first-stage predictions from a logistic regression of the
/// outcome on the adjustment covariates alone, pooled over both arms.
pub fn summarize_adjusted(
    dataset: &TrialDataset,
    spec: &AnalysisSpec,
    records: Records,
) -> Result<Vec<ClusterSummary>> {
    if spec.adjust_for.is_empty() {
        return Err(Error::InvalidConfig("adjusted cluster-level analysis needs at least one covariate".into()));
    }
    attach_predictions(dataset, spec, summarize_clusters(dataset, records)?)
}

/// Fills `predicted` from a first-stage logistic fit on `spec.adjust_for` (an
/// empty list gives the intercept-only model).
pub fn attach_predictions(
    dataset: &TrialDataset,
    spec: &AnalysisSpec,
    mut summaries: Vec<ClusterSummary>,
) -> Result<Vec<ClusterSummary>> {
    let first_stage = AnalysisSpec { include_interaction: false, ..spec.clone() };
    let design = build_design(dataset, &first_stage, false, Rows::Observed)?;
    let fit = fit_glm(&design.x, &design.y, Link::Logit)?;
    let fitted = predict(&fit, &design.x).values;
    for (summary, (j, rows)) in summaries.iter_mut().zip(&design.groups) {
        debug_assert_eq!(summary.cluster, *j);
        summary.predicted = Some(fitted[rows.clone()].iter().sum());
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Copy)]
struct ArmMoments {
    k: usize,
    mean: f64,
    var: f64,
}

fn moments(summaries: &[ClusterSummary], arm: Arm, value: impl Fn(&ClusterSummary) -> f64) -> Result<ArmMoments> {
    let vals: Vec<f64> = summaries.iter().filter(|s| s.arm == arm).map(value).collect();
    let k = vals.len();
    if k < 2 {
        return Err(Error::TooFewClusters { arm: arm.code(), found: k, needed: 2 });
    }
    let mean = vals.iter().sum::<f64>() / k as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(ArmMoments { k, mean, var })
}

fn both(summaries: &[ClusterSummary], value: impl Fn(&ClusterSummary) -> f64 + Copy) -> Result<[ArmMoments; 2]> {
    Ok([moments(summaries, Arm::Control, value)?, moments(summaries, Arm::Intervention, value)?])
}

fn pooled_t(scale: Scale, [a0, a1]: [ArmMoments; 2], level: f64) -> EffectEstimate {
    let df = (a0.k + a1.k - 2) as f64;
    let sp2 = ((a0.k - 1) as f64 * a0.var + (a1.k - 1) as f64 * a1.var) / df;
    let se = (sp2 * (1.0 / a0.k as f64 + 1.0 / a1.k as f64)).sqrt();
    EffectEstimate::with_t_interval(scale, a1.mean - a0.mean, se, df, level)
}

fn log_ratio(scale: Scale, [a0, a1]: [ArmMoments; 2], level: f64) -> EffectEstimate {
    let df = (a0.k + a1.k - 2) as f64;
    let v = a0.var / (a0.k as f64 * a0.mean * a0.mean) + a1.var / (a1.k as f64 * a1.mean * a1.mean);
    EffectEstimate::with_t_interval(scale, (a1.mean / a0.mean).ln(), v.sqrt(), df, level)
}

pub fn estimate_rd_unadjusted(summaries: &[ClusterSummary], level: f64) -> Result<EffectEstimate> {
    Ok(pooled_t(Scale::Rd, both(summaries, |s| s.proportion)?, level))
}

pub fn estimate_rr_unadjusted(summaries: &[ClusterSummary], level: f64) -> Result<EffectEstimate> {
    let m = both(summaries, |s| s.proportion)?;
    for (arm, a) in Arm::BOTH.iter().zip(&m) {
        if a.mean <= 0.0 {
            return Err(Error::ZeroMeanProportion { arm: arm.code() });
        }
    }
    Ok(log_ratio(Scale::LogRr, m, level))
}

pub fn estimate_rd_adjusted(
    dataset: &TrialDataset,
    spec: &AnalysisSpec,
    records: Records,
    level: f64,
) -> Result<EffectEstimate> {
    let summaries = summarize_adjusted(dataset, spec, records)?;
    rd_from_adjusted(&summaries, level)
}

pub fn estimate_rr_adjusted(
    dataset: &TrialDataset,
    spec: &AnalysisSpec,
    records: Records,
    level: f64,
) -> Result<EffectEstimate> {
    let summaries = summarize_adjusted(dataset, spec, records)?;
    rr_from_adjusted(&summaries, level)
}

pub fn rd_from_adjusted(summaries: &[ClusterSummary], level: f64) -> Result<EffectEstimate> {
    let m = both(summaries, |s| s.diff_residual().expect("adjusted summary"))?;
    Ok(pooled_t(Scale::Rd, m, level))
}

pub fn rr_from_adjusted(summaries: &[ClusterSummary], level: f64) -> Result<EffectEstimate> {
    for s in summaries {
        if s.predicted.expect("adjusted summary") <= 0.0 {
            return Err(Error::ZeroPrediction { cluster: s.id.clone() });
        }
    }
    let m = both(summaries, |s| s.ratio_residual().expect("adjusted summary"))?;
    if m[0].mean <= 0.0 {
        return Err(Error::ZeroMeanResidual { arm: Arm::Control.code() });
    }
    if m[1].mean <= 0.0 {
        return Err(Error::ZeroMeanResidual { arm: Arm::Intervention.code() });
    }
    Ok(log_ratio(Scale::LogRr, m, level))
}
