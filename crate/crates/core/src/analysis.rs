//! The seven analysis methods behind one entry point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{
    estimate_rd_adjusted, estimate_rd_unadjusted, estimate_rr_adjusted, estimate_rr_unadjusted, summarize_clusters,
    Records,
};
use crate::data::{AnalysisSpec, EffectEstimate, Link, Scale, TrialDataset};
use crate::error::{Error, Result};
use crate::gee::{corrected_interval, fit_gee};
use crate::relr::{fit_relr, relr_interval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CL_U-RD")]
    ClURd,
    #[serde(rename = "CL_U-RR")]
    ClURr,
    #[serde(rename = "CL_A-RD")]
    ClARd,
    #[serde(rename = "CL_A-RR")]
    ClARr,
    #[serde(rename = "RELR")]
    Relr,
    #[serde(rename = "GEE-logit")]
    GeeLogit,
    #[serde(rename = "GEE-log")]
    GeeLog,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::ClURd, Method::ClURr, Method::ClARd, Method::ClARr, Method::Relr, Method::GeeLogit, Method::GeeLog];

    pub fn name(self) -> &'static str {
        match self {
            Method::ClURd => "CL_U-RD",
            Method::ClURr => "CL_U-RR",
            Method::ClARd => "CL_A-RD",
            Method::ClARr => "CL_A-RR",
            Method::Relr => "RELR",
            Method::GeeLogit => "GEE-logit",
            Method::GeeLog => "GEE-log",
        }
    }

    pub fn scale(self) -> Scale {
        match self {
            Method::ClURd | Method::ClARd => Scale::Rd,
            Method::ClURr | Method::ClARr | Method::GeeLog => Scale::LogRr,
            Method::Relr => Scale::LogOrConditional,
            Method::GeeLogit => Scale::LogOrMarginal,
        }
    }

    pub fn is_cluster_level(self) -> bool {
        matches!(self, Method::ClURd | Method::ClURr | Method::ClARd | Method::ClARr)
    }

    pub fn needs_covariates(self) -> bool {
        matches!(self, Method::ClARd | Method::ClARr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Number of adjustment covariates that are constant within every cluster.
pub fn cluster_level_covariates(dataset: &TrialDataset, spec: &AnalysisSpec) -> Result<usize> {
    let mut d = 0;
    for name in &spec.adjust_for {
        let c = dataset.covariate_index(name)?;
        let constant = dataset.clusters.iter().all(|cl| {
            let first = (!cl.is_empty()).then(|| cl.covariate_row(0)[c]);
            (0..cl.len()).all(|l| Some(cl.covariate_row(l)[c]) == first)
        });
        if constant {
            d += 1;
        }
    }
    Ok(d)
}

/// Complete-data degrees of freedom for a method applied to a dataset with
/// `2k` clusters.
pub fn complete_data_df(dataset: &TrialDataset, method: Method, spec: &AnalysisSpec) -> Result<f64> {
    let base = dataset.clusters.len() as f64 - 2.0;
    Ok(match method {
        Method::GeeLogit | Method::GeeLog => base - cluster_level_covariates(dataset, spec)? as f64,
        _ => base,
    })
}

/// Runs `method` on the observed outcomes of `dataset`. Individual-level methods
/// use the intervention indicator plus `spec`; cluster-level adjusted methods use
/// `spec.adjust_for` in their first stage.
pub fn analyze(dataset: &TrialDataset, method: Method, spec: &AnalysisSpec, ci_level: f64) -> Result<EffectEstimate> {
    let records = Records::Complete;
    match method {
        Method::ClURd => estimate_rd_unadjusted(&summarize_clusters(dataset, records)?, ci_level),
        Method::ClURr => estimate_rr_unadjusted(&summarize_clusters(dataset, records)?, ci_level),
        Method::ClARd => estimate_rd_adjusted(dataset, spec, records, ci_level),
        Method::ClARr => estimate_rr_adjusted(dataset, spec, records, ci_level),
        Method::Relr => {
            let fit = fit_relr(dataset, spec)?;
            relr_interval(&fit, dataset.clusters.len(), ci_level)
        }
        Method::GeeLogit | Method::GeeLog => {
            let link = if method == Method::GeeLog { Link::Log } else { Link::Logit };
            let spec = AnalysisSpec { link, ..spec.clone() };
            let fit = fit_gee(dataset, &spec)?;
            let d = cluster_level_covariates(dataset, &spec)?;
            let mut e = corrected_interval(&fit, dataset.clusters.len() as f64 / 2.0, d, ci_level)?;
            e.converged = !fit.fell_back_to_independence;
            Ok(e)
        }
    }
}
