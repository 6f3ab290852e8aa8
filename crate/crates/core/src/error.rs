use std::fmt;

use thiserror::Error;

/// One problem found while validating a [`crate::data::TrialDataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyArm { arm: u8 },
    EmptyCluster { cluster: String },
    NonBinaryOutcome { cluster: String, individual: usize, value: u8 },
    MissingCovariate { cluster: String, individual: usize, covariate: String },
    CovariateLength { cluster: String, expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyArm { arm } => write!(f, "EmptyArm: arm {arm} has no clusters"),
            Violation::EmptyCluster { cluster } => {
                write!(f, "EmptyCluster: cluster {cluster} has no individuals")
            }
            Violation::NonBinaryOutcome { cluster, individual, value } => write!(
                f,
                "NonBinaryOutcome: cluster {cluster}, individual {individual} has outcome {value}"
            ),
            Violation::MissingCovariate { cluster, individual, covariate } => write!(
                f,
                "MissingCovariate: cluster {cluster}, individual {individual}, covariate {covariate}"
            ),
            Violation::CovariateLength { cluster, expected, found } => write!(
                f,
                "CovariateLength: cluster {cluster} carries {found} covariate values per individual, expected {expected}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violations(pub Vec<Violation>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    Invalid(Violations),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error(
        "log-link success probability reached {max_probability:.4} (max linear predictor {max_linear_predictor:.4})"
    )]
    ProbabilityOverflow { max_linear_predictor: f64, max_probability: f64 },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("separation: fitted probabilities pinned at 0/1")]
    Separation,
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("arm {arm} has no clusters with observed outcomes")]
    EmptyArmAfterDrop { arm: u8 },
    #[error("too few clusters: arm {arm} has {found}, need at least {needed}")]
    TooFewClusters { arm: u8, found: usize, needed: usize },
    #[error("mean cluster proportion is zero in arm {arm}")]
    ZeroMeanProportion { arm: u8 },
    #[error("predicted successes are zero in cluster {cluster}")]
    ZeroPrediction { cluster: String },
    #[error("mean ratio-residual is zero in arm {arm}")]
    ZeroMeanResidual { arm: u8 },
    #[error("outcomes are missing but full-data records were requested")]
    MissingOutcomes,
    #[error("non-positive degrees of freedom ({0})")]
    NonPositiveDf(f64),
    #[error("pooling needs at least 2 imputations, got {0}")]
    TooFewImputations(usize),
    #[error("within-imputation variance is zero while the estimates differ")]
    DegenerateVariance,
    #[error("Gibbs sampler produced a non-finite state at iteration {iteration}")]
    SamplerDivergence { iteration: usize },
    #[error("{failed} of {total} imputations failed; last error: {last}")]
    ImputationFailures { failed: usize, total: usize, last: String },
    #[error("infeasible plan: {0}")]
    PlanInfeasible(String),
    #[error("csv error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
