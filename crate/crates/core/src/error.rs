use thiserror::Error;

use crate::estimate::{MixtureEstimate, RepresentativeEstimate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("payoff {id}: invalid stakes (e1={e1}, e2={e2}, G={g}, L={l}); need e1 > e2, G > 0, L > 0")]
    InvalidPayoff { id: u32, e1: f64, e2: f64, g: f64, l: f64 },
    #[error("duplicate payoff id {0}")]
    DuplicatePayoff(u32),
    #[error("unknown payoff id {0}")]
    UnknownPayoff(u32),
    #[error("awareness p_hat = {0} outside [1/2, 1]")]
    AwarenessOutOfRange(f64),
    #[error("choice sensitivity sigma = {0} must be finite and >= 0")]
    InvalidSigma(f64),
    #[error("degree of morality kappa = {0} outside [0, 1]")]
    KappaOutOfRange(f64),
    #[error("{0} is not finite")]
    NonFinite(&'static str),
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid population: {0}")]
    InvalidPopulation(String),
    #[error("invalid treatment plan: {0}")]
    InvalidPlan(String),
    #[error("subject {subject} is in arm {arm}, which has no non-VOI sequence to pair")]
    UnpairedArm { subject: u32, arm: String },
    #[error("subject {subject}: {reason}")]
    IncompletePair { subject: u32, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("identification failure: {0}")]
    IdentificationFailure(String),
    #[error("optimizer did not converge (best log-likelihood {:.6})", .0.loglik)]
    NonConvergence(Box<RepresentativeEstimate>),
    #[error("EM did not converge after {} iterations (log-likelihood {:.6})", .0.n_em_iterations, .0.loglik)]
    MixtureNonConvergence(Box<MixtureEstimate>),
    #[error("type {k} collapsed: share {share:.3e} below 1/(10 n)")]
    LabelDegeneracy {
        k: usize,
        share: f64,
        estimate: Box<MixtureEstimate>,
    },
    #[error("clustered covariance unavailable")]
    MissingClusteredCovariance,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressError {
    #[error("sample is empty after filtering")]
    EmptySample,
    #[error("rank deficient design: treatment regressor(s) {0:?} collinear with the rest of the model")]
    RankDeficient(Vec<String>),
    #[error("invalid regression spec: {0}")]
    InvalidSpec(String),
    #[error("subject x payoff fixed effects need within-cell variation in {0}")]
    NoWithinCellVariation(String),
    #[error("two-sample tests: {0}")]
    DegenerateSample(String),
}

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("invalid power spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: {message}")]
    Row { path: String, line: u64, message: String },
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide error used by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    Power(#[from] PowerError),
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Estimate(
                EstimateError::NonConvergence(_)
                | EstimateError::MixtureNonConvergence(_)
                | EstimateError::LabelDegeneracy { .. },
            ) => 4,
            Error::Simulate(SimulateError::InvalidPopulation(_) | SimulateError::InvalidPlan(_))
            | Error::Power(PowerError::InvalidSpec(_))
            | Error::Regress(RegressError::InvalidSpec(_))
            | Error::Estimate(EstimateError::InvalidOptions(_)) => 2,
            _ => 3,
        }
    }
}
