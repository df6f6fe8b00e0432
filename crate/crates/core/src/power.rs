//! Monte Carlo power of the VOI treatment effect in a between-subject
//! design.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::PowerError;
use crate::model::{Frame, PayoffTable};
use crate::numeric::{derive_seed, pairwise_sum};
use crate::regress::{run_lpm, RegressionSpec, Regressor};
use crate::simulate::{simulate_between_subjects, PopulationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    pub population: PopulationSpec,
    pub n_voi: usize,
    pub n_nonvoi: usize,
    pub n_sims: usize,
    pub alpha: f64,
    #[serde(default)]
    pub regression: RegressionSpec,
    #[serde(default = "default_frame")]
    pub frame: Frame,
    #[serde(default)]
    pub seed: u64,
}

fn default_frame() -> Frame {
    Frame::Neutral
}

impl PowerSpec {
    pub fn validate(&self) -> Result<(), PowerError> {
        if self.n_sims == 0 {
            return Err(PowerError::InvalidSpec("n_sims must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PowerError::InvalidSpec(format!(
                "alpha = {} outside (0, 1)",
                self.alpha
            )));
        }
        if !self.regression.regressors.contains(&Regressor::Voi) {
            return Err(PowerError::InvalidSpec("regression must include the voi dummy".into()));
        }
        if self.n_voi == 0 || self.n_nonvoi == 0 {
            return Err(PowerError::InvalidSpec("both conditions need subjects".into()));
        }
        self.population
            .validate()
            .map_err(|e| PowerError::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub p_value: Option<f64>,
    pub rejected: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult {
    /// Rejection fraction among successful replications.
    pub power: f64,
    /// Monte Carlo standard error of `power`.
    pub mc_se: f64,
    pub mean_effect: f64,
    pub n_success: usize,
    pub n_failed: usize,
    pub replications: Vec<Replication>,
}

impl PowerResult {
    pub fn p_values(&self) -> Vec<f64> {
        self.replications.iter().filter_map(|r| r.p_value).collect()
    }

    pub fn summary_line(&self, alpha: f64) -> String {
        format!(
            "power = {:.4} (MC s.e. {:.4}) at alpha = {alpha}; mean VOI effect = {:.4}; {} replications, {} failed",
            self.power,
            self.mc_se,
            self.mean_effect,
            self.n_success + self.n_failed,
            self.n_failed
        )
    }
}

/// Repeats: draw a population sample, assign subjects at random to the VOI
/// and non-VOI conditions, simulate one sequence over the payoff table, run
/// the regression and test the VOI coefficient at `alpha`.
pub fn power_simulation(spec: &PowerSpec, payoffs: &PayoffTable) -> Result<PowerResult, PowerError> {
    spec.validate()?;
    let replications: Vec<Replication> = (0..spec.n_sims)
        .into_par_iter()
        .map(|index| {
            let seed = derive_seed(spec.seed, index as u64);
            let failed = |error: String| Replication {
                index,
                seed,
                estimate: None,
                se: None,
                p_value: None,
                rejected: false,
                error: Some(error),
            };
            let ds =
                match simulate_between_subjects(&spec.population, spec.n_voi, spec.n_nonvoi, spec.frame, payoffs, seed)
                {
                    Ok(ds) => ds,
                    Err(e) => return failed(e.to_string()),
                };
            match run_lpm(&ds, &spec.regression) {
                Ok(r) => {
                    let c = r
                        .coefficient(Regressor::Voi.name())
                        .expect("voi coefficient retained or rejected as rank deficient");
                    Replication {
                        index,
                        seed,
                        estimate: Some(c.estimate),
                        se: Some(c.se),
                        p_value: Some(c.p_value),
                        rejected: c.p_value < spec.alpha,
                        error: None,
                    }
                }
                Err(e) => failed(e.to_string()),
            }
        })
        .collect();

    let ok: Vec<&Replication> = replications.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        return Err(PowerError::AllReplicationsFailed(spec.n_sims));
    }
    let n = ok.len() as f64;
    let power = ok.iter().filter(|r| r.rejected).count() as f64 / n;
    let effects: Vec<f64> = ok.iter().filter_map(|r| r.estimate).collect();
    Ok(PowerResult {
        power,
        mc_se: (power * (1.0 - power) / n).sqrt(),
        mean_effect: pairwise_sum(&effects) / n,
        n_success: ok.len(),
        n_failed: replications.len() - ok.len(),
        replications,
    })
}
