//! TOML run configuration and the reproducibility manifest written next to
//! every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimate::{FitOptions, MixtureOptions};
use crate::model::{Awareness, Frame, PreferenceParameters};
use crate::power::PowerSpec;
use crate::regress::RegressionSpec;
use crate::simulate::{Arm, CoreLevel, PopulationComponent, PopulationSpec, SequenceLabel};

pub const DEFAULT_SEED: u64 = 20211122;

/// Built-in populations.
///
/// * `representative`: one type; neutral (0.194, 0.258, 0.295), market
///   (0.099, 0.228, 0.040).
/// * `two-type`: shares 0.554 / 0.446; neutral types (0.327, 0.116, 0.046)
///   and (-0.065, 0.342, 0.025); market types (0.203, 0.153, 0.068) and
///   (-0.143, 0.325, 0.030).
/// * `selfish`: beta = kappa = 0 with sigma = 0.3.
pub fn population_preset(name: &str) -> Option<PopulationSpec> {
    let p = PreferenceParameters::new;
    let comps = match name {
        "representative" => {
            vec![PopulationComponent::new(1.0, p(0.194, 0.258, 0.295)).with_market(p(0.099, 0.228, 0.040))]
        }
        "two-type" => vec![
            PopulationComponent::new(0.554, p(0.327, 0.116, 0.046)).with_market(p(0.203, 0.153, 0.068)),
            PopulationComponent::new(0.446, p(-0.065, 0.342, 0.025)).with_market(p(-0.143, 0.325, 0.030)),
        ],
        "selfish" => vec![PopulationComponent::new(1.0, p(0.0, 0.0, 0.3))],
        _ => return None,
    };
    Some(PopulationSpec { components: comps })
}

pub const PRESETS: [&str; 3] = ["representative", "two-type", "selfish"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub preset: Option<String>,
    pub components: Vec<PopulationComponent>,
}

impl PopulationConfig {
    pub fn resolve(&self) -> Result<PopulationSpec, Error> {
        let spec = match (&self.preset, self.components.is_empty()) {
            (Some(name), true) => population_preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown population preset `{name}` (known: {})",
                    PRESETS.join(", ")
                ))
            })?,
            (None, false) => PopulationSpec {
                components: self.components.clone(),
            },
            (Some(_), false) => {
                return Err(Error::Config(
                    "population: give either `preset` or `components`, not both".into(),
                ))
            }
            (None, true) => return Err(Error::Config("population: no preset or components".into())),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Fully resolved form, recorded in manifests.
    pub fn resolved(&self) -> Result<Self, Error> {
        Ok(Self {
            preset: None,
            components: self.resolve()?.components,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSize {
    pub arm: Arm,
    pub subjects: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetweenConfig {
    pub n_voi: usize,
    pub n_nonvoi: usize,
    #[serde(default = "neutral")]
    pub frame: Frame,
}

fn neutral() -> Frame {
    Frame::Neutral
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Within-subject arms and their sizes.
    pub arms: Vec<ArmSize>,
    /// Between-subject single-sequence design; replaces `arms` when set.
    pub between: Option<BetweenConfig>,
    /// Awareness in non-VOI decisions for every component, overriding the
    /// population.
    pub p_hat_nonvoi: Option<Awareness>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            arms: vec![ArmSize {
                arm: Arm::N,
                subjects: 100,
            }],
            between: None,
            p_hat_nonvoi: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMode {
    #[default]
    Rep,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub mode: EstimateMode,
    /// Number of types for the mixture mode.
    pub k: usize,
    /// Restrict to one frame before fitting.
    pub frame: Option<Frame>,
    pub core: CoreLevel,
    pub fit: FitOptions,
    pub mixture: MixtureOptions,
    /// Posterior cut for classifying subjects.
    pub classify_cut: f64,
    /// Also fit each frame separately and test equality of parameters.
    pub compare_frames: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            mode: EstimateMode::Rep,
            k: 2,
            frame: None,
            core: CoreLevel::Full,
            fit: FitOptions::default(),
            mixture: MixtureOptions::default(),
            classify_cut: 0.95,
            compare_frames: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub n_voi: usize,
    pub n_nonvoi: usize,
    pub n_sims: usize,
    pub alpha: f64,
    pub frame: Frame,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            n_voi: 55,
            n_nonvoi: 54,
            n_sims: 1000,
            alpha: 0.05,
            frame: Frame::Neutral,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Payoff table CSV; the built-in table when absent.
    pub payoffs: Option<PathBuf>,
    /// Input dataset CSV.
    pub data: Option<PathBuf>,
    pub population: Option<PopulationConfig>,
    pub simulate: SimulateConfig,
    pub estimate: EstimateConfig,
    pub regress: RegressionSpec,
    pub power: PowerConfig,
    /// Sequences kept by `filter`; empty keeps all.
    #[serde(with = "labels")]
    pub sample: Vec<SequenceLabel>,
}

mod labels {
    use super::SequenceLabel;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[SequenceLabel], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|l| l.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<SequenceLabel>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn population(&self) -> Result<PopulationSpec, Error> {
        let mut spec = self
            .population
            .as_ref()
            .ok_or_else(|| Error::Config("missing [population] section".into()))?
            .resolve()?;
        if let Some(p) = self.simulate.p_hat_nonvoi {
            for c in &mut spec.components {
                c.p_hat_nonvoi = p;
            }
        }
        Ok(spec)
    }

    pub fn power_spec(&self) -> Result<PowerSpec, Error> {
        let spec = PowerSpec {
            population: self.population()?,
            n_voi: self.power.n_voi,
            n_nonvoi: self.power.n_nonvoi,
            n_sims: self.power.n_sims,
            alpha: self.power.alpha,
            regression: self.regress.clone(),
            frame: self.power.frame,
            seed: self.seed(),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // a manifest carries the resolved config in its own section
        let table = match (table.get("run"), table.get("config")) {
            (Some(_), Some(toml::Value::Table(cfg))) => cfg.clone(),
            _ => table,
        };
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub outputs: Vec<String>,
}

/// Written as `manifest.toml`; passing it back via `--config` re-runs the
/// same computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: RunInfo,
    pub config: RunConfig,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
