//! Structural and reduced-form analysis of moral choices made behind and in
//! front of a veil of ignorance.
//!
//! An agent chooses between a status-quo allocation `(e1, e2)` and a selfish
//! one `(e1 + G, e2 - L)`. Preferences combine aheadness aversion `beta`
//! with a degree of morality `kappa`; choices are logit with sensitivity
//! `sigma`. The crate covers the deterministic model ([`model`]), a seeded
//! experiment simulator ([`simulate`]), maximum-likelihood estimation of
//! representative agents and finite mixtures ([`estimate`]), linear
//! probability models with cluster-robust inference ([`regress`]) and Monte
//! Carlo power analysis ([`power`]).
//!
//! ```
//! use moralis::model::{kappa_threshold, PayoffTable};
//!
//! let table = PayoffTable::builtin();
//! let p1 = table.get(1).unwrap();
//! assert!((p1.z() - 0.6).abs() < 1e-12);
//! assert!((kappa_threshold(0.0, p1) - 1.5).abs() < 1e-12);
//! ```

pub mod config;
pub mod error;
pub mod estimate;
pub mod io;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod power;
pub mod regress;
pub mod simulate;

pub use error::Error;
pub use estimate::{
    fit_mixture, fit_representative, FitOptions, MixtureEstimate, MixtureOptions, RepresentativeEstimate,
};
pub use model::{Awareness, Frame, PayoffConfiguration, PayoffTable, PreferenceParameters};
pub use power::{power_simulation, PowerResult, PowerSpec};
pub use regress::{run_lpm, two_sample_tests, RegressionResult, RegressionSpec};
pub use simulate::{simulate_experiment, ChoiceDataset, ChoiceRecord, PopulationComponent, PopulationSpec};
