//! Maximum-likelihood estimation of the logit choice model.
//!
//! The likelihood depends on a record only through `(G, L, p_hat, choice)`,
//! so records are aggregated into cells of identical decision situations
//! before optimisation. Subject-level cells are kept for cluster-robust
//! scores and for the finite-mixture likelihood, which multiplies all of a
//! subject's records inside each type.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{EstimateError, ModelError};
use crate::model::{utility_difference, utility_full, Awareness, PayoffConfiguration, PreferenceParameters};
use crate::numeric::{log_sum_exp, logistic, pairwise_sum, softplus};
use crate::optim::{minimize, BfgsOptions};
use crate::simulate::{ChoiceDataset, ChoiceRecord};

/// Floor applied to a log-probability when the model assigns probability
/// zero to the observed choice.
pub const LOGLIK_FLOOR: f64 = -1e10;

/// Below this, the choice sensitivity is treated as collapsed to zero.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Relative eigenvalue tolerance for a singular information matrix.
pub const SINGULAR_TOL: f64 = 1e-10;

/// Log-likelihood contribution of one decision.
pub fn record_loglik(
    params: &PreferenceParameters,
    record: &ChoiceRecord,
    payoff: &PayoffConfiguration,
) -> Result<f64, ModelError> {
    let eta = params.sigma * utility_difference(params, payoff, record.awareness()?);
    // ln H(eta) = -softplus(-eta) keeps full precision when H is near 1
    let lp = if record.choice { -softplus(-eta) } else { -softplus(eta) };
    Ok(lp.max(LOGLIK_FLOOR))
}

/// Analytic gradient of [`record_loglik`] with respect to
/// `(beta, kappa, sigma)`.
pub fn record_score(
    params: &PreferenceParameters,
    record: &ChoiceRecord,
    payoff: &PayoffConfiguration,
) -> Result<[f64; 3], ModelError> {
    let cell = Cell::single(payoff, record.awareness()?, record.choice);
    Ok(cell_score(params, &cell).into())
}

/// Sum of [`record_loglik`] over the dataset.
pub fn dataset_loglik(params: &PreferenceParameters, dataset: &ChoiceDataset) -> Result<f64, ModelError> {
    let terms = dataset
        .records
        .iter()
        .map(|r| record_loglik(params, r, dataset.payoff(r.payoff_id)?))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pairwise_sum(&terms))
}

/// Identical decision situations with (possibly weighted) choice counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub g: f64,
    pub l: f64,
    /// `(1 - p_hat) / p_hat`
    pub odds: f64,
    pub n_selfish: f64,
    pub n_status_quo: f64,
}

impl Cell {
    fn single(payoff: &PayoffConfiguration, awareness: Awareness, choice: bool) -> Self {
        Self {
            g: payoff.g,
            l: payoff.l,
            odds: awareness.reversal_odds(),
            n_selfish: f64::from(u8::from(choice)),
            n_status_quo: f64::from(u8::from(!choice)),
        }
    }

    fn delta(&self, p: &PreferenceParameters) -> f64 {
        self.g - p.beta * (self.g + self.l) - p.kappa * self.l * self.odds
    }
}

fn cell_loglik(p: &PreferenceParameters, c: &Cell) -> f64 {
    let eta = p.sigma * c.delta(p);
    let mut ll = 0.0;
    if c.n_selfish > 0.0 {
        ll += c.n_selfish * (-softplus(-eta)).max(LOGLIK_FLOOR);
    }
    if c.n_status_quo > 0.0 {
        ll += c.n_status_quo * (-softplus(eta)).max(LOGLIK_FLOOR);
    }
    ll
}

/// Gradient with respect to `(beta, kappa, sigma)`.
fn cell_score(p: &PreferenceParameters, c: &Cell) -> Vector3<f64> {
    let delta = c.delta(p);
    let eta = p.sigma * delta;
    let r = c.n_selfish * logistic(-eta) - c.n_status_quo * logistic(eta);
    Vector3::new(-r * p.sigma * (c.g + c.l), -r * p.sigma * c.l * c.odds, r * delta)
}

/// Hessian with respect to `(beta, kappa, sigma)`.
fn cell_hessian(p: &PreferenceParameters, c: &Cell) -> Matrix3<f64> {
    let delta = c.delta(p);
    let eta = p.sigma * delta;
    let (prob, comp) = (logistic(eta), logistic(-eta));
    let n = c.n_selfish + c.n_status_quo;
    let r = c.n_selfish * comp - c.n_status_quo * prob;
    let a = Vector3::new(-p.sigma * (c.g + c.l), -p.sigma * c.l * c.odds, delta);
    let mut h = -n * prob * comp * a * a.transpose();
    let cross_beta = -(c.g + c.l);
    let cross_kappa = -c.l * c.odds;
    h[(0, 2)] += r * cross_beta;
    h[(2, 0)] += r * cross_beta;
    h[(1, 2)] += r * cross_kappa;
    h[(2, 1)] += r * cross_kappa;
    h
}

fn cells_loglik(p: &PreferenceParameters, cells: &[Cell]) -> f64 {
    let v: Vec<f64> = cells.iter().map(|c| cell_loglik(p, c)).collect();
    pairwise_sum(&v)
}

fn cells_score(p: &PreferenceParameters, cells: &[Cell]) -> Vector3<f64> {
    cells.iter().fold(Vector3::zeros(), |acc, c| acc + cell_score(p, c))
}

fn cells_hessian(p: &PreferenceParameters, cells: &[Cell]) -> Matrix3<f64> {
    cells.iter().fold(Matrix3::zeros(), |acc, c| acc + cell_hessian(p, c))
}

/// A subject's records aggregated into cells; `cell_ids` index the global
/// cell list of [`Prepared`].
#[derive(Debug, Clone)]
struct SubjectCells {
    subject_id: u32,
    cells: Vec<Cell>,
    cell_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Prepared {
    subjects: Vec<SubjectCells>,
    /// Distinct decision situations (counts zeroed).
    templates: Vec<Cell>,
    n_obs: usize,
}

impl Prepared {
    fn new(dataset: &ChoiceDataset) -> Result<Self, EstimateError> {
        if dataset.is_empty() {
            return Err(EstimateError::EmptyDataset);
        }
        let mut keys: BTreeMap<(u32, u64), usize> = BTreeMap::new();
        let mut templates = Vec::new();
        let mut per_subject: BTreeMap<u32, BTreeMap<usize, Cell>> = BTreeMap::new();
        for r in &dataset.records {
            let payoff = dataset.payoff(r.payoff_id)?;
            let awareness = r.awareness()?;
            let next = templates.len();
            let id = *keys.entry((r.payoff_id, r.p_hat.to_bits())).or_insert(next);
            if id == next {
                let mut t = Cell::single(payoff, awareness, false);
                t.n_status_quo = 0.0;
                templates.push(t);
            }
            let cell = per_subject
                .entry(r.subject_id)
                .or_default()
                .entry(id)
                .or_insert(templates[id]);
            if r.choice {
                cell.n_selfish += 1.0;
            } else {
                cell.n_status_quo += 1.0;
            }
        }
        let subjects = per_subject
            .into_iter()
            .map(|(subject_id, cells)| SubjectCells {
                subject_id,
                cell_ids: cells.keys().copied().collect(),
                cells: cells.into_values().collect(),
            })
            .collect();
        Ok(Self {
            subjects,
            templates,
            n_obs: dataset.len(),
        })
    }

    /// Pools subject cells with per-subject weights.
    fn pooled(&self, weights: Option<&[f64]>) -> Vec<Cell> {
        let mut out = self.templates.clone();
        for (i, s) in self.subjects.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            for (c, &id) in s.cells.iter().zip(&s.cell_ids) {
                out[id].n_selfish += w * c.n_selfish;
                out[id].n_status_quo += w * c.n_status_quo;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Beta,
    Kappa,
    Sigma,
}

impl Param {
    pub const ALL: [Param; 3] = [Param::Beta, Param::Kappa, Param::Sigma];

    pub fn index(self) -> usize {
        match self {
            Param::Beta => 0,
            Param::Kappa => 1,
            Param::Sigma => 2,
        }
    }

    pub fn value(self, p: &PreferenceParameters) -> f64 {
        match self {
            Param::Beta => p.beta,
            Param::Kappa => p.kappa,
            Param::Sigma => p.sigma,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::Beta => "beta",
            Param::Kappa => "kappa",
            Param::Sigma => "sigma",
        }
    }
}

impl FromStr for Param {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "beta" => Ok(Param::Beta),
            "kappa" => Ok(Param::Kappa),
            "sigma" => Ok(Param::Sigma),
            other => Err(ModelError::Parse(format!("unknown parameter `{other}`"))),
        }
    }
}

/// Optional box constraints on the estimated parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub beta: Option<(f64, f64)>,
    pub kappa: Option<(f64, f64)>,
    pub sigma: Option<(f64, f64)>,
}

/// Maps an unconstrained optimiser coordinate to a parameter value.
#[derive(Debug, Clone, Copy)]
enum Coord {
    Free,
    Exp,
    Interval(f64, f64),
}

impl Coord {
    /// Value and derivative d value / d u.
    fn forward(self, u: f64) -> (f64, f64) {
        match self {
            Coord::Free => (u, 1.0),
            Coord::Exp => {
                let v = u.exp();
                (v, v)
            }
            Coord::Interval(lo, hi) => {
                let s = crate::numeric::logistic(u);
                (lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s))
            }
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            Coord::Free => v,
            Coord::Exp => v.max(1e-300).ln(),
            Coord::Interval(lo, hi) => {
                let s = ((v - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
                (s / (1.0 - s)).ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Transform([Coord; 3]);

impl Transform {
    fn new(bounds: &Bounds) -> Result<Self, EstimateError> {
        let interval = |b: Option<(f64, f64)>, default: Coord, name: &str| match b {
            None => Ok(default),
            Some((lo, hi)) if lo < hi && lo.is_finite() && hi.is_finite() => Ok(Coord::Interval(lo, hi)),
            Some(_) => Err(EstimateError::InvalidOptions(format!("bad bounds for {name}"))),
        };
        let sigma = match bounds.sigma {
            Some((lo, _)) if lo < 0.0 => return Err(EstimateError::InvalidOptions("sigma bounds must be >= 0".into())),
            b => interval(b, Coord::Exp, "sigma")?,
        };
        Ok(Self([
            interval(bounds.beta, Coord::Free, "beta")?,
            interval(bounds.kappa, Coord::Free, "kappa")?,
            sigma,
        ]))
    }

    fn params(&self, u: &[f64]) -> (PreferenceParameters, Vector3<f64>) {
        let (b, db) = self.0[0].forward(u[0]);
        let (k, dk) = self.0[1].forward(u[1]);
        let (s, ds) = self.0[2].forward(u[2]);
        (PreferenceParameters::new(b, k, s), Vector3::new(db, dk, ds))
    }

    fn coords(&self, p: &PreferenceParameters) -> [f64; 3] {
        [
            self.0[0].inverse(p.beta),
            self.0[1].inverse(p.kappa),
            self.0[2].inverse(p.sigma),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Number of random starting points.
    pub starts: usize,
    /// Gradient tolerance on the per-observation log-likelihood.
    pub tolerance: f64,
    pub max_iter: usize,
    pub bounds: Bounds,
    /// Seed of the start-point generator.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 20,
            tolerance: 1e-9,
            max_iter: 2000,
            bounds: Bounds::default(),
            seed: 20211122,
        }
    }
}

impl FitOptions {
    fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            max_iter: self.max_iter,
            grad_tol: self.tolerance,
            ..BfgsOptions::default()
        }
    }
}

fn draw_start<R: Rng>(rng: &mut R) -> PreferenceParameters {
    let beta = rng.random_range(-0.5..0.8);
    let kappa = rng.random_range(0.0..1.5);
    let sigma = 0.5 * (1.0 - rng.random::<f64>());
    PreferenceParameters::new(beta, kappa, sigma)
}

#[derive(Debug, Clone)]
struct LocalFit {
    params: PreferenceParameters,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

/// Maximises the (weighted) cell log-likelihood from `start`.
fn fit_cells(cells: &[Cell], start: &PreferenceParameters, transform: &Transform, opts: &BfgsOptions) -> LocalFit {
    let total: f64 = cells.iter().map(|c| c.n_selfish + c.n_status_quo).sum();
    let scale = 1.0 / total.max(1e-300);
    let objective = |u: &[f64]| {
        let (p, d) = transform.params(u);
        let ll = cells_loglik(&p, cells);
        let g = cells_score(&p, cells).component_mul(&d);
        (-ll * scale, vec![-g[0] * scale, -g[1] * scale, -g[2] * scale])
    };
    let r = minimize(objective, &transform.coords(start), opts);
    let (params, _) = transform.params(&r.x);
    LocalFit {
        params,
        loglik: cells_loglik(&params, cells),
        converged: r.converged && r.f.is_finite(),
        iterations: r.iterations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeEstimate {
    pub params: PreferenceParameters,
    pub loglik: f64,
    /// Inverse observed information, `(beta, kappa, sigma)` order.
    pub covariance_plain: Matrix3<f64>,
    /// Subject-clustered sandwich with factor C/(C-1); `None` with fewer
    /// than two clusters.
    pub covariance_clustered: Option<Matrix3<f64>>,
    pub n_obs: usize,
    pub n_subjects: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl RepresentativeEstimate {
    pub fn se_plain(&self, p: Param) -> f64 {
        self.covariance_plain[(p.index(), p.index())].max(0.0).sqrt()
    }

    pub fn se_clustered(&self, p: Param) -> Option<f64> {
        self.covariance_clustered
            .map(|c| c[(p.index(), p.index())].max(0.0).sqrt())
    }
}

/// Smallest eigenvalue of `m` relative to its largest magnitude.
fn relative_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.amax();
    if max == 0.0 {
        return 0.0;
    }
    eig.eigenvalues.min() / max
}

/// Rank of the regressors `(G, G + L, L * odds)` over distinct situations.
fn design_rank(templates: &[Cell]) -> usize {
    let rows: Vec<f64> = templates.iter().flat_map(|c| [c.g, c.g + c.l, c.l * c.odds]).collect();
    let m = DMatrix::from_row_slice(templates.len(), 3, &rows);
    let tol = 1e-9 * m.norm().max(1.0);
    m.svd(false, false).singular_values.iter().filter(|&&s| s > tol).count()
}

/// Pooled maximum-likelihood estimate of a single `(beta, kappa, sigma)`.
pub fn fit_representative(
    dataset: &ChoiceDataset,
    options: &FitOptions,
) -> Result<RepresentativeEstimate, EstimateError> {
    if options.starts == 0 {
        return Err(EstimateError::InvalidOptions("starts must be >= 1".into()));
    }
    let prepared = Prepared::new(dataset)?;
    let cells = prepared.pooled(None);
    let selfish: f64 = cells.iter().map(|c| c.n_selfish).sum();
    if selfish == 0.0 || selfish == prepared.n_obs as f64 {
        return Err(EstimateError::DegenerateData(format!(
            "all {} choices identical; sigma diverges to the boundary",
            prepared.n_obs
        )));
    }
    if design_rank(&prepared.templates) < 3 {
        return Err(EstimateError::IdentificationFailure(
            "fewer than three linearly independent decision situations \
             (kappa needs VOI or partially aware decisions)"
                .into(),
        ));
    }
    let transform = Transform::new(&options.bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let starts: Vec<PreferenceParameters> = (0..options.starts).map(|_| draw_start(&mut rng)).collect();
    let bfgs = options.bfgs();
    let fits: Vec<LocalFit> = starts
        .par_iter()
        .map(|s| fit_cells(&cells, s, &transform, &bfgs))
        .collect();
    let best = best_fit(&fits);
    finish_representative(&prepared, &cells, best, &transform)
}

fn best_fit(fits: &[LocalFit]) -> &LocalFit {
    let mut best = &fits[0];
    for f in &fits[1..] {
        let better = f.loglik > best.loglik + 1e-9 * best.loglik.abs()
            || (f.loglik >= best.loglik - 1e-9 * best.loglik.abs() && f.converged && !best.converged);
        if better {
            best = f;
        }
    }
    best
}

fn finish_representative(
    prepared: &Prepared,
    cells: &[Cell],
    best: &LocalFit,
    transform: &Transform,
) -> Result<RepresentativeEstimate, EstimateError> {
    let p = best.params;
    if p.sigma < SIGMA_FLOOR {
        return Err(EstimateError::IdentificationFailure(format!(
            "choice sensitivity collapsed to {:.3e}; beta and kappa are not identified",
            p.sigma
        )));
    }
    // information in optimiser coordinates, then delta method back
    let (_, d) = transform.params(&transform.coords(&p));
    let jac = Matrix3::from_diagonal(&d);
    let h_nat = cells_hessian(&p, cells);
    let g_nat = cells_score(&p, cells);
    let mut h_u = jac * h_nat * jac;
    // second-derivative term of the reparameterisation (vanishes at an
    // interior optimum)
    for (j, coord) in transform.0.iter().enumerate() {
        let u = transform.coords(&p)[j];
        let second = match *coord {
            Coord::Free => 0.0,
            Coord::Exp => u.exp(),
            Coord::Interval(lo, hi) => {
                let s = crate::numeric::logistic(u);
                (hi - lo) * s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        };
        h_u[(j, j)] += g_nat[j] * second;
    }
    let info = -h_u;
    let info_d = DMatrix::from_column_slice(3, 3, info.as_slice());
    let rel = relative_min_eigenvalue(&info_d);
    if rel.is_nan() || rel <= SINGULAR_TOL {
        return Err(EstimateError::IdentificationFailure(format!(
            "observed information singular at the optimum (relative min eigenvalue {rel:.3e})"
        )));
    }
    let info_inv = info
        .try_inverse()
        .ok_or_else(|| EstimateError::IdentificationFailure("information not invertible".into()))?;
    let covariance_plain = jac * info_inv * jac;

    let c = prepared.subjects.len();
    let covariance_clustered = (c >= 2).then(|| {
        let scores: Vec<Vector3<f64>> = prepared
            .subjects
            .par_iter()
            .map(|s| cells_score(&p, &s.cells).component_mul(&d))
            .collect();
        let meat = scores.iter().fold(Matrix3::zeros(), |acc, s| acc + s * s.transpose());
        let factor = c as f64 / (c as f64 - 1.0);
        jac * (info_inv * meat * info_inv * factor) * jac
    });

    let est = RepresentativeEstimate {
        params: p,
        loglik: best.loglik,
        covariance_plain,
        covariance_clustered,
        n_obs: prepared.n_obs,
        n_subjects: c,
        converged: best.converged,
        iterations: best.iterations,
    };
    if !best.converged {
        return Err(EstimateError::NonConvergence(Box::new(est)));
    }
    Ok(est)
}

/// Representative fit on a single subject's records. Individual estimates
/// are generally not identified (see [`crate::model::feasible_region`]);
/// this exists for exploration only.
pub fn fit_individual_experimental(
    dataset: &ChoiceDataset,
    subject_id: u32,
    options: &FitOptions,
) -> Result<RepresentativeEstimate, EstimateError> {
    let one = dataset.filter(|r| r.subject_id == subject_id);
    fit_representative(&one, options)
}

/// Evenly spaced grid axis `start, start + step, ..., <= stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Axis {
    pub fn new(start: f64, stop: f64, step: f64) -> Self {
        Self { start, stop, step }
    }

    pub fn points(&self) -> Vec<f64> {
        if self.step.is_nan() || self.step <= 0.0 || self.stop < self.start {
            return vec![self.start];
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub beta: Axis,
    pub kappa: Axis,
    pub sigma: Axis,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            beta: Axis::new(-1.0, 1.0, 0.02),
            kappa: Axis::new(0.0, 2.0, 0.02),
            sigma: Axis::new(0.0, 1.0, 0.005),
        }
    }
}

/// Exhaustive evaluation of the pooled log-likelihood on a grid. The
/// deterministic utility difference is taken from the full utility
/// function, `[U(1) - U(0)] / p_hat`, independently of the closed form used
/// by the optimiser. Ties go to the lexicographically smallest
/// `(beta, kappa, sigma)`.
pub fn grid_search_oracle(
    dataset: &ChoiceDataset,
    grid: &GridSpec,
) -> Result<(PreferenceParameters, f64), EstimateError> {
    if dataset.is_empty() {
        return Err(EstimateError::EmptyDataset);
    }
    // (payoff, p_hat) -> (selfish, status quo)
    let mut counts: BTreeMap<(u32, u64), (f64, f64)> = BTreeMap::new();
    for r in &dataset.records {
        let e = counts.entry((r.payoff_id, r.p_hat.to_bits())).or_default();
        if r.choice {
            e.0 += 1.0;
        } else {
            e.1 += 1.0;
        }
    }
    let situations: Vec<(PayoffConfiguration, Awareness, f64, f64)> = counts
        .iter()
        .map(|(&(id, bits), &(n1, n0))| Ok((*dataset.payoff(id)?, Awareness::new(f64::from_bits(bits))?, n1, n0)))
        .collect::<Result<_, ModelError>>()?;

    let betas = grid.beta.points();
    let kappas = grid.kappa.points();
    let sigmas = grid.sigma.points();
    let bk: Vec<(f64, f64)> = betas
        .iter()
        .flat_map(|&b| kappas.iter().map(move |&k| (b, k)))
        .collect();

    let per_bk: Vec<(usize, usize, f64)> = bk
        .par_iter()
        .enumerate()
        .map(|(i, &(b, k))| {
            let params = PreferenceParameters::new(b, k, 0.0);
            let deltas: Vec<f64> = situations
                .iter()
                .map(|(payoff, a, _, _)| {
                    let u1 = utility_full(&params, payoff, *a, true, false);
                    let u0 = utility_full(&params, payoff, *a, false, false);
                    (u1 - u0) / a.value()
                })
                .collect();
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (j, &s) in sigmas.iter().enumerate() {
                let mut ll = 0.0;
                for (d, (_, _, n1, n0)) in deltas.iter().zip(&situations) {
                    let eta = s * d;
                    // ln H(eta) and ln(1 - H(eta))
                    let lp1 = -(1.0 + (-eta).exp()).ln();
                    let lp0 = -(1.0 + eta.exp()).ln();
                    ll += n1 * lp1 + n0 * lp0;
                }
                if ll > best.1 {
                    best = (j, ll);
                }
            }
            (i, best.0, best.1)
        })
        .collect();

    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    for &(i, j, ll) in &per_bk {
        if ll > best.2 {
            best = (i, j, ll);
        }
    }
    let (b, k) = bk[best.0];
    Ok((PreferenceParameters::new(b, k, sigmas[best.1]), best.2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureMethod {
    /// Expectation-maximisation with weighted representative M-steps.
    Em,
    /// Direct quasi-Newton maximisation of the mixture likelihood.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureOptions {
    pub starts: usize,
    pub em_tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub method: MixtureMethod,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self {
            starts: 10,
            em_tolerance: 1e-9,
            max_iter: 5000,
            seed: 20211122,
            method: MixtureMethod::Em,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeEstimate {
    pub params: PreferenceParameters,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEstimate {
    /// Types ordered by descending share.
    pub types: Vec<TypeEstimate>,
    pub loglik: f64,
    /// Parameter order: `(beta_k, kappa_k, sigma_k)` for each type, then the
    /// first K-1 shares. `None` when the information matrix is singular.
    pub covariance_plain: Option<DMatrix<f64>>,
    pub covariance_clustered: Option<DMatrix<f64>>,
    /// `n_subjects x K`, rows follow `subject_ids`.
    pub posteriors: DMatrix<f64>,
    pub subject_ids: Vec<u32>,
    pub n_em_iterations: usize,
    /// Log-likelihood after each E-step of the winning start.
    pub loglik_trace: Vec<f64>,
    pub n_obs: usize,
    pub converged: bool,
}

impl MixtureEstimate {
    pub fn k(&self) -> usize {
        self.types.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    fn se_from(cov: &Option<DMatrix<f64>>, idx: usize) -> Option<f64> {
        cov.as_ref().map(|c| c[(idx, idx)].max(0.0).sqrt())
    }

    pub fn se_plain(&self, k: usize, p: Param) -> Option<f64> {
        Self::se_from(&self.covariance_plain, 3 * k + p.index())
    }

    pub fn se_clustered(&self, k: usize, p: Param) -> Option<f64> {
        Self::se_from(&self.covariance_clustered, 3 * k + p.index())
    }

    fn share_se(&self, cov: &Option<DMatrix<f64>>, k: usize) -> Option<f64> {
        let cov = cov.as_ref()?;
        let kk = self.k();
        let base = 3 * kk;
        if kk == 1 {
            return Some(0.0);
        }
        if k + 1 < kk {
            return Some(cov[(base + k, base + k)].max(0.0).sqrt());
        }
        // last share = 1 - sum of the others
        let block = cov.view((base, base), (kk - 1, kk - 1));
        Some(block.sum().max(0.0).sqrt())
    }

    pub fn share_se_plain(&self, k: usize) -> Option<f64> {
        self.share_se(&self.covariance_plain, k)
    }

    pub fn share_se_clustered(&self, k: usize) -> Option<f64> {
        self.share_se(&self.covariance_clustered, k)
    }
}

/// `log f_k(x_i)` for every subject and type.
fn subject_logliks(prepared: &Prepared, types: &[PreferenceParameters]) -> Vec<Vec<f64>> {
    prepared
        .subjects
        .par_iter()
        .map(|s| types.iter().map(|p| cells_loglik(p, &s.cells)).collect())
        .collect()
}

/// Posterior membership matrix and total mixture log-likelihood.
fn e_step(prepared: &Prepared, types: &[PreferenceParameters], shares: &[f64]) -> (Vec<Vec<f64>>, f64) {
    let lf = subject_logliks(prepared, types);
    let log_shares: Vec<f64> = shares.iter().map(|s| s.ln()).collect();
    let rows: Vec<(Vec<f64>, f64)> = lf
        .iter()
        .map(|row| {
            let a: Vec<f64> = row.iter().zip(&log_shares).map(|(l, s)| l + s).collect();
            let lse = log_sum_exp(&a);
            (a.iter().map(|v| (v - lse).exp()).collect(), lse)
        })
        .collect();
    let ll = pairwise_sum(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    (rows.into_iter().map(|r| r.0).collect(), ll)
}

#[derive(Debug, Clone)]
struct EmRun {
    types: Vec<PreferenceParameters>,
    shares: Vec<f64>,
    loglik: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn em_run(
    prepared: &Prepared,
    mut types: Vec<PreferenceParameters>,
    mut shares: Vec<f64>,
    options: &MixtureOptions,
) -> EmRun {
    let transform = Transform::new(&Bounds::default()).expect("default bounds");
    let bfgs = BfgsOptions {
        grad_tol: 1e-10,
        ..BfgsOptions::default()
    };
    let n = prepared.subjects.len() as f64;
    let k = types.len();
    let mut trace = Vec::new();
    let (mut tau, mut ll) = e_step(prepared, &types, &shares);
    trace.push(ll);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        for j in 0..k {
            let w: Vec<f64> = tau.iter().map(|row| row[j]).collect();
            let total: f64 = w.iter().sum();
            shares[j] = total / n;
            if total < 1e-12 {
                continue;
            }
            let cells = prepared.pooled(Some(&w));
            let current = cells_loglik(&types[j], &cells);
            let fit = fit_cells(&cells, &types[j], &transform, &bfgs);
            if fit.loglik >= current && fit.params.sigma.is_finite() {
                types[j] = fit.params;
            }
        }
        let floor = 1e-300;
        if shares.iter().any(|&s| s < floor) {
            for s in shares.iter_mut() {
                *s = s.max(floor);
            }
            let t: f64 = shares.iter().sum();
            shares.iter_mut().for_each(|s| *s /= t);
        }
        let (t, l) = e_step(prepared, &types, &shares);
        trace.push(l);
        let improvement = l - ll;
        tau = t;
        ll = l;
        if improvement < options.em_tolerance {
            converged = true;
            break;
        }
    }
    // shares consistent with the final posteriors
    for (j, s) in shares.iter_mut().enumerate() {
        *s = tau.iter().map(|row| row[j]).sum::<f64>() / n;
    }
    EmRun {
        types,
        shares,
        loglik: ll,
        trace,
        iterations,
        converged,
    }
}

/// Direct maximisation over `(beta_k, kappa_k, log sigma_k)` and share
/// logits (last logit fixed at 0).
fn direct_run(
    prepared: &Prepared,
    types: Vec<PreferenceParameters>,
    shares: Vec<f64>,
    options: &MixtureOptions,
) -> EmRun {
    let k = types.len();
    let mut x0 = Vec::with_capacity(4 * k - 1);
    for p in &types {
        x0.extend([p.beta, p.kappa, p.sigma.ln()]);
    }
    for j in 0..k - 1 {
        x0.push((shares[j] / shares[k - 1]).ln());
    }
    let unpack = |x: &[f64]| {
        let types: Vec<PreferenceParameters> = (0..k)
            .map(|j| PreferenceParameters::new(x[3 * j], x[3 * j + 1], x[3 * j + 2].exp()))
            .collect();
        let mut logits: Vec<f64> = x[3 * k..].to_vec();
        logits.push(0.0);
        let lse = log_sum_exp(&logits);
        let shares: Vec<f64> = logits.iter().map(|a| (a - lse).exp()).collect();
        (types, shares)
    };
    let scale = 1.0 / prepared.n_obs as f64;
    let objective = |x: &[f64]| {
        let (types, shares) = unpack(x);
        let (tau, ll) = e_step(prepared, &types, &shares);
        let mut g = vec![0.0; 4 * k - 1];
        for (s, row) in prepared.subjects.iter().zip(&tau) {
            for j in 0..k {
                let sc = cells_score(&types[j], &s.cells);
                g[3 * j] += row[j] * sc[0];
                g[3 * j + 1] += row[j] * sc[1];
                g[3 * j + 2] += row[j] * sc[2] * types[j].sigma;
            }
            for j in 0..k - 1 {
                g[3 * k + j] += row[j] - shares[j];
            }
        }
        (-ll * scale, g.iter().map(|v| -v * scale).collect())
    };
    let opts = BfgsOptions {
        max_iter: options.max_iter,
        grad_tol: 1e-10,
        ..BfgsOptions::default()
    };
    let r = minimize(objective, &x0, &opts);
    let (types, shares) = unpack(&r.x);
    let (_, ll) = e_step(prepared, &types, &shares);
    EmRun {
        types,
        shares,
        loglik: ll,
        trace: vec![ll],
        iterations: r.iterations,
        converged: r.converged,
    }
}

/// Per-subject score of the mixture log-likelihood in natural parameters.
fn mixture_scores(prepared: &Prepared, types: &[PreferenceParameters], shares: &[f64]) -> Vec<DVector<f64>> {
    let k = types.len();
    let (tau, _) = e_step(prepared, types, shares);
    prepared
        .subjects
        .iter()
        .zip(&tau)
        .map(|(s, row)| {
            let mut v = DVector::zeros(4 * k - 1);
            for j in 0..k {
                let sc = cells_score(&types[j], &s.cells);
                for m in 0..3 {
                    v[3 * j + m] = row[j] * sc[m];
                }
            }
            for j in 0..k - 1 {
                v[3 * k + j] = row[j] / shares[j] - row[k - 1] / shares[k - 1];
            }
            v
        })
        .collect()
}

fn unpack_natural(theta: &DVector<f64>, k: usize) -> (Vec<PreferenceParameters>, Vec<f64>) {
    let types = (0..k)
        .map(|j| PreferenceParameters::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]))
        .collect();
    let mut shares: Vec<f64> = (0..k - 1).map(|j| theta[3 * k + j]).collect();
    shares.push(1.0 - shares.iter().sum::<f64>());
    (types, shares)
}

/// Plain and clustered covariance of the mixture parameters; the Hessian is
/// a central difference of the analytic total score.
fn mixture_covariance(
    prepared: &Prepared,
    types: &[PreferenceParameters],
    shares: &[f64],
) -> (Option<DMatrix<f64>>, Option<DMatrix<f64>>) {
    let k = types.len();
    let dim = 4 * k - 1;
    let mut theta = DVector::zeros(dim);
    for (j, p) in types.iter().enumerate() {
        theta[3 * j] = p.beta;
        theta[3 * j + 1] = p.kappa;
        theta[3 * j + 2] = p.sigma;
    }
    for j in 0..k - 1 {
        theta[3 * k + j] = shares[j];
    }
    let total_score = |th: &DVector<f64>| {
        let (t, s) = unpack_natural(th, k);
        if t.iter().any(|p| p.sigma <= 0.0) || s.iter().any(|&v| v <= 0.0) {
            return None;
        }
        Some(
            mixture_scores(prepared, &t, &s)
                .iter()
                .fold(DVector::zeros(dim), |acc, v| acc + v),
        )
    };
    let mut h = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let step = 1e-5 * theta[j].abs().max(1e-2);
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += step;
        dn[j] -= step;
        let (Some(su), Some(sd)) = (total_score(&up), total_score(&dn)) else {
            return (None, None);
        };
        h.set_column(j, &((su - sd) / (2.0 * step)));
    }
    let h = (&h + h.transpose()) * 0.5;
    let info = -h;
    let rel = relative_min_eigenvalue(&info);
    if rel.is_nan() || rel <= SINGULAR_TOL {
        return (None, None);
    }
    let Some(info_inv) = info.try_inverse() else {
        return (None, None);
    };
    let scores = mixture_scores(prepared, types, shares);
    let c = scores.len();
    let clustered = (c >= 2).then(|| {
        let meat = scores
            .iter()
            .fold(DMatrix::zeros(dim, dim), |acc, s| acc + s * s.transpose());
        &info_inv * meat * &info_inv * (c as f64 / (c as f64 - 1.0))
    });
    (Some(info_inv), clustered)
}

/// Finite mixture of `k` preference types over subjects.
pub fn fit_mixture(
    dataset: &ChoiceDataset,
    k: usize,
    options: &MixtureOptions,
) -> Result<MixtureEstimate, EstimateError> {
    if k == 0 {
        return Err(EstimateError::InvalidOptions("K must be >= 1".into()));
    }
    if options.starts == 0 {
        return Err(EstimateError::InvalidOptions("starts must be >= 1".into()));
    }
    let prepared = Prepared::new(dataset)?;
    let pooled = prepared.pooled(None);
    let selfish: f64 = pooled.iter().map(|c| c.n_selfish).sum();
    if selfish == 0.0 || selfish == prepared.n_obs as f64 {
        return Err(EstimateError::DegenerateData(format!(
            "all {} choices identical",
            prepared.n_obs
        )));
    }
    if design_rank(&prepared.templates) < 3 {
        return Err(EstimateError::IdentificationFailure(
            "fewer than three linearly independent decision situations".into(),
        ));
    }

    let inits: Vec<(Vec<PreferenceParameters>, Vec<f64>)> = (0..options.starts)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(r as u64);
            let types: Vec<_> = (0..k).map(|_| draw_start(&mut rng)).collect();
            (types, vec![1.0 / k as f64; k])
        })
        .collect();
    let runs: Vec<EmRun> = inits
        .into_par_iter()
        .map(|(t, s)| match options.method {
            MixtureMethod::Em => em_run(&prepared, t, s, options),
            MixtureMethod::Direct => direct_run(&prepared, t, s, options),
        })
        .collect();
    let mut best = &runs[0];
    for r in &runs[1..] {
        if r.loglik > best.loglik + 1e-9 * best.loglik.abs() {
            best = r;
        }
    }

    // label order: descending share, then descending beta
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        best.shares[b]
            .total_cmp(&best.shares[a])
            .then(best.types[b].beta.total_cmp(&best.types[a].beta))
    });
    let types: Vec<PreferenceParameters> = order.iter().map(|&j| best.types[j]).collect();
    let shares: Vec<f64> = order.iter().map(|&j| best.shares[j]).collect();

    let (tau, loglik) = e_step(&prepared, &types, &shares);
    let n = prepared.subjects.len();
    let posteriors = DMatrix::from_fn(n, k, |i, j| tau[i][j]);
    let (covariance_plain, covariance_clustered) = if k == 1 {
        let est = mixture_covariance(&prepared, &types, &shares);
        (est.0, est.1)
    } else {
        mixture_covariance(&prepared, &types, &shares)
    };

    let estimate = MixtureEstimate {
        types: types
            .iter()
            .zip(&shares)
            .map(|(&params, &share)| TypeEstimate { params, share })
            .collect(),
        loglik,
        covariance_plain,
        covariance_clustered,
        posteriors,
        subject_ids: prepared.subjects.iter().map(|s| s.subject_id).collect(),
        n_em_iterations: best.iterations,
        loglik_trace: best.trace.clone(),
        n_obs: prepared.n_obs,
        converged: best.converged,
    };

    let min_share = 1.0 / (10.0 * n as f64);
    if let Some((j, t)) = estimate.types.iter().enumerate().find(|(_, t)| t.share < min_share) {
        return Err(EstimateError::LabelDegeneracy {
            k: j,
            share: t.share,
            estimate: Box::new(estimate.clone()),
        });
    }
    if !estimate.converged {
        return Err(EstimateError::MixtureNonConvergence(Box::new(estimate)));
    }
    Ok(estimate)
}

/// Posterior type-membership probabilities, computed in log space.
pub fn posteriors(mixture: &MixtureEstimate, dataset: &ChoiceDataset) -> Result<DMatrix<f64>, EstimateError> {
    let prepared = Prepared::new(dataset)?;
    let types: Vec<PreferenceParameters> = mixture.types.iter().map(|t| t.params).collect();
    let shares: Vec<f64> = mixture.types.iter().map(|t| t.share).collect();
    let (tau, _) = e_step(&prepared, &types, &shares);
    Ok(DMatrix::from_fn(tau.len(), types.len(), |i, j| tau[i][j]))
}

/// Labels each subject with the type whose posterior reaches `cut`
/// (`None` = unclassified). With `cut = 0` every subject gets its argmax.
pub fn classify_subjects(tau: &DMatrix<f64>, cut: f64) -> Vec<Option<usize>> {
    tau.row_iter()
        .map(|row| {
            let (j, &v) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |b, (j, v)| if v > b.1 { (j, v) } else { b });
            (v >= cut).then_some(j)
        })
        .collect()
}

/// z-test of equal parameters across two independent fits using clustered
/// standard errors. Returns `(z, two-sided p-value)`.
pub fn compare_frames(
    fit_a: &RepresentativeEstimate,
    fit_b: &RepresentativeEstimate,
    param: Param,
) -> Result<(f64, f64), EstimateError> {
    let se_a = fit_a
        .se_clustered(param)
        .ok_or(EstimateError::MissingClusteredCovariance)?;
    let se_b = fit_b
        .se_clustered(param)
        .ok_or(EstimateError::MissingClusteredCovariance)?;
    let diff = param.value(&fit_a.params) - param.value(&fit_b.params);
    if diff == 0.0 {
        return Ok((0.0, 1.0));
    }
    let z = diff / (se_a * se_a + se_b * se_b).sqrt();
    Ok((z, two_sided_normal_p(z)))
}

pub(crate) fn two_sided_normal_p(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Frame, PayoffTable};
    use crate::simulate::{
        choice_probability, simulate_experiment, Arm, PopulationComponent, PopulationSpec, TreatmentPlan,
    };
    use approx::assert_abs_diff_eq;

    fn table() -> PayoffTable {
        PayoffTable::builtin()
    }

    fn rec(subject: u32, payoff: u32, voi: bool, choice: bool) -> ChoiceRecord {
        ChoiceRecord {
            subject_id: subject,
            arm: Arm::N,
            sequence: if voi { 2 } else { 1 },
            payoff_id: payoff,
            frame: Frame::Neutral,
            voi,
            p_hat: if voi { 0.5 } else { 1.0 },
            choice,
            controls: vec![],
        }
    }

    fn simulated(params: PreferenceParameters, n: usize, seed: u64) -> ChoiceDataset {
        let pop = PopulationSpec::single(params).unwrap();
        simulate_experiment(&pop, &[(TreatmentPlan::for_table(Arm::N, &table()), n)], &table(), seed).unwrap()
    }

    #[test]
    fn record_loglik_examples() {
        let p1 = *table().get(1).unwrap();
        let r = rec(1, 1, false, true);
        let zero = PreferenceParameters::new(0.4, 0.1, 0.0);
        assert_abs_diff_eq!(record_loglik(&zero, &r, &p1).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        let p = PreferenceParameters::new(0.0, 0.0, 0.295);
        let expected = (1.0 / (1.0 + (-4.425f64).exp())).ln();
        assert_abs_diff_eq!(record_loglik(&p, &r, &p1).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, -0.0119, epsilon = 5e-5);
    }

    #[test]
    fn record_loglik_floor() {
        let p1 = *table().get(1).unwrap();
        let p = PreferenceParameters::new(0.0, 0.0, 1e12);
        let ll = record_loglik(&p, &rec(1, 1, false, false), &p1).unwrap();
        assert_eq!(ll, LOGLIK_FLOOR);
    }

    /// Literal transcription of the product-of-logits density on a fixture.
    #[test]
    fn dataset_loglik_matches_literal_oracle() {
        let records = vec![
            rec(1, 1, false, true),
            rec(1, 1, true, false),
            rec(2, 13, false, true),
            rec(2, 5, true, true),
            rec(3, 20, true, false),
        ];
        let ds = ChoiceDataset::new(table(), records.clone(), vec![]).unwrap();
        let p = PreferenceParameters::new(0.2, 0.3, 0.15);
        let oracle: f64 = records
            .iter()
            .map(|r| {
                let pay = table().get(r.payoff_id).copied().unwrap();
                let (g, l) = (pay.g, pay.l);
                let nu = if r.voi { 1.0 } else { 0.0 };
                let d =
                    nu * ((1.0 - p.beta) * g - (p.beta + p.kappa) * l) + (1.0 - nu) * ((1.0 - p.beta) * g - p.beta * l);
                let h = 1.0 / (1.0 + (-p.sigma * d).exp());
                if r.choice {
                    h.ln()
                } else {
                    (1.0 - h).ln()
                }
            })
            .sum();
        assert_abs_diff_eq!(dataset_loglik(&p, &ds).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn analytic_hessian_matches_score_differences() {
        let c = Cell {
            g: 50.0,
            l: 140.0,
            odds: 1.0,
            n_selfish: 3.0,
            n_status_quo: 5.0,
        };
        let p = PreferenceParameters::new(0.1, 0.3, 0.05);
        let h = cell_hessian(&p, &c);
        let x = [p.beta, p.kappa, p.sigma];
        for j in 0..3 {
            let mut up = x;
            let mut dn = x;
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            let su = cell_score(&PreferenceParameters::new(up[0], up[1], up[2]), &c);
            let sd = cell_score(&PreferenceParameters::new(dn[0], dn[1], dn[2]), &c);
            let fd = (su - sd) / 2e-6;
            for i in 0..3 {
                assert!((fd[i] - h[(i, j)]).abs() < 1e-5 * h[(i, j)].abs().max(1.0), "{i}{j}");
            }
        }
    }

    #[test]
    fn recovers_parameters_on_large_sample() {
        let truth = PreferenceParameters::new(0.194, 0.258, 0.295);
        let ds = simulated(truth, 400, 7);
        let est = fit_representative(&ds, &FitOptions::default()).unwrap();
        assert!(est.converged);
        assert!(est.loglik <= 0.0);
        for p in Param::ALL {
            let se = est.se_clustered(p).unwrap();
            assert!((p.value(&est.params) - p.value(&truth)).abs() < 4.0 * se, "{p:?}");
        }
        for cov in [est.covariance_plain, est.covariance_clustered.unwrap()] {
            assert!((cov - cov.transpose()).amax() < 1e-12);
            let eig = cov.symmetric_eigen().eigenvalues;
            assert!(eig.min() > -1e-8);
        }
    }

    #[test]
    fn degenerate_and_unidentified_data() {
        let all_selfish = simulated(PreferenceParameters::new(0.0, 0.0, 1e6), 5, 1);
        assert!(matches!(
            fit_representative(&all_selfish, &FitOptions::default()),
            Err(EstimateError::DegenerateData(_))
        ));
        // non-VOI only: kappa does not enter
        let nonvoi = simulated(PreferenceParameters::new(0.2, 0.2, 0.3), 30, 1).filter(|r| !r.voi);
        assert!(matches!(
            fit_representative(&nonvoi, &FitOptions::default()),
            Err(EstimateError::IdentificationFailure(_))
        ));
        let empty = ChoiceDataset::new(table(), vec![], vec![]).unwrap();
        assert!(matches!(
            fit_representative(&empty, &FitOptions::default()),
            Err(EstimateError::EmptyDataset)
        ));
    }

    #[test]
    fn zero_sensitivity_generator_is_flagged() {
        let ds = simulated(PreferenceParameters::new(0.2, 0.3, 0.0), 100, 5);
        match fit_representative(&ds, &FitOptions::default()) {
            Err(EstimateError::IdentificationFailure(_)) => {}
            Ok(est) => {
                // sensitivity indistinguishable from zero: beta/kappa are
                // ratios of noise and carry no information
                assert!(est.params.sigma < 0.02, "{:?}", est.params);
                let z = est.params.sigma / est.se_clustered(Param::Sigma).unwrap();
                assert!(z < 3.0, "sigma z = {z}");
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn bounded_fit_stays_inside_box() {
        let ds = simulated(PreferenceParameters::new(0.194, 0.258, 0.295), 60, 3);
        let opts = FitOptions {
            bounds: Bounds {
                beta: Some((-0.1, 0.15)),
                kappa: Some((0.0, 1.0)),
                sigma: None,
            },
            ..FitOptions::default()
        };
        match fit_representative(&ds, &opts) {
            Ok(est) => {
                assert!(est.params.beta <= 0.15 + 1e-9);
                assert!(est.params.beta >= -0.1);
            }
            Err(EstimateError::NonConvergence(est)) => {
                assert!(est.params.beta <= 0.15 + 1e-9 && est.params.beta >= -0.1);
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn order_and_relabel_invariance() {
        let ds = simulated(PreferenceParameters::new(0.194, 0.258, 0.295), 40, 21);
        let a = fit_representative(&ds, &FitOptions::default()).unwrap();
        let mut shuffled = ds.clone();
        shuffled.records.reverse();
        for r in &mut shuffled.records {
            r.subject_id = 1000 - r.subject_id;
        }
        let b = fit_representative(&shuffled, &FitOptions::default()).unwrap();
        assert_abs_diff_eq!(a.loglik, b.loglik, epsilon = 1e-9);
        for p in Param::ALL {
            assert_abs_diff_eq!(p.value(&a.params), p.value(&b.params), epsilon = 1e-6);
            assert_abs_diff_eq!(a.se_clustered(p).unwrap(), b.se_clustered(p).unwrap(), epsilon = 1e-6);
        }
    }

    #[test]
    fn single_record_clusters_match_plain() {
        // one decision per subject, drawn i.i.d. over situations
        let truth = PreferenceParameters::new(0.15, 0.3, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut records = vec![];
        for i in 0..40000u32 {
            let payoff = rng.random_range(1..=20u32);
            let voi = rng.random::<bool>();
            let pay = table().get(payoff).copied().unwrap();
            let a = if voi { Awareness::VOI } else { Awareness::FULLY_UNAWARE };
            let choice = rng.random::<f64>() < choice_probability(&truth, &pay, a);
            records.push(rec(i + 1, payoff, voi, choice));
        }
        let ds = ChoiceDataset::new(table(), records, vec![]).unwrap();
        let est = fit_representative(&ds, &FitOptions::default()).unwrap();
        for p in Param::ALL {
            let ratio = est.se_clustered(p).unwrap() / est.se_plain(p);
            assert!((ratio - 1.0).abs() < 0.1, "{p:?}: {ratio}");
        }
    }

    #[test]
    fn grid_oracle_single_record() {
        let ds = ChoiceDataset::new(table(), vec![rec(1, 1, false, true)], vec![]).unwrap();
        let grid = GridSpec {
            beta: Axis::new(-1.0, 1.0, 0.5),
            kappa: Axis::new(0.0, 1.0, 0.5),
            sigma: Axis::new(0.0, 1.0, 0.25),
        };
        let (p, ll) = grid_search_oracle(&ds, &grid).unwrap();
        // maximal sigma * delta: beta = -1, sigma = 1; kappa irrelevant, first wins
        assert_eq!((p.beta, p.kappa, p.sigma), (-1.0, 0.0, 1.0));
        assert!(ll <= 0.0 && ll > -1e-6);
    }

    #[test]
    fn grid_oracle_hand_table() {
        // payoff 1 non-VOI selfish, payoff 1 VOI status quo
        let ds = ChoiceDataset::new(table(), vec![rec(1, 1, false, true), rec(1, 1, true, false)], vec![]).unwrap();
        let grid = GridSpec {
            beta: Axis::new(0.0, 0.0, 1.0),
            kappa: Axis::new(0.0, 2.0, 1.0),
            sigma: Axis::new(0.1, 0.1, 1.0),
        };
        // kappa = 0: deltas (15, 15) -> ln H(1.5) + ln(1 - H(1.5))
        // kappa = 1: deltas (15, 5)  -> ln H(1.5) + ln(1 - H(0.5))
        // kappa = 2: deltas (15, -5) -> ln H(1.5) + ln(1 - H(-0.5))
        let h = |x: f64| 1.0 / (1.0 + (-x).exp());
        let table_ll = [
            h(1.5).ln() + (1.0 - h(1.5)).ln(),
            h(1.5).ln() + (1.0 - h(0.5)).ln(),
            h(1.5).ln() + (1.0 - h(-0.5)).ln(),
        ];
        let (p, ll) = grid_search_oracle(&ds, &grid).unwrap();
        assert_eq!(p.kappa, 2.0);
        assert_abs_diff_eq!(ll, table_ll[2], epsilon = 1e-12);
        assert!(table_ll[2] > table_ll[1] && table_ll[1] > table_ll[0]);
    }

    #[test]
    fn classify_rules() {
        let tau = DMatrix::from_row_slice(3, 2, &[0.99, 0.01, 0.5, 0.5, 0.2, 0.8]);
        assert_eq!(classify_subjects(&tau, 0.95), vec![Some(0), None, None]);
        assert_eq!(classify_subjects(&tau, 0.0), vec![Some(0), Some(0), Some(1)]);
    }

    #[test]
    fn compare_frames_rules() {
        let ds = simulated(PreferenceParameters::new(0.194, 0.258, 0.295), 50, 2);
        let a = fit_representative(&ds, &FitOptions::default()).unwrap();
        assert_eq!(compare_frames(&a, &a, Param::Beta).unwrap(), (0.0, 1.0));
        let mut b = a.clone();
        let se = a.se_clustered(Param::Kappa).unwrap();
        b.params.kappa -= 1.959963984540054 * (2.0f64).sqrt() * se;
        let (z, p) = compare_frames(&a, &b, Param::Kappa).unwrap();
        assert_abs_diff_eq!(z, 1.959963984540054, epsilon = 1e-9);
        assert_abs_diff_eq!(p, 0.05, epsilon = 1e-9);
        b.covariance_clustered = None;
        assert!(compare_frames(&a, &b, Param::Kappa).is_err());
    }

    #[test]
    fn mixture_k1_nests_representative() {
        let ds = simulated(PreferenceParameters::new(0.194, 0.258, 0.295), 60, 8);
        let rep = fit_representative(&ds, &FitOptions::default()).unwrap();
        let mix = fit_mixture(&ds, 1, &MixtureOptions::default()).unwrap();
        assert_abs_diff_eq!(mix.loglik, rep.loglik, epsilon = 1e-6);
        assert!(mix.posteriors.iter().all(|&t| t == 1.0));
        for p in Param::ALL {
            let a = mix.se_plain(0, p).unwrap();
            let b = rep.se_plain(p);
            assert!((a - b).abs() < 1e-3 * b, "{p:?} {a} {b}");
        }
    }

    #[test]
    fn equal_types_give_uniform_posteriors() {
        let ds = simulated(PreferenceParameters::new(0.194, 0.258, 0.295), 10, 8);
        let p = PreferenceParameters::new(0.2, 0.2, 0.2);
        let mix = MixtureEstimate {
            types: vec![
                TypeEstimate { params: p, share: 0.5 },
                TypeEstimate { params: p, share: 0.5 },
            ],
            loglik: 0.0,
            covariance_plain: None,
            covariance_clustered: None,
            posteriors: DMatrix::zeros(0, 2),
            subject_ids: vec![],
            n_em_iterations: 0,
            loglik_trace: vec![],
            n_obs: 0,
            converged: true,
        };
        let tau = posteriors(&mix, &ds).unwrap();
        assert_eq!(tau.nrows(), 10);
        assert!(tau.iter().all(|&t| (t - 0.5).abs() < 1e-12));
    }

    #[test]
    fn em_is_monotone_and_shares_match_posteriors() {
        let t1 = PreferenceParameters::new(0.327, 0.116, 0.046);
        let t2 = PreferenceParameters::new(-0.065, 0.342, 0.025);
        let pop = PopulationSpec::new(vec![
            PopulationComponent::new(0.554, t1),
            PopulationComponent::new(0.446, t2),
        ])
        .unwrap();
        let ds = simulate_experiment(&pop, &[(TreatmentPlan::for_table(Arm::N, &table()), 120)], &table(), 4).unwrap();
        let mix = fit_mixture(
            &ds,
            2,
            &MixtureOptions {
                starts: 4,
                ..Default::default()
            },
        )
        .unwrap();
        for w in mix.loglik_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-9, "{} -> {}", w[0], w[1]);
        }
        for j in 0..2 {
            let mean = mix.posteriors.column(j).mean();
            assert_abs_diff_eq!(mean, mix.types[j].share, epsilon = 1e-6);
        }
        for row in mix.posteriors.row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
        let one = fit_mixture(
            &ds,
            1,
            &MixtureOptions {
                starts: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(mix.loglik >= one.loglik - 1e-6);
        // direct maximisation should not find a better optimum
        let direct = fit_mixture(
            &ds,
            2,
            &MixtureOptions {
                starts: 4,
                method: MixtureMethod::Direct,
                ..Default::default()
            },
        );
        if let Ok(d) = direct {
            assert!(d.loglik <= mix.loglik + 1e-4 * mix.loglik.abs());
        }
    }
}
