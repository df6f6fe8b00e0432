//! Closed-form choice model for the lemons-style dictator decision.
//!
//! An active player chooses between the status quo `(e1, e2)` and a selfish
//! option `(e1 + G, e2 - L)`. Preferences combine expected material payoff,
//! a Kantian (universalisation) term weighted by the degree of morality
//! `kappa`, and aheadness aversion `beta`. Awareness `p_hat` is the subjective
//! probability of holding the active role: `1/2` under the veil of ignorance
//! (VOI), `1` for a fully unaware non-VOI decision maker.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// One decision situation: status-quo payoffs and the gain/loss of the
/// selfish option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoffConfiguration {
    pub id: u32,
    pub e1: f64,
    pub e2: f64,
    pub g: f64,
    pub l: f64,
}

impl PayoffConfiguration {
    pub fn new(id: u32, e1: f64, e2: f64, g: f64, l: f64) -> Result<Self, ModelError> {
        let finite = [e1, e2, g, l].iter().all(|v| v.is_finite());
        if !finite || e1 <= e2 || g <= 0.0 || l <= 0.0 {
            return Err(ModelError::InvalidPayoff { id, e1, e2, g, l });
        }
        Ok(Self { id, e1, e2, g, l })
    }

    /// Aheadness-aversion threshold `G / (G + L)`.
    pub fn z(&self) -> f64 {
        self.g / (self.g + self.l)
    }
}

/// `(id, e1, e2, e1 + G, e2 - L)` as displayed in the experimental design.
const BUILTIN_PAYOFFS: [(u32, f64, f64, f64, f64); 20] = [
    (1, 150.0, 100.0, 165.0, 90.0),
    (2, 150.0, 100.0, 160.0, 90.0),
    (3, 150.0, 100.0, 165.0, 80.0),
    (4, 150.0, 100.0, 165.0, 70.0),
    (5, 250.0, 240.0, 300.0, 100.0),
    (6, 250.0, 240.0, 300.0, 90.0),
    (7, 250.0, 240.0, 300.0, 80.0),
    (8, 250.0, 240.0, 300.0, 70.0),
    (9, 250.0, 240.0, 300.0, 60.0),
    (10, 150.0, 120.0, 170.0, 20.0),
    (11, 200.0, 190.0, 220.0, 60.0),
    (12, 200.0, 190.0, 220.0, 50.0),
    (13, 200.0, 190.0, 210.0, 100.0),
    (14, 200.0, 190.0, 210.0, 90.0),
    (15, 200.0, 190.0, 210.0, 80.0),
    (16, 250.0, 220.0, 265.0, 20.0),
    (17, 250.0, 220.0, 260.0, 50.0),
    (18, 250.0, 220.0, 260.0, 10.0),
    (19, 250.0, 220.0, 260.0, 5.0),
    (20, 250.0, 220.0, 255.0, 60.0),
];

/// Ordered collection of payoff configurations with lookup by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffTable {
    payoffs: Vec<PayoffConfiguration>,
}

impl PayoffTable {
    pub fn new(payoffs: Vec<PayoffConfiguration>) -> Result<Self, ModelError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &payoffs {
            if !seen.insert(p.id) {
                return Err(ModelError::DuplicatePayoff(p.id));
            }
        }
        Ok(Self { payoffs })
    }

    /// The 20 payoff configurations of the experimental design.
    pub fn builtin() -> Self {
        let payoffs = BUILTIN_PAYOFFS
            .iter()
            .map(|&(id, e1, e2, sq1, sq2)| PayoffConfiguration {
                id,
                e1,
                e2,
                g: sq1 - e1,
                l: e2 - sq2,
            })
            .collect();
        Self { payoffs }
    }

    pub fn get(&self, id: u32) -> Option<&PayoffConfiguration> {
        self.payoffs.iter().find(|p| p.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PayoffConfiguration> {
        self.payoffs.iter()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.payoffs.iter().map(|p| p.id).collect()
    }

    pub fn len(&self) -> usize {
        self.payoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payoffs.is_empty()
    }

    pub fn as_slice(&self) -> &[PayoffConfiguration] {
        &self.payoffs
    }
}

impl Default for PayoffTable {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Preference parameters of one agent or one latent type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceParameters {
    /// Aheadness aversion.
    pub beta: f64,
    /// Degree of morality.
    pub kappa: f64,
    /// Choice sensitivity (logit scale).
    pub sigma: f64,
    /// Behindness aversion. Never enters the choice calculus because the
    /// active player is always ahead.
    #[serde(default)]
    pub alpha: f64,
}

impl PreferenceParameters {
    pub fn new(beta: f64, kappa: f64, sigma: f64) -> Self {
        Self {
            beta,
            kappa,
            sigma,
            alpha: 0.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Checks the restrictions that apply to data-generating parameters:
    /// `sigma >= 0` and `kappa` in `[0, 1]`.
    pub fn validate_for_simulation(&self) -> Result<(), ModelError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ModelError::InvalidSigma(self.sigma));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(ModelError::KappaOutOfRange(self.kappa));
        }
        if !self.beta.is_finite() {
            return Err(ModelError::NonFinite("beta"));
        }
        Ok(())
    }
}

/// Subjective probability of being cast in the active role, in `[1/2, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Awareness(f64);

impl Awareness {
    /// Veil of ignorance: both role assignments equally likely.
    pub const VOI: Awareness = Awareness(0.5);
    /// Non-VOI decision maker who ignores the possibility of role reversal.
    pub const FULLY_UNAWARE: Awareness = Awareness(1.0);

    pub fn new(p_hat: f64) -> Result<Self, ModelError> {
        if (0.5..=1.0).contains(&p_hat) {
            Ok(Self(p_hat))
        } else {
            Err(ModelError::AwarenessOutOfRange(p_hat))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_voi(self) -> bool {
        self.0 == 0.5
    }

    /// Weight `(1 - p_hat) / p_hat` that the Kantian term receives in the
    /// normalised utility difference.
    pub fn reversal_odds(self) -> f64 {
        (1.0 - self.0) / self.0
    }
}

impl TryFrom<f64> for Awareness {
    type Error = ModelError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Awareness::new(v)
    }
}

impl From<Awareness> for f64 {
    fn from(a: Awareness) -> f64 {
        a.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Neutral,
    Market,
}

impl Frame {
    pub fn as_str(self) -> &'static str {
        match self {
            Frame::Neutral => "neutral",
            Frame::Market => "market",
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Frame {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neutral" => Ok(Frame::Neutral),
            "market" => Ok(Frame::Market),
            other => Err(ModelError::Parse(format!("unknown frame `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub frame: Frame,
    pub awareness: Awareness,
}

impl DecisionContext {
    pub fn new(frame: Frame, awareness: Awareness) -> Self {
        Self { frame, awareness }
    }

    pub fn voi(frame: Frame) -> Self {
        Self::new(frame, Awareness::VOI)
    }

    pub fn is_voi(&self) -> bool {
        self.awareness.is_voi()
    }
}

pub fn z_ratio(payoff: &PayoffConfiguration) -> f64 {
    payoff.z()
}

/// Expected utility of own action `x` when the counterpart plays `y`, for a
/// subject who believes she is the active player with probability `p_hat`.
pub fn utility_full(
    params: &PreferenceParameters,
    payoff: &PayoffConfiguration,
    p_hat: Awareness,
    x: bool,
    y: bool,
) -> f64 {
    let p = p_hat.value();
    let (x, y) = (f64::from(u8::from(x)), f64::from(u8::from(y)));
    let PayoffConfiguration { e1, e2, g, l, .. } = *payoff;
    let PreferenceParameters { beta, kappa, alpha, .. } = *params;
    (1.0 - kappa) * (p * (e1 + x * g) + (1.0 - p) * (e2 - y * l))
        + kappa * (p * (e1 + x * g) + (1.0 - p) * (e2 - x * l))
        - p * beta * (e1 - e2 + x * (g + l))
        - (1.0 - p) * alpha * (e1 - e2 + y * (g + l))
}

/// Normalised deterministic advantage of the selfish option,
/// `G - beta (G + L) - kappa L (1 - p_hat) / p_hat`.
pub fn utility_difference(params: &PreferenceParameters, payoff: &PayoffConfiguration, p_hat: Awareness) -> f64 {
    payoff.g - params.beta * (payoff.g + payoff.l) - params.kappa * payoff.l * p_hat.reversal_odds()
}

/// Smallest degree of morality that turns the VOI choice to the status quo:
/// `(z - beta) / (1 - z)`.
pub fn kappa_threshold(beta: f64, payoff: &PayoffConfiguration) -> f64 {
    let z = payoff.z();
    (z - beta) / (1.0 - z)
}

/// Deterministic prediction; indifference resolves to the selfish option.
pub fn predicts_selfish(params: &PreferenceParameters, payoff: &PayoffConfiguration, p_hat: Awareness) -> bool {
    utility_difference(params, payoff, p_hat) >= 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SwitchKind {
    None,
    /// Selfish under non-VOI, status quo under VOI.
    Expected,
    /// Status quo under non-VOI, selfish under VOI.
    Unexpected,
}

pub fn classify_switch(choice_nonvoi: bool, choice_voi: bool) -> SwitchKind {
    match (choice_nonvoi, choice_voi) {
        (true, false) => SwitchKind::Expected,
        (false, true) => SwitchKind::Unexpected,
        _ => SwitchKind::None,
    }
}

/// Observed behaviour on one payoff: the non-VOI and VOI choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternEntry {
    pub payoff: PayoffConfiguration,
    pub nonvoi_awareness: Awareness,
    pub sells_nonvoi: bool,
    pub sells_voi: bool,
}

impl PatternEntry {
    pub fn new(payoff: PayoffConfiguration, sells_nonvoi: bool, sells_voi: bool) -> Self {
        Self {
            payoff,
            nonvoi_awareness: Awareness::FULLY_UNAWARE,
            sells_nonvoi,
            sells_voi,
        }
    }
}

/// Half-plane `a * beta + b * kappa <= c` (or `< c` when `strict`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub strict: bool,
}

impl HalfPlane {
    fn slack(&self, beta: f64, kappa: f64) -> f64 {
        self.c - self.a * beta - self.b * kappa
    }

    pub fn contains(&self, beta: f64, kappa: f64) -> bool {
        let s = self.slack(beta, kappa);
        if self.strict {
            s > 0.0
        } else {
            s >= 0.0
        }
    }
}

impl fmt::Display for HalfPlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.strict { "<" } else { "<=" };
        write!(f, "{:.6}*beta + {:.6}*kappa {op} {:.6}", self.a, self.b, self.c)
    }
}

/// Set of `(beta, kappa)` consistent with a deterministic choice pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleRegion {
    pub constraints: Vec<HalfPlane>,
    /// Closure of the region clipped to `[-BOX, BOX]^2`, strict constraints
    /// tightened by the slack tolerance. Empty when the region is empty.
    pub polygon: Vec<(f64, f64)>,
    pub empty: bool,
}

/// Clipping box for unbounded regions.
pub const REGION_BOX: f64 = 1.0e4;
/// Slack tolerance for strict constraints.
/// Regions thinner than this (area over perimeter) are reported as empty.
pub const REGION_MIN_WIDTH: f64 = 1e-9;

pub const REGION_SLACK_TOL: f64 = 1.0e-12;

impl FeasibleRegion {
    pub fn from_constraints(constraints: Vec<HalfPlane>) -> Self {
        let mut polygon = vec![
            (-REGION_BOX, -REGION_BOX),
            (REGION_BOX, -REGION_BOX),
            (REGION_BOX, REGION_BOX),
            (-REGION_BOX, REGION_BOX),
        ];
        for h in &constraints {
            let norm = h.a.hypot(h.b);
            let c = if h.strict {
                h.c - REGION_SLACK_TOL * norm.max(1.0)
            } else {
                h.c
            };
            polygon = clip(&polygon, h.a, h.b, c);
            if polygon.is_empty() {
                break;
            }
        }
        // a strict constraint meeting a weak one leaves a zero-area sliver
        // once rounding at the box scale is accounted for
        let empty = polygon_area(&polygon) <= REGION_MIN_WIDTH * polygon_perimeter(&polygon);
        if empty {
            polygon.clear();
        }
        Self {
            constraints,
            polygon,
            empty,
        }
    }

    pub fn contains(&self, beta: f64, kappa: f64) -> bool {
        self.constraints.iter().all(|h| h.contains(beta, kappa))
    }

    /// Axis-aligned bounding box `(beta_min, beta_max, kappa_min, kappa_max)`
    /// of the clipped closure.
    pub fn bounding_box(&self) -> Option<(f64, f64, f64, f64)> {
        if self.empty {
            return None;
        }
        let init = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        Some(self.polygon.iter().fold(init, |(b0, b1, k0, k1), &(b, k)| {
            (b0.min(b), b1.max(b), k0.min(k), k1.max(k))
        }))
    }

    /// Vertex average of the clipped closure.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        if self.empty {
            return None;
        }
        let n = self.polygon.len() as f64;
        let (sb, sk) = self
            .polygon
            .iter()
            .fold((0.0, 0.0), |(sb, sk), &(b, k)| (sb + b, sk + k));
        Some((sb / n, sk / n))
    }
}

/// Sutherland-Hodgman step: keep the part of `poly` with `a x + b y <= c`.
fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p.0 * q.1 - q.0 * p.1
        })
        .sum();
    0.5 * twice.abs()
}

fn polygon_perimeter(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            (q.0 - p.0).hypot(q.1 - p.1)
        })
        .sum()
}

fn clip(poly: &[(f64, f64)], a: f64, b: f64, c: f64) -> Vec<(f64, f64)> {
    let inside = |p: (f64, f64)| a * p.0 + b * p.1 <= c;
    let cross = |p: (f64, f64), q: (f64, f64)| {
        let fp = a * p.0 + b * p.1 - c;
        let fq = a * q.0 + b * q.1 - c;
        let t = fp / (fp - fq);
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        match (inside(prev), inside(cur)) {
            (true, true) => out.push(cur),
            (true, false) => out.push(cross(prev, cur)),
            (false, true) => {
                out.push(cross(prev, cur));
                out.push(cur);
            }
            (false, false) => {}
        }
    }
    out
}

/// Selling at awareness `p_hat` is equivalent to
/// `beta + (1 - z) * odds * kappa <= z` with `odds = (1 - p_hat) / p_hat`.
fn sell_constraint(payoff: &PayoffConfiguration, p_hat: Awareness, sells: bool) -> HalfPlane {
    let z = payoff.z();
    let b = (1.0 - z) * p_hat.reversal_odds();
    if sells {
        HalfPlane {
            a: 1.0,
            b,
            c: z,
            strict: false,
        }
    } else {
        HalfPlane {
            a: -1.0,
            b: -b,
            c: -z,
            strict: true,
        }
    }
}

/// Intersects the half-planes implied by each observed non-VOI/VOI pair.
pub fn feasible_region(pattern: &[PatternEntry]) -> FeasibleRegion {
    let constraints = pattern
        .iter()
        .flat_map(|e| {
            [
                sell_constraint(&e.payoff, e.nonvoi_awareness, e.sells_nonvoi),
                sell_constraint(&e.payoff, Awareness::VOI, e.sells_voi),
            ]
        })
        .collect();
    FeasibleRegion::from_constraints(constraints)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub id: u32,
    pub e1: f64,
    pub e2: f64,
    pub selfish_active: f64,
    pub selfish_passive: f64,
    pub z: f64,
    /// `z / (1 - z)`
    pub kappa_intercept: f64,
    /// `-1 / (1 - z)`
    pub kappa_slope: f64,
}

pub fn thresholds_table(payoffs: &[PayoffConfiguration]) -> Vec<ThresholdRow> {
    payoffs
        .iter()
        .map(|p| {
            let z = p.z();
            ThresholdRow {
                id: p.id,
                e1: p.e1,
                e2: p.e2,
                selfish_active: p.e1 + p.g,
                selfish_passive: p.e2 - p.l,
                z,
                kappa_intercept: z / (1.0 - z),
                kappa_slope: -1.0 / (1.0 - z),
            }
        })
        .collect()
}

/// Decimal round-half-up. The nudge keeps exact decimal ties such as 0.075
/// (stored as 0.07499..) from rounding down.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = x.abs() * scale;
    let rounded = (scaled + 1e-9 * scaled.max(1.0)).floor();
    let r = if scaled - rounded >= 0.5 - 1e-9 {
        rounded + 1.0
    } else {
        rounded
    };
    (r / scale).copysign(x)
}
