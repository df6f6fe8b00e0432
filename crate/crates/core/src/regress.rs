//! Linear probability models with fixed effects and cluster-robust
//! covariance, plus the two-sample tests used for descriptive comparisons.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

use crate::error::RegressError;
use crate::estimate::two_sided_normal_p;
use crate::model::Frame;
use crate::simulate::{ChoiceDataset, SequenceLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regressor {
    Intercept,
    Z,
    Market,
    Voi,
    VoiMarket,
}

impl Regressor {
    pub fn name(self) -> &'static str {
        match self {
            Regressor::Intercept => "intercept",
            Regressor::Z => "z",
            Regressor::Market => "market",
            Regressor::Voi => "voi",
            Regressor::VoiMarket => "voi_market",
        }
    }

    /// Treatment dummies may not be silently dropped.
    pub fn is_treatment(self) -> bool {
        matches!(self, Regressor::Market | Regressor::Voi | Regressor::VoiMarket)
    }
}

impl FromStr for Regressor {
    type Err = RegressError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "intercept" | "const" => Ok(Regressor::Intercept),
            "z" => Ok(Regressor::Z),
            "market" | "market_dummy" => Ok(Regressor::Market),
            "voi" | "voi_dummy" => Ok(Regressor::Voi),
            "voi_market" | "voixmarket" | "voi*market" | "voi:market" => Ok(Regressor::VoiMarket),
            other => Err(RegressError::InvalidSpec(format!("unknown regressor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffect {
    Payoff,
    Subject,
    SubjectPayoff,
}

impl FromStr for FixedEffect {
    type Err = RegressError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "payoff" => Ok(FixedEffect::Payoff),
            "subject" => Ok(FixedEffect::Subject),
            "subject_payoff" | "subject*payoff" | "subjectxpayoff" => Ok(FixedEffect::SubjectPayoff),
            other => Err(RegressError::InvalidSpec(format!("unknown fixed effect `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clustering {
    /// Classical homoskedastic OLS covariance.
    None,
    /// Heteroskedasticity-robust, HC1 scaling.
    Hc1,
    Subject,
    Payoff,
    TwoWay,
}

impl Clustering {
    pub fn name(self) -> &'static str {
        match self {
            Clustering::None => "none",
            Clustering::Hc1 => "hc1",
            Clustering::Subject => "subject",
            Clustering::Payoff => "payoff",
            Clustering::TwoWay => "two_way",
        }
    }
}

impl FromStr for Clustering {
    type Err = RegressError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Clustering::None),
            "hc1" | "robust" => Ok(Clustering::Hc1),
            "subject" => Ok(Clustering::Subject),
            "payoff" => Ok(Clustering::Payoff),
            "two_way" | "two-way" | "twoway" => Ok(Clustering::TwoWay),
            other => Err(RegressError::InvalidSpec(format!("unknown clustering `{other}`"))),
        }
    }
}

/// How fixed effects are removed from the design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeMethod {
    /// Alternating-projection demeaning.
    #[default]
    Within,
    /// Explicit dummy columns.
    Dummies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionSpec {
    pub regressors: Vec<Regressor>,
    pub fixed_effects: Vec<FixedEffect>,
    pub clustering: Clustering,
    /// Sequences kept in the sample; empty keeps everything.
    #[serde(with = "label_list")]
    pub sample: Vec<SequenceLabel>,
    /// Names of extra dataset columns used as controls.
    pub controls: Vec<String>,
    pub method: FeMethod,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            regressors: vec![Regressor::Intercept, Regressor::Voi],
            fixed_effects: vec![FixedEffect::Payoff],
            clustering: Clustering::Subject,
            sample: Vec::new(),
            controls: Vec::new(),
            method: FeMethod::Within,
        }
    }
}

mod label_list {
    use super::SequenceLabel;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[SequenceLabel], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|l| l.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<SequenceLabel>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
}

impl Coefficient {
    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_value)
    }
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    pub coefficients: Vec<Coefficient>,
    /// Covariance of the retained coefficients under `clustering`.
    pub covariance: DMatrix<f64>,
    /// Standard errors of the retained coefficients under every clustering
    /// choice that is computable on this sample.
    pub se_by_clustering: BTreeMap<Clustering, Vec<f64>>,
    /// Clustering actually used for inference.
    pub clustering: Clustering,
    pub r_squared: f64,
    pub within_r_squared: f64,
    pub n_obs: usize,
    /// Parameters including absorbed fixed effects.
    pub n_params: usize,
    pub n_clusters: Option<usize>,
    /// Degrees of freedom of the t reference distribution.
    pub df: f64,
    /// Regressors and control columns dropped as collinear.
    pub dropped: Vec<String>,
    /// Fitted values outside [0, 1].
    pub n_fitted_outside_unit: usize,
    pub residuals: Vec<f64>,
    pub notes: Vec<String>,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    /// Aligned text table with significance stars.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = self.coefficients.iter().map(|c| c.name.len()).max().unwrap_or(4).max(9);
        let _ = writeln!(
            out,
            "{:<w$} {:>12} {:>11} {:>9} {:>9}",
            "term", "estimate", "std.err", "t", "p"
        );
        for c in &self.coefficients {
            let _ = writeln!(
                out,
                "{:<w$} {:>9.4}{:<3} {:>11.4} {:>9.3} {:>9.4}",
                c.name,
                c.estimate,
                c.stars(),
                c.se,
                c.t,
                c.p_value
            );
        }
        let _ = writeln!(out, "---");
        let _ = writeln!(out, "Signif. codes: *** 0.01, ** 0.05, * 0.1");
        let _ = writeln!(
            out,
            "N = {}, R2 = {:.4}, within R2 = {:.4}, SE: {}{}",
            self.n_obs,
            self.r_squared,
            self.within_r_squared,
            self.clustering.name(),
            self.n_clusters.map(|c| format!(" ({c} clusters)")).unwrap_or_default()
        );
        if !self.dropped.is_empty() {
            let _ = writeln!(out, "dropped (collinear): {}", self.dropped.join(", "));
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

impl fmt::Display for RegressionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Observation-level inputs after sample filtering.
struct Sample {
    y: Vec<f64>,
    subject: Vec<usize>,
    payoff: Vec<usize>,
    cell: Vec<usize>,
    columns: Vec<(String, Vec<f64>, Option<Regressor>)>,
}

fn dense_ids<T: Ord + Copy>(keys: &[T]) -> Vec<usize> {
    let uniq: BTreeSet<T> = keys.iter().copied().collect();
    let map: BTreeMap<T, usize> = uniq.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
    keys.iter().map(|k| map[k]).collect()
}

fn build_sample(
    dataset: &ChoiceDataset,
    spec: &RegressionSpec,
    response: Option<&[f64]>,
) -> Result<Sample, RegressError> {
    let keep: BTreeSet<SequenceLabel> = spec.sample.iter().copied().collect();
    let (records, y): (Vec<_>, Vec<f64>) = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| keep.is_empty() || keep.contains(&r.label()))
        .map(|(i, r)| (r, response.map_or(f64::from(u8::from(r.choice)), |y| y[i])))
        .unzip();
    if records.is_empty() {
        return Err(RegressError::EmptySample);
    }
    let mut seen = BTreeSet::new();
    for r in &spec.regressors {
        if !seen.insert(*r) {
            return Err(RegressError::InvalidSpec(format!(
                "regressor `{}` listed twice",
                r.name()
            )));
        }
    }
    let subject = dense_ids(&records.iter().map(|r| r.subject_id).collect::<Vec<_>>());
    let payoff = dense_ids(&records.iter().map(|r| r.payoff_id).collect::<Vec<_>>());
    let cell = dense_ids(&records.iter().map(|r| (r.subject_id, r.payoff_id)).collect::<Vec<_>>());

    let mut columns = Vec::new();
    for &reg in &spec.regressors {
        let col: Vec<f64> = records
            .iter()
            .map(|r| {
                let market = f64::from(u8::from(r.frame == Frame::Market));
                let voi = f64::from(u8::from(r.voi));
                match reg {
                    Regressor::Intercept => Ok(1.0),
                    Regressor::Z => Ok(dataset
                        .payoff(r.payoff_id)
                        .map_err(|e| RegressError::InvalidSpec(e.to_string()))?
                        .z()),
                    Regressor::Market => Ok(market),
                    Regressor::Voi => Ok(voi),
                    Regressor::VoiMarket => Ok(voi * market),
                }
            })
            .collect::<Result<_, RegressError>>()?;
        columns.push((reg.name().to_string(), col, Some(reg)));
    }
    for name in &spec.controls {
        let idx = dataset
            .control_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| RegressError::InvalidSpec(format!("unknown control column `{name}`")))?;
        let raw: Vec<&str> = records.iter().map(|r| r.controls[idx].trim()).collect();
        let numeric: Option<Vec<f64>> = raw.iter().map(|v| v.parse::<f64>().ok()).collect();
        match numeric {
            Some(v) if v.iter().all(|x| x.is_finite()) => columns.push((name.clone(), v, None)),
            _ => {
                // categorical: one dummy per level except the first
                let levels: BTreeSet<&str> = raw.iter().copied().collect();
                for level in levels.into_iter().skip(1) {
                    let v = raw.iter().map(|x| f64::from(u8::from(*x == level))).collect();
                    columns.push((format!("{name}={level}"), v, None));
                }
            }
        }
    }
    Ok(Sample {
        y,
        subject,
        payoff,
        cell,
        columns,
    })
}

fn fe_groups(sample: &Sample, fes: &[FixedEffect]) -> Vec<(&'static str, Vec<usize>)> {
    let mut out = Vec::new();
    for fe in fes {
        let g = match fe {
            FixedEffect::Payoff => ("payoff", sample.payoff.clone()),
            FixedEffect::Subject => ("subject", sample.subject.clone()),
            FixedEffect::SubjectPayoff => ("subject_payoff", sample.cell.clone()),
        };
        if !out.iter().any(|(n, _): &(&str, Vec<usize>)| *n == g.0) {
            out.push(g);
        }
    }
    out
}

fn n_levels(g: &[usize]) -> usize {
    g.iter().copied().max().map_or(0, |m| m + 1)
}

/// Rank of the fixed-effect dummy block.
fn fe_rank(sample: &Sample, fes: &[FixedEffect]) -> usize {
    let has = |f| fes.contains(&f);
    if has(FixedEffect::SubjectPayoff) {
        return n_levels(&sample.cell);
    }
    match (has(FixedEffect::Subject), has(FixedEffect::Payoff)) {
        (true, true) => {
            // connected components of the subject/payoff bipartite graph
            let ns = n_levels(&sample.subject);
            let np = n_levels(&sample.payoff);
            let mut parent: Vec<usize> = (0..ns + np).collect();
            fn find(p: &mut [usize], mut x: usize) -> usize {
                while p[x] != x {
                    p[x] = p[p[x]];
                    x = p[x];
                }
                x
            }
            for (&s, &q) in sample.subject.iter().zip(&sample.payoff) {
                let (a, b) = (find(&mut parent, s), find(&mut parent, ns + q));
                if a != b {
                    parent[a] = b;
                }
            }
            let comps = (0..ns + np).filter(|&i| find(&mut parent, i) == i).count();
            ns + np - comps
        }
        (true, false) => n_levels(&sample.subject),
        (false, true) => n_levels(&sample.payoff),
        (false, false) => 0,
    }
}

/// Subtracts group means for one grouping.
fn demean_once(v: &mut [f64], groups: &[usize], n_groups: usize) {
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0.0; n_groups];
    for (x, &g) in v.iter().zip(groups) {
        sum[g] += x;
        cnt[g] += 1.0;
    }
    for (x, &g) in v.iter_mut().zip(groups) {
        *x -= sum[g] / cnt[g];
    }
}

/// Projects `v` onto the orthogonal complement of the fixed effects by
/// alternating projections.
fn absorb(v: &mut [f64], groups: &[(&'static str, Vec<usize>)]) {
    if groups.is_empty() {
        return;
    }
    let levels: Vec<usize> = groups.iter().map(|(_, g)| n_levels(g)).collect();
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    for _ in 0..10_000 {
        let before = v.to_vec();
        for ((_, g), &n) in groups.iter().zip(&levels) {
            demean_once(v, g, n);
        }
        if groups.len() == 1 {
            return;
        }
        let change = v.iter().zip(&before).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if change < 1e-15 * scale {
            return;
        }
    }
}

/// Greedy column selection by Gram-Schmidt: a column is dropped when its
/// residual on the kept columns is negligible relative to `reference`.
fn select_independent(cols: &[Vec<f64>], reference: &[f64]) -> Vec<bool> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::with_capacity(cols.len());
    for (c, &r) in cols.iter().zip(reference) {
        let mut v = c.clone();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 * r.max(1e-300) {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
            keep.push(true);
        } else {
            keep.push(false);
        }
    }
    keep
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Ordinary least squares linear probability model.
pub fn run_lpm(dataset: &ChoiceDataset, spec: &RegressionSpec) -> Result<RegressionResult, RegressError> {
    run_ols(dataset, spec, None)
}

/// As [`run_lpm`], with the choice indicator optionally replaced by an
/// arbitrary response aligned with `dataset.records`.
pub fn run_ols(
    dataset: &ChoiceDataset,
    spec: &RegressionSpec,
    response: Option<&[f64]>,
) -> Result<RegressionResult, RegressError> {
    if let Some(y) = response {
        if y.len() != dataset.records.len() {
            return Err(RegressError::InvalidSpec(format!(
                "response has {} values for {} records",
                y.len(),
                dataset.records.len()
            )));
        }
    }
    let sample = build_sample(dataset, spec, response)?;
    let n = sample.y.len();
    let groups = fe_groups(&sample, &spec.fixed_effects);

    // a treatment dummy that never varies cannot be estimated
    for (name, col, reg) in &sample.columns {
        if reg.is_some_and(|r| r.is_treatment()) && col.iter().all(|&x| x == col[0]) {
            return Err(RegressError::RankDeficient(vec![name.clone()]));
        }
    }

    if spec.fixed_effects.contains(&FixedEffect::SubjectPayoff) {
        for (name, col, reg) in &sample.columns {
            if reg.is_some_and(|r| r.is_treatment()) {
                let mut v = col.clone();
                demean_once(&mut v, &sample.cell, n_levels(&sample.cell));
                if norm(&v) <= 1e-9 * norm(col) {
                    return Err(RegressError::NoWithinCellVariation(name.clone()));
                }
            }
        }
    }

    let fe_k = fe_rank(&sample, &spec.fixed_effects);
    let (names, x, y_tilde, kept_fe_cols, dropped) = match spec.method {
        FeMethod::Within => {
            let mut ys = sample.y.clone();
            absorb(&mut ys, &groups);
            let mut cols = Vec::new();
            let mut refs = Vec::new();
            for (_, c, _) in &sample.columns {
                let mut v = c.clone();
                absorb(&mut v, &groups);
                refs.push(norm(c));
                cols.push(v);
            }
            let keep = select_independent(&cols, &refs);
            let mut names = Vec::new();
            let mut dropped = Vec::new();
            let mut kept = Vec::new();
            for ((k, (name, _, _)), col) in keep.iter().zip(&sample.columns).zip(cols) {
                if *k {
                    names.push(name.clone());
                    kept.push(col);
                } else {
                    dropped.push(name.clone());
                }
            }
            (names, kept, ys, 0usize, dropped)
        }
        FeMethod::Dummies => {
            let mut cols = Vec::new();
            let mut refs = Vec::new();
            let mut n_fe_cols = 0;
            for (_, g) in &groups {
                for level in 0..n_levels(g) {
                    let d: Vec<f64> = g.iter().map(|&x| f64::from(u8::from(x == level))).collect();
                    refs.push(norm(&d));
                    cols.push(d);
                    n_fe_cols += 1;
                }
            }
            for (_, c, _) in &sample.columns {
                refs.push(norm(c));
                cols.push(c.clone());
            }
            let keep = select_independent(&cols, &refs);
            let kept_fe = keep[..n_fe_cols].iter().filter(|&&k| k).count();
            let mut names = Vec::new();
            let mut dropped = Vec::new();
            let mut kept = Vec::new();
            for (i, col) in cols.into_iter().enumerate() {
                if !keep[i] {
                    if i >= n_fe_cols {
                        dropped.push(sample.columns[i - n_fe_cols].0.clone());
                    }
                    continue;
                }
                if i >= n_fe_cols {
                    names.push(sample.columns[i - n_fe_cols].0.clone());
                }
                kept.push(col);
            }
            let mut yd = sample.y.clone();
            // with dummies, the "within" outcome is still needed for within R2
            absorb(&mut yd, &groups);
            (names, kept, yd, kept_fe, dropped)
        }
    };

    let treatment_dropped: Vec<String> = sample
        .columns
        .iter()
        .filter(|(name, _, reg)| reg.is_some_and(|r| r.is_treatment()) && dropped.contains(name))
        .map(|(name, _, _)| name.clone())
        .collect();
    if !treatment_dropped.is_empty() {
        return Err(RegressError::RankDeficient(treatment_dropped));
    }

    let p_all = x.len();
    let k_total = names.len() + fe_k;
    if p_all == 0 {
        return Err(RegressError::InvalidSpec("no estimable regressors".into()));
    }
    if n <= k_total {
        return Err(RegressError::InvalidSpec(format!(
            "{n} observations cannot identify {k_total} parameters"
        )));
    }

    let xm = DMatrix::from_fn(n, p_all, |i, j| x[j][i]);
    let y_used = match spec.method {
        FeMethod::Within => DVector::from_column_slice(&y_tilde),
        FeMethod::Dummies => DVector::from_column_slice(&sample.y),
    };
    let xtx = xm.transpose() * &xm;
    let xtx_inv = xtx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| RegressError::RankDeficient(names.clone()))?;
    let qr = xm.clone().qr();
    let mut qty = y_used.clone();
    qr.q_tr_mul(&mut qty);
    let beta_all = qr
        .r()
        .solve_upper_triangular(&qty.rows(0, p_all).into_owned())
        .ok_or_else(|| RegressError::RankDeficient(names.clone()))?;
    let resid = &y_used - &xm * &beta_all;

    // only the named regressors are reported; leading columns of the dummy
    // path are fixed effects
    let offset = kept_fe_cols;
    let p = names.len();
    let beta: Vec<f64> = (0..p).map(|j| beta_all[offset + j]).collect();

    let fitted: Vec<f64> = sample.y.iter().zip(resid.iter()).map(|(y, e)| y - e).collect();
    let n_fitted_outside_unit = fitted.iter().filter(|&&f| !(0.0..=1.0).contains(&f)).count();

    let ssr: f64 = resid.iter().map(|e| e * e).sum();
    let ybar = sample.y.iter().sum::<f64>() / n as f64;
    let sst: f64 = sample.y.iter().map(|y| (y - ybar).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 0.0 };
    let sst_within: f64 = if groups.is_empty() {
        sst
    } else {
        y_tilde.iter().map(|y| y * y).sum()
    };
    let within_r_squared = if sst_within > 0.0 { 1.0 - ssr / sst_within } else { 0.0 };

    let ctx = CovContext {
        x: &xm,
        xtx_inv: &xtx_inv,
        resid: resid.as_slice(),
        n,
        k: k_total,
        offset,
    };
    let mut notes = Vec::new();
    let mut se_by_clustering = BTreeMap::new();
    let mut primary = None;
    for cl in [
        Clustering::None,
        Clustering::Hc1,
        Clustering::Subject,
        Clustering::Payoff,
        Clustering::TwoWay,
    ] {
        let Some(est) = covariance(&ctx, cl, &sample) else {
            continue;
        };
        let se: Vec<f64> = (0..p).map(|j| est.cov[(j, j)].max(0.0).sqrt()).collect();
        se_by_clustering.insert(cl, se);
        if cl == spec.clustering {
            notes.extend(est.notes.iter().cloned());
            primary = Some(est);
        }
    }
    let primary = primary.ok_or_else(|| {
        RegressError::InvalidSpec(format!(
            "clustering `{}` needs at least two clusters",
            spec.clustering.name()
        ))
    })?;
    let df = primary.df.unwrap_or((n - k_total) as f64);
    let tdist = StudentsT::new(0.0, 1.0, df).map_err(|e| RegressError::InvalidSpec(e.to_string()))?;
    let cov = primary.cov;
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let t = beta[j] / se;
            let p_value = if se > 0.0 {
                (2.0 * tdist.sf(t.abs())).min(1.0)
            } else if beta[j] == 0.0 {
                1.0
            } else {
                0.0
            };
            Coefficient {
                name: name.clone(),
                estimate: beta[j],
                se,
                t,
                p_value,
            }
        })
        .collect();
    if n_fitted_outside_unit > 0 {
        notes.push(format!("{n_fitted_outside_unit} fitted values outside [0, 1]"));
    }

    Ok(RegressionResult {
        coefficients,
        covariance: cov,
        se_by_clustering,
        clustering: spec.clustering,
        r_squared,
        within_r_squared,
        n_obs: n,
        n_params: k_total,
        n_clusters: primary.n_clusters,
        df,
        dropped,
        n_fitted_outside_unit,
        residuals: resid.iter().copied().collect(),
        notes,
    })
}

struct CovContext<'a> {
    x: &'a DMatrix<f64>,
    xtx_inv: &'a DMatrix<f64>,
    resid: &'a [f64],
    n: usize,
    k: usize,
    offset: usize,
}

struct CovEstimate {
    cov: DMatrix<f64>,
    n_clusters: Option<usize>,
    df: Option<f64>,
    notes: Vec<String>,
}

/// One-way CR1 sandwich; `None` with fewer than two clusters.
fn cr1(ctx: &CovContext<'_>, clusters: &[usize]) -> Option<(DMatrix<f64>, usize)> {
    let c = n_levels(clusters);
    if c < 2 {
        return None;
    }
    let p = ctx.x.ncols();
    let mut sums = DMatrix::<f64>::zeros(c, p);
    for (i, &g) in clusters.iter().enumerate() {
        for j in 0..p {
            sums[(g, j)] += ctx.x[(i, j)] * ctx.resid[i];
        }
    }
    let meat = sums.transpose() * &sums;
    let (n, k, cf) = (ctx.n as f64, ctx.k as f64, c as f64);
    let factor = cf / (cf - 1.0) * (n - 1.0) / (n - k);
    Some((ctx.xtx_inv * meat * ctx.xtx_inv * factor, c))
}

/// Rows and columns of the named regressors; fixed-effect dummies lead.
fn reported_block(ctx: &CovContext<'_>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let p = v.ncols() - ctx.offset;
    v.view((ctx.offset, ctx.offset), (p, p)).into_owned()
}

fn covariance(ctx: &CovContext<'_>, clustering: Clustering, sample: &Sample) -> Option<CovEstimate> {
    let (n, k) = (ctx.n as f64, ctx.k as f64);
    let plain = |cov, n_clusters: Option<usize>, df, notes| CovEstimate {
        cov,
        n_clusters,
        df,
        notes,
    };
    match clustering {
        Clustering::None => {
            let s2 = ctx.resid.iter().map(|e| e * e).sum::<f64>() / (n - k);
            Some(plain(reported_block(ctx, &(ctx.xtx_inv * s2)), None, None, vec![]))
        }
        Clustering::Hc1 => {
            let p = ctx.x.ncols();
            let mut meat = DMatrix::<f64>::zeros(p, p);
            for i in 0..ctx.n {
                let row = ctx.x.row(i);
                meat += row.transpose() * row * (ctx.resid[i] * ctx.resid[i]);
            }
            Some(plain(
                reported_block(ctx, &(ctx.xtx_inv * meat * ctx.xtx_inv * (n / (n - k)))),
                None,
                None,
                vec![],
            ))
        }
        Clustering::Subject | Clustering::Payoff => {
            let g = if clustering == Clustering::Subject {
                &sample.subject
            } else {
                &sample.payoff
            };
            cr1(ctx, g).map(|(cov, c)| plain(reported_block(ctx, &cov), Some(c), Some(c as f64 - 1.0), vec![]))
        }
        Clustering::TwoWay => {
            let vs = cr1(ctx, &sample.subject);
            let vp = cr1(ctx, &sample.payoff);
            match (vs, vp) {
                (None, None) => None,
                (Some((v, c)), None) => Some(plain(
                    reported_block(ctx, &v),
                    Some(c),
                    Some(c as f64 - 1.0),
                    vec!["two-way clustering fell back to subject clusters (single payoff cluster)".into()],
                )),
                (None, Some((v, c))) => Some(plain(
                    reported_block(ctx, &v),
                    Some(c),
                    Some(c as f64 - 1.0),
                    vec!["two-way clustering fell back to payoff clusters (single subject cluster)".into()],
                )),
                (Some((v1, c1)), Some((v2, c2))) => {
                    let v12 = cr1(ctx, &sample.cell)
                        .map(|(v, _)| v)
                        .unwrap_or_else(|| DMatrix::zeros(ctx.x.ncols(), ctx.x.ncols()));
                    let v = v1 + v2 - v12;
                    let v = reported_block(ctx, &v);
                    let v = (&v + v.transpose()) * 0.5;
                    let eig = v.clone().symmetric_eigen();
                    let mut notes = vec![];
                    let v = if eig.eigenvalues.min() < 0.0 {
                        notes.push("two-way covariance had negative eigenvalues; truncated at zero".into());
                        let lam = eig.eigenvalues.map(|l| l.max(0.0));
                        &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
                    } else {
                        v
                    };
                    let c = c1.min(c2);
                    Some(plain(v, Some(c), Some(c as f64 - 1.0), notes))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoSampleTests {
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub welch_t: f64,
    pub welch_df: f64,
    pub welch_p: f64,
    /// Mann-Whitney U of the first group.
    pub wilcoxon_u: f64,
    pub wilcoxon_p: f64,
    pub ks_statistic: f64,
    pub ks_p: f64,
}

/// Welch t, Wilcoxon rank-sum (normal approximation with tie and continuity
/// correction) and two-sample Kolmogorov-Smirnov tests.
pub fn two_sample_tests(a: &[f64], b: &[f64]) -> Result<TwoSampleTests, RegressError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(RegressError::DegenerateSample(
            "each group needs at least two values".into(),
        ));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(RegressError::DegenerateSample("non-finite value".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) && constant(b) && a[0] == b[0] {
        return Err(RegressError::DegenerateSample(
            "both groups constant and identical".into(),
        ));
    }
    let (welch_t, welch_df, welch_p) = welch(a, b);
    let (wilcoxon_u, wilcoxon_p) = mann_whitney(a, b);
    let (ks_statistic, ks_p) = kolmogorov_smirnov(a, b);
    Ok(TwoSampleTests {
        n_a: a.len(),
        n_b: b.len(),
        mean_a: a.mean(),
        mean_b: b.mean(),
        welch_t,
        welch_df,
        welch_p,
        wilcoxon_u,
        wilcoxon_p,
        ks_statistic,
        ks_p,
    })
}

fn welch(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (a.variance() / na, b.variance() / nb);
    let diff = a.mean() - b.mean();
    let se = (va + vb).sqrt();
    if se == 0.0 {
        // two different constants
        return (f64::INFINITY.copysign(diff), na + nb - 2.0, 0.0);
    }
    let t = diff / se;
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let p = StudentsT::new(0.0, 1.0, df)
        .map(|d| (2.0 * d.sf(t.abs())).min(1.0))
        .unwrap_or(f64::NAN);
    (t, df, p)
}

fn mann_whitney(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += all[i..=j].iter().filter(|v| v.1).count() as f64 * avg;
        i = j + 1;
    }
    let (na, nb, nf) = (a.len() as f64, b.len() as f64, n as f64);
    let u = rank_sum_a - na * (na + 1.0) / 2.0;
    let mu = na * nb / 2.0;
    let var = na * nb / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return (u, 1.0);
    }
    let d = u - mu;
    let z = (d.abs() - 0.5).max(0.0).copysign(d) / var.sqrt();
    (u, two_sided_normal_p(z))
}

fn kolmogorov_smirnov(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < na && j < nb {
        let x = xa[i].min(xb[j]);
        while i < na && xa[i] <= x {
            i += 1;
        }
        while j < nb && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

/// Complementary Kolmogorov distribution `Q(lambda)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 2.0;
    let mut prev = 0.0f64;
    for k in 1..=100 {
        let kf = k as f64;
        let term = sign * (a2 * kf * kf).exp();
        sum += term;
        if term.abs() <= 1e-10 * prev || term.abs() <= 1e-16 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev = term.abs();
    }
    // series did not converge: lambda is tiny
    1.0
}
