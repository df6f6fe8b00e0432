//! Synthetic experiments: populations of preference types, the four
//! treatment arms, seeded logit choice sampling, sample filters and
//! descriptive summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, SimulateError};
use crate::model::{
    classify_switch, utility_difference, Awareness, Frame, PayoffConfiguration, PayoffTable, PreferenceParameters,
    SwitchKind,
};
use crate::numeric::{logistic, quantile_sorted};

/// Probability that the selfish option is chosen under logit noise with
/// sensitivity `sigma`.
pub fn choice_probability(params: &PreferenceParameters, payoff: &PayoffConfiguration, p_hat: Awareness) -> f64 {
    let eta = params.sigma * utility_difference(params, payoff, p_hat);
    if eta.is_nan() {
        // sigma = 0 with an infinite difference; zero sensitivity wins
        return 0.5;
    }
    logistic(eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationComponent {
    pub weight: f64,
    /// Parameters in the neutral frame (and in the market frame unless
    /// `market` overrides them).
    pub params: PreferenceParameters,
    #[serde(default)]
    pub market: Option<PreferenceParameters>,
    #[serde(default = "fully_unaware")]
    pub p_hat_nonvoi: Awareness,
}

fn fully_unaware() -> Awareness {
    Awareness::FULLY_UNAWARE
}

impl PopulationComponent {
    pub fn new(weight: f64, params: PreferenceParameters) -> Self {
        Self {
            weight,
            params,
            market: None,
            p_hat_nonvoi: Awareness::FULLY_UNAWARE,
        }
    }

    pub fn with_market(mut self, market: PreferenceParameters) -> Self {
        self.market = Some(market);
        self
    }

    pub fn with_p_hat_nonvoi(mut self, p_hat: Awareness) -> Self {
        self.p_hat_nonvoi = p_hat;
        self
    }

    pub fn params_for(&self, frame: Frame) -> &PreferenceParameters {
        match (frame, &self.market) {
            (Frame::Market, Some(m)) => m,
            _ => &self.params,
        }
    }
}

/// Finite mixture of preference types from which subjects are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub components: Vec<PopulationComponent>,
}

impl PopulationSpec {
    pub fn new(components: Vec<PopulationComponent>) -> Result<Self, SimulateError> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn single(params: PreferenceParameters) -> Result<Self, SimulateError> {
        Self::new(vec![PopulationComponent::new(1.0, params)])
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        if self.components.is_empty() {
            return Err(SimulateError::InvalidPopulation("no components".into()));
        }
        let mut total = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(SimulateError::InvalidPopulation(format!(
                    "component {i}: weight {} outside (0, 1]",
                    c.weight
                )));
            }
            total += c.weight;
            c.params.validate_for_simulation()?;
            if let Some(m) = &c.market {
                m.validate_for_simulation()?;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimulateError::InvalidPopulation(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    fn draw_component<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.components.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    N,
    M,
    A,
    B,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::N, Arm::M, Arm::A, Arm::B];

    /// Frame and VOI status of the first and second sequence.
    pub fn conditions(self) -> [SequenceCondition; 2] {
        use Frame::{Market, Neutral};
        let c = |frame, voi| SequenceCondition { frame, voi };
        match self {
            Arm::N => [c(Neutral, false), c(Neutral, true)],
            Arm::M => [c(Market, false), c(Market, true)],
            Arm::A => [c(Neutral, true), c(Market, true)],
            Arm::B => [c(Market, true), c(Neutral, true)],
        }
    }

    pub fn has_nonvoi(self) -> bool {
        matches!(self, Arm::N | Arm::M)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arm::N => "N",
            Arm::M => "M",
            Arm::A => "A",
            Arm::B => "B",
        };
        f.write_str(s)
    }
}

impl FromStr for Arm {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "N" => Ok(Arm::N),
            "M" => Ok(Arm::M),
            "A" => Ok(Arm::A),
            "B" => Ok(Arm::B),
            other => Err(ModelError::Parse(format!("unknown arm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SequenceCondition {
    pub frame: Frame,
    pub voi: bool,
}

/// One of the eight decision sequences N1, N2, M1, ... B2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SequenceLabel {
    pub arm: Arm,
    pub index: u8,
}

impl SequenceLabel {
    pub fn new(arm: Arm, index: u8) -> Self {
        Self { arm, index }
    }

    pub fn all() -> Vec<SequenceLabel> {
        Arm::ALL
            .iter()
            .flat_map(|&arm| [1, 2].map(|i| SequenceLabel::new(arm, i)))
            .collect()
    }
}

impl fmt::Display for SequenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.arm, self.index)
    }
}

impl FromStr for SequenceLabel {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || ModelError::Parse(format!("unknown decision sequence `{s}`"));
        if s.len() != 2 {
            return Err(bad());
        }
        let arm: Arm = s[..1].parse().map_err(|_| bad())?;
        match &s[1..] {
            "1" => Ok(SequenceLabel::new(arm, 1)),
            "2" => Ok(SequenceLabel::new(arm, 2)),
            _ => Err(bad()),
        }
    }
}

/// One treatment arm: two sequences over the same payoff list.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentPlan {
    pub arm: Arm,
    pub payoff_ids: Vec<u32>,
}

impl TreatmentPlan {
    pub fn new(arm: Arm, payoff_ids: Vec<u32>) -> Self {
        Self { arm, payoff_ids }
    }

    /// Plan over every payoff of `payoffs`, in table order.
    pub fn for_table(arm: Arm, payoffs: &PayoffTable) -> Self {
        Self::new(arm, payoffs.ids())
    }

    pub fn sequences(&self) -> [(SequenceCondition, &[u32]); 2] {
        let [a, b] = self.arm.conditions();
        [(a, &self.payoff_ids), (b, &self.payoff_ids)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceRecord {
    pub subject_id: u32,
    pub arm: Arm,
    pub sequence: u8,
    pub payoff_id: u32,
    pub frame: Frame,
    pub voi: bool,
    pub p_hat: f64,
    pub choice: bool,
    /// Opaque extra columns, aligned with `ChoiceDataset::control_names`.
    pub controls: Vec<String>,
}

impl ChoiceRecord {
    pub fn label(&self) -> SequenceLabel {
        SequenceLabel::new(self.arm, self.sequence)
    }

    pub fn awareness(&self) -> Result<Awareness, ModelError> {
        Awareness::new(self.p_hat)
    }
}

/// Generating component of a simulated subject, kept for recovery checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectTruth {
    pub subject_id: u32,
    pub component: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    pub payoffs: PayoffTable,
    pub records: Vec<ChoiceRecord>,
    pub control_names: Vec<String>,
    pub truth: Vec<SubjectTruth>,
}

impl ChoiceDataset {
    pub fn new(
        payoffs: PayoffTable,
        records: Vec<ChoiceRecord>,
        control_names: Vec<String>,
    ) -> Result<Self, SimulateError> {
        let mut keys = BTreeSet::new();
        for r in &records {
            if payoffs.get(r.payoff_id).is_none() {
                return Err(ModelError::UnknownPayoff(r.payoff_id).into());
            }
            r.awareness()?;
            if r.voi != (r.p_hat == 0.5) {
                return Err(SimulateError::InvalidPlan(format!(
                    "subject {}: voi flag {} inconsistent with p_hat {}",
                    r.subject_id, r.voi, r.p_hat
                )));
            }
            if r.controls.len() != control_names.len() {
                return Err(SimulateError::InvalidPlan(format!(
                    "subject {}: {} control values for {} control columns",
                    r.subject_id,
                    r.controls.len(),
                    control_names.len()
                )));
            }
            if !keys.insert((r.subject_id, r.sequence, r.payoff_id)) {
                return Err(SimulateError::InvalidPlan(format!(
                    "duplicate record (subject {}, sequence {}, payoff {})",
                    r.subject_id, r.sequence, r.payoff_id
                )));
            }
        }
        Ok(Self {
            payoffs,
            records,
            control_names,
            truth: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct subject ids in ascending order.
    pub fn subject_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.subject_id).collect();
        set.into_iter().collect()
    }

    pub fn payoff(&self, id: u32) -> Result<&PayoffConfiguration, ModelError> {
        self.payoffs.get(id).ok_or(ModelError::UnknownPayoff(id))
    }

    /// Keeps records satisfying `keep`; truth annotations follow the
    /// surviving subjects.
    pub fn filter<F: Fn(&ChoiceRecord) -> bool>(&self, keep: F) -> ChoiceDataset {
        let records: Vec<ChoiceRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let ids: BTreeSet<u32> = records.iter().map(|r| r.subject_id).collect();
        ChoiceDataset {
            payoffs: self.payoffs.clone(),
            records,
            control_names: self.control_names.clone(),
            truth: self
                .truth
                .iter()
                .filter(|t| ids.contains(&t.subject_id))
                .copied()
                .collect(),
        }
    }

    pub fn frame_partition(&self, frame: Frame) -> ChoiceDataset {
        self.filter(|r| r.frame == frame)
    }

    pub fn sequences(&self, labels: &[SequenceLabel]) -> ChoiceDataset {
        self.filter(|r| labels.contains(&r.label()))
    }

    /// Canonical order: subject, sequence, payoff id.
    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| (r.subject_id, r.sequence, r.payoff_id));
        self.truth.sort_by_key(|t| t.subject_id);
    }
}

fn subject_rng(seed: u64, subject_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(subject_id));
    rng
}

/// Draws choices for one subject of component `component` on a list of
/// (condition, payoff ids, sequence index) blocks.
fn simulate_subject(
    population: &PopulationSpec,
    component: usize,
    subject_id: u32,
    arm: Arm,
    blocks: &[(SequenceCondition, &[u32], u8)],
    payoffs: &PayoffTable,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ChoiceRecord>, SimulateError> {
    let comp = &population.components[component];
    let mut out = Vec::new();
    for &(cond, ids, sequence) in blocks {
        let params = comp.params_for(cond.frame);
        let awareness = if cond.voi { Awareness::VOI } else { comp.p_hat_nonvoi };
        for &id in ids {
            let payoff = payoffs.get(id).ok_or(ModelError::UnknownPayoff(id))?;
            let p = choice_probability(params, payoff, awareness);
            let u: f64 = rng.random();
            out.push(ChoiceRecord {
                subject_id,
                arm,
                sequence,
                payoff_id: id,
                frame: cond.frame,
                voi: awareness.is_voi(),
                p_hat: awareness.value(),
                choice: u < p,
                controls: Vec::new(),
            });
        }
    }
    Ok(out)
}

/// Simulates `n` subjects per plan. Subject ids run from 1 in plan order;
/// each subject has its own random stream derived from `seed`, so the output
/// does not depend on the number of worker threads.
pub fn simulate_experiment(
    population: &PopulationSpec,
    plans: &[(TreatmentPlan, usize)],
    payoffs: &PayoffTable,
    seed: u64,
) -> Result<ChoiceDataset, SimulateError> {
    population.validate()?;
    let mut jobs = Vec::new();
    let mut next_id = 1u32;
    for (plan, n) in plans {
        if *n == 0 {
            return Err(SimulateError::InvalidPlan(format!(
                "arm {} needs at least one subject",
                plan.arm
            )));
        }
        for id in &plan.payoff_ids {
            payoffs.get(*id).ok_or(ModelError::UnknownPayoff(*id))?;
        }
        for _ in 0..*n {
            jobs.push((next_id, plan));
            next_id += 1;
        }
    }

    let per_subject: Vec<(SubjectTruth, Vec<ChoiceRecord>)> = jobs
        .par_iter()
        .map(|&(subject_id, plan)| {
            let mut rng = subject_rng(seed, subject_id);
            let component = population.draw_component(&mut rng);
            let [(c1, ids1), (c2, ids2)] = plan.sequences();
            let records = simulate_subject(
                population,
                component,
                subject_id,
                plan.arm,
                &[(c1, ids1, 1), (c2, ids2, 2)],
                payoffs,
                &mut rng,
            )?;
            Ok((SubjectTruth { subject_id, component }, records))
        })
        .collect::<Result<_, SimulateError>>()?;

    let mut truth = Vec::with_capacity(per_subject.len());
    let mut records = Vec::new();
    for (t, r) in per_subject {
        truth.push(t);
        records.extend(r);
    }
    let mut ds = ChoiceDataset {
        payoffs: payoffs.clone(),
        records,
        control_names: Vec::new(),
        truth,
    };
    ds.sort();
    Ok(ds)
}

/// Between-subject single-sequence design: `n_voi` subjects make one VOI
/// sequence (recorded as A1) and `n_nonvoi` one non-VOI sequence (N1), all in
/// `frame`. Types are drawn for the pooled subjects, who are then randomly
/// assigned to the two conditions.
pub fn simulate_between_subjects(
    population: &PopulationSpec,
    n_voi: usize,
    n_nonvoi: usize,
    frame: Frame,
    payoffs: &PayoffTable,
    seed: u64,
) -> Result<ChoiceDataset, SimulateError> {
    population.validate()?;
    let n = n_voi + n_nonvoi;
    if n_voi == 0 || n_nonvoi == 0 {
        return Err(SimulateError::InvalidPlan(
            "both conditions need at least one subject".into(),
        ));
    }
    // assignment stream sits past every subject stream
    let mut assign_rng = subject_rng(seed, u32::MAX);
    let mut slots: Vec<bool> = (0..n).map(|i| i < n_voi).collect();
    rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), &mut assign_rng);

    let ids = payoffs.ids();
    let per_subject: Vec<(SubjectTruth, Vec<ChoiceRecord>)> = slots
        .par_iter()
        .enumerate()
        .map(|(i, &voi)| {
            let subject_id = i as u32 + 1;
            let mut rng = subject_rng(seed, subject_id);
            let component = population.draw_component(&mut rng);
            let (arm, cond) = if voi {
                (Arm::A, SequenceCondition { frame, voi: true })
            } else {
                (Arm::N, SequenceCondition { frame, voi: false })
            };
            let records = simulate_subject(
                population,
                component,
                subject_id,
                arm,
                &[(cond, &ids, 1)],
                payoffs,
                &mut rng,
            )?;
            Ok((SubjectTruth { subject_id, component }, records))
        })
        .collect::<Result<_, SimulateError>>()?;

    let mut truth = Vec::with_capacity(n);
    let mut records = Vec::new();
    for (t, r) in per_subject {
        truth.push(t);
        records.extend(r);
    }
    Ok(ChoiceDataset {
        payoffs: payoffs.clone(),
        records,
        control_names: Vec::new(),
        truth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreLevel {
    Full,
    Core1,
    Core2,
}

impl FromStr for CoreLevel {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(CoreLevel::Full),
            "core1" => Ok(CoreLevel::Core1),
            "core2" => Ok(CoreLevel::Core2),
            other => Err(ModelError::Parse(format!("unknown sample level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchCounts {
    pub expected: usize,
    pub unexpected: usize,
}

/// Counts expected/unexpected switches per subject by pairing the non-VOI
/// and VOI choice on each payoff.
pub fn switch_counts(dataset: &ChoiceDataset) -> Result<BTreeMap<u32, SwitchCounts>, SimulateError> {
    let mut pairs: BTreeMap<(u32, u32), (Option<bool>, Option<bool>)> = BTreeMap::new();
    for r in &dataset.records {
        if !r.arm.has_nonvoi() {
            return Err(SimulateError::UnpairedArm {
                subject: r.subject_id,
                arm: r.arm.to_string(),
            });
        }
        let slot = pairs.entry((r.subject_id, r.payoff_id)).or_default();
        if r.voi {
            slot.1 = Some(r.choice);
        } else {
            slot.0 = Some(r.choice);
        }
    }
    let mut out: BTreeMap<u32, SwitchCounts> = BTreeMap::new();
    for ((subject, payoff), (nonvoi, voi)) in pairs {
        let (Some(nonvoi), Some(voi)) = (nonvoi, voi) else {
            return Err(SimulateError::IncompletePair {
                subject,
                reason: format!("payoff {payoff} lacks a non-VOI/VOI pair"),
            });
        };
        let c = out.entry(subject).or_default();
        match classify_switch(nonvoi, voi) {
            SwitchKind::Expected => c.expected += 1,
            SwitchKind::Unexpected => c.unexpected += 1,
            SwitchKind::None => {}
        }
    }
    Ok(out)
}

/// Core 1: subjects with at least one switch. Core 2: Core 1 minus subjects
/// with at least as many unexpected as expected switches.
pub fn core_sample_filter(dataset: &ChoiceDataset, level: CoreLevel) -> Result<ChoiceDataset, SimulateError> {
    let counts = switch_counts(dataset)?;
    if level == CoreLevel::Full {
        return Ok(dataset.clone());
    }
    let keep: BTreeSet<u32> = counts
        .iter()
        .filter(|(_, c)| {
            let core1 = c.expected + c.unexpected >= 1;
            match level {
                CoreLevel::Core1 => core1,
                _ => core1 && c.unexpected < c.expected,
            }
        })
        .map(|(&id, _)| id)
        .collect();
    Ok(dataset.filter(|r| keep.contains(&r.subject_id)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    Frame,
    Voi,
    FrameVoi,
}

impl FromStr for Grouping {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "frame" => Ok(Grouping::Frame),
            "voi" => Ok(Grouping::Voi),
            "frame-voi" | "frame_voi" | "framexvoi" | "frame×voi" => Ok(Grouping::FrameVoi),
            other => Err(ModelError::Parse(format!("unknown grouping `{other}`"))),
        }
    }
}

/// Number of selfish choices made by one subject in one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCount {
    pub subject_id: u32,
    pub label: SequenceLabel,
    pub frame: Frame,
    pub voi: bool,
    pub selfish: usize,
}

pub fn sequence_counts(dataset: &ChoiceDataset) -> Vec<SequenceCount> {
    let mut map: BTreeMap<(u32, SequenceLabel), SequenceCount> = BTreeMap::new();
    for r in &dataset.records {
        let e = map.entry((r.subject_id, r.label())).or_insert_with(|| SequenceCount {
            subject_id: r.subject_id,
            label: r.label(),
            frame: r.frame,
            voi: r.voi,
            selfish: 0,
        });
        e.selfish += usize::from(r.choice);
    }
    map.into_values().collect()
}

fn group_name(grouping: Grouping, frame: Frame, voi: bool) -> String {
    let v = if voi { "VOI" } else { "non-VOI" };
    match grouping {
        Grouping::Frame => match frame {
            Frame::Neutral => "Neutral".into(),
            Frame::Market => "Market".into(),
        },
        Grouping::Voi => v.into(),
        Grouping::FrameVoi => {
            let f = match frame {
                Frame::Neutral => "Neutral",
                Frame::Market => "Market",
            };
            format!("{f} {v}")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub n_sequences: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub q3: f64,
    #[serde(skip)]
    pub counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptiveSummary {
    pub rows: Vec<GroupSummary>,
    /// Groups with no sequences in the data.
    pub omitted: Vec<String>,
}

/// Distribution of per-sequence selfish counts by group.
pub fn descriptive_summary(dataset: &ChoiceDataset, grouping: Grouping) -> Result<DescriptiveSummary, SimulateError> {
    if dataset.is_empty() {
        return Err(SimulateError::EmptyDataset);
    }
    let groups: Vec<(Frame, bool)> = match grouping {
        Grouping::Frame => vec![(Frame::Neutral, false), (Frame::Market, false)],
        Grouping::Voi => vec![(Frame::Neutral, true), (Frame::Neutral, false)],
        Grouping::FrameVoi => vec![
            (Frame::Neutral, true),
            (Frame::Neutral, false),
            (Frame::Market, true),
            (Frame::Market, false),
        ],
    };
    let counts = sequence_counts(dataset);
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for (frame, voi) in groups {
        let member = |c: &SequenceCount| match grouping {
            Grouping::Frame => c.frame == frame,
            Grouping::Voi => c.voi == voi,
            Grouping::FrameVoi => c.frame == frame && c.voi == voi,
        };
        let mut v: Vec<f64> = counts.iter().filter(|c| member(c)).map(|c| c.selfish as f64).collect();
        let name = group_name(grouping, frame, voi);
        if v.is_empty() {
            omitted.push(name);
            continue;
        }
        let unsorted = v.clone();
        v.sort_by(f64::total_cmp);
        rows.push(GroupSummary {
            group: name,
            n_sequences: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile_sorted(&v, 0.5),
            min: v[0],
            max: v[v.len() - 1],
            q1: quantile_sorted(&v, 0.25),
            q3: quantile_sorted(&v, 0.75),
            counts: unsorted,
        });
    }
    Ok(DescriptiveSummary { rows, omitted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table() -> PayoffTable {
        PayoffTable::builtin()
    }

    fn record(subject: u32, seq: u8, payoff: u32, voi: bool, choice: bool) -> ChoiceRecord {
        ChoiceRecord {
            subject_id: subject,
            arm: Arm::N,
            sequence: seq,
            payoff_id: payoff,
            frame: Frame::Neutral,
            voi,
            p_hat: if voi { 0.5 } else { 1.0 },
            choice,
            controls: vec![],
        }
    }

    /// Subject with `expected` and `unexpected` switches among 20 payoffs.
    fn paired_subject(id: u32, expected: u32, unexpected: u32) -> Vec<ChoiceRecord> {
        let mut out = vec![];
        for p in 1..=20u32 {
            let (a, b) = if p <= expected {
                (true, false)
            } else if p <= expected + unexpected {
                (false, true)
            } else {
                (true, true)
            };
            out.push(record(id, 1, p, false, a));
            out.push(record(id, 2, p, true, b));
        }
        out
    }

    #[test]
    fn choice_probability_examples() {
        let p1 = *table().get(1).unwrap();
        let zero = PreferenceParameters::new(0.3, 0.4, 0.0);
        assert_eq!(choice_probability(&zero, &p1, Awareness::VOI), 0.5);
        let p = choice_probability(
            &PreferenceParameters::new(0.0, 0.0, 0.295),
            &p1,
            Awareness::FULLY_UNAWARE,
        );
        assert_abs_diff_eq!(p, 1.0 / (1.0 + (-4.425f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(p, 0.98817, epsilon = 1e-5);
        for sigma in [0.01, 1.0, 1e6] {
            let q = choice_probability(&PreferenceParameters::new(0.6, 0.0, sigma), &p1, Awareness::VOI);
            assert_eq!(q, 0.5);
        }
    }

    #[test]
    fn arms_have_the_documented_sequences() {
        let [a, b] = Arm::A.conditions();
        assert_eq!(
            (a.frame, a.voi, b.frame, b.voi),
            (Frame::Neutral, true, Frame::Market, true)
        );
        let [a, b] = Arm::M.conditions();
        assert_eq!(
            (a.frame, a.voi, b.frame, b.voi),
            (Frame::Market, false, Frame::Market, true)
        );
        assert_eq!("B2".parse::<SequenceLabel>().unwrap(), SequenceLabel::new(Arm::B, 2));
        assert!("C1".parse::<SequenceLabel>().is_err());
        assert_eq!(SequenceLabel::all().len(), 8);
    }

    #[test]
    fn population_validation() {
        let p = PreferenceParameters::new(0.1, 0.2, 0.3);
        assert!(PopulationSpec::new(vec![PopulationComponent::new(0.5, p)]).is_err());
        assert!(PopulationSpec::single(PreferenceParameters::new(0.1, 1.2, 0.3)).is_err());
        assert!(PopulationSpec::single(PreferenceParameters::new(0.1, 0.2, -0.3)).is_err());
        assert!(PopulationSpec::new(vec![]).is_err());
        assert!(PopulationSpec::new(vec![PopulationComponent::new(0.3, p), PopulationComponent::new(0.7, p)]).is_ok());
    }

    #[test]
    fn deterministic_selfish_type_always_sells() {
        let pop = PopulationSpec::single(PreferenceParameters::new(0.0, 0.0, 1e6)).unwrap();
        let plan = TreatmentPlan::for_table(Arm::N, &table());
        let ds = simulate_experiment(&pop, &[(plan, 25)], &table(), 3).unwrap();
        assert_eq!(ds.len(), 25 * 40);
        assert!(ds.records.iter().all(|r| r.choice));
    }

    #[test]
    fn same_seed_same_data() {
        let pop = PopulationSpec::single(PreferenceParameters::new(0.194, 0.258, 0.295)).unwrap();
        let plans = [
            (TreatmentPlan::for_table(Arm::N, &table()), 10),
            (TreatmentPlan::for_table(Arm::B, &table()), 5),
        ];
        let a = simulate_experiment(&pop, &plans, &table(), 11).unwrap();
        let b = simulate_experiment(&pop, &plans, &table(), 11).unwrap();
        let c = simulate_experiment(&pop, &plans, &table(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.subject_ids(), (1..=15).collect::<Vec<_>>());
    }

    #[test]
    fn core_filters() {
        let mut recs = paired_subject(1, 0, 0);
        recs.extend(paired_subject(2, 3, 0));
        recs.extend(paired_subject(3, 1, 1));
        let ds = ChoiceDataset::new(table(), recs, vec![]).unwrap();
        let c1 = core_sample_filter(&ds, CoreLevel::Core1).unwrap();
        assert_eq!(c1.subject_ids(), vec![2, 3]);
        let c2 = core_sample_filter(&ds, CoreLevel::Core2).unwrap();
        assert_eq!(c2.subject_ids(), vec![2]);
        // idempotent
        assert_eq!(core_sample_filter(&c1, CoreLevel::Core1).unwrap(), c1);
        assert_eq!(core_sample_filter(&c2, CoreLevel::Core2).unwrap(), c2);
        assert_eq!(core_sample_filter(&ds, CoreLevel::Full).unwrap(), ds);
    }

    #[test]
    fn core_filter_rejects_voi_only_arms() {
        let pop = PopulationSpec::single(PreferenceParameters::new(0.1, 0.2, 0.3)).unwrap();
        let ds = simulate_experiment(&pop, &[(TreatmentPlan::for_table(Arm::A, &table()), 2)], &table(), 1).unwrap();
        assert!(matches!(
            core_sample_filter(&ds, CoreLevel::Core1),
            Err(SimulateError::UnpairedArm { .. })
        ));
    }

    #[test]
    fn summary_of_all_selfish_data() {
        let pop = PopulationSpec::single(PreferenceParameters::new(0.0, 0.0, 1e6)).unwrap();
        let ds = simulate_experiment(&pop, &[(TreatmentPlan::for_table(Arm::N, &table()), 4)], &table(), 9).unwrap();
        let s = descriptive_summary(&ds, Grouping::FrameVoi).unwrap();
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.omitted, vec!["Market VOI".to_string(), "Market non-VOI".to_string()]);
        for row in &s.rows {
            assert_eq!(row.n_sequences, 4);
            for v in [row.mean, row.median, row.min, row.max, row.q1, row.q3] {
                assert_eq!(v, 20.0);
            }
        }
    }

    #[test]
    fn market_shift_raises_market_mean() {
        let neutral = PreferenceParameters::new(0.25, 0.2, 0.3);
        let market = PreferenceParameters::new(0.15, 0.2, 0.3);
        let pop = PopulationSpec::new(vec![PopulationComponent::new(1.0, neutral).with_market(market)]).unwrap();
        let plans = [
            (TreatmentPlan::for_table(Arm::N, &table()), 100),
            (TreatmentPlan::for_table(Arm::M, &table()), 100),
        ];
        let ds = simulate_experiment(&pop, &plans, &table(), 5).unwrap();
        let s = descriptive_summary(&ds, Grouping::Frame).unwrap();
        assert_eq!(s.rows[0].group, "Neutral");
        assert!(s.rows[1].mean > s.rows[0].mean);
    }

    #[test]
    fn empty_summary_is_an_error() {
        let ds = ChoiceDataset::new(table(), vec![], vec![]).unwrap();
        assert!(descriptive_summary(&ds, Grouping::Voi).is_err());
    }

    #[test]
    fn dataset_rejects_duplicates_and_bad_payoffs() {
        let r = record(1, 1, 1, false, true);
        assert!(ChoiceDataset::new(table(), vec![r.clone(), r.clone()], vec![]).is_err());
        let mut bad = r.clone();
        bad.payoff_id = 99;
        assert!(ChoiceDataset::new(table(), vec![bad], vec![]).is_err());
        let mut bad = r;
        bad.voi = true;
        assert!(ChoiceDataset::new(table(), vec![bad], vec![]).is_err());
    }

    #[test]
    fn between_subject_design_sizes() {
        let pop = PopulationSpec::single(PreferenceParameters::new(0.1, 0.3, 0.2)).unwrap();
        let ds = simulate_between_subjects(&pop, 55, 54, Frame::Neutral, &table(), 4).unwrap();
        let counts = sequence_counts(&ds);
        assert_eq!(counts.iter().filter(|c| c.voi).count(), 55);
        assert_eq!(counts.iter().filter(|c| !c.voi).count(), 54);
        assert_eq!(ds.len(), 109 * 20);
    }
}
