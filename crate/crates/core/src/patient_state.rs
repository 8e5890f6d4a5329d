//! Patient States A (best) to E (worst) over seven clinical dimensions,
//! dwell-time profiles, and the dwell-based classifications used for triage
//! and outcome evaluation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DailyRecord, SelfReport, SCORE_MAX};

pub const N_DIMS: usize = 7;
pub const N_STATES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("need at least 5 distinct feature vectors, got {0}")]
    TooFewDistinctPoints(usize),
    #[error("centroids for states {0} and {1} coincide")]
    DuplicateCentroid(PatientState, PatientState),
    #[error("centroid for state {0} has a component outside [0, 1]")]
    CentroidOutOfRange(PatientState),
    #[error("dwell profile has no counted days")]
    EmptyProfile,
    #[error("invalid state model: {0}")]
    Parse(String),
}

/// Feature order used throughout: the questionnaire dimensions, then the
/// wearable-derived mobility score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Sleep,
    Mood,
    Alertness,
    Activities,
    PainLevel,
    MedicationUsage,
    EffectiveMobility,
}

impl Dimension {
    pub const ALL: [Dimension; N_DIMS] = [
        Dimension::Sleep,
        Dimension::Mood,
        Dimension::Alertness,
        Dimension::Activities,
        Dimension::PainLevel,
        Dimension::MedicationUsage,
        Dimension::EffectiveMobility,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Seven features in `[0, 1]`, oriented so that higher is always better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateFeatures(pub [f64; N_DIMS]);

impl StateFeatures {
    pub fn get(&self, d: Dimension) -> f64 {
        self.0[d.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn composite(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionNorm {
    pub min: f64,
    pub max: f64,
    /// When set, the scaled value is flipped (`1 - s`) so lower raw values
    /// map to better features.
    pub inverted: bool,
}

impl DimensionNorm {
    pub fn scale(&self, raw: f64) -> f64 {
        let s = ((raw - self.min) / (self.max - self.min)).clamp(0.0, 1.0);
        if self.inverted {
            1.0 - s
        } else {
            s
        }
    }
}

/// Per-dimension scaling for [`featurize`]. Medication usage is scaled from
/// the day's total count across categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationConfig {
    pub dims: [DimensionNorm; N_DIMS],
    /// Mobility feature used on report days without a wearable sample.
    pub missing_mobility: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        let score = DimensionNorm {
            min: 0.0,
            max: SCORE_MAX,
            inverted: false,
        };
        Self {
            dims: [
                score,
                score,
                score,
                score,
                DimensionNorm {
                    inverted: true,
                    ..score
                },
                DimensionNorm {
                    min: 0.0,
                    max: 10.0,
                    inverted: true,
                },
                DimensionNorm {
                    min: 0.0,
                    max: 1.0,
                    inverted: false,
                },
            ],
            missing_mobility: 0.5,
        }
    }
}

impl NormalizationConfig {
    pub fn featurize_report(&self, report: &SelfReport, mobility: Option<f64>) -> StateFeatures {
        let raw = [
            report.sleep,
            report.mood,
            report.alertness,
            report.activity,
            report.pain,
            report.medication_use.total() as f64,
        ];
        let mut f = [0.0; N_DIMS];
        for (i, v) in raw.iter().enumerate() {
            f[i] = self.dims[i].scale(*v);
        }
        let mobility_dim = Dimension::EffectiveMobility.index();
        f[mobility_dim] = match mobility {
            Some(m) => self.dims[mobility_dim].scale(m),
            None => self.missing_mobility.clamp(0.0, 1.0),
        };
        StateFeatures(f)
    }
}

/// Features for one day, or `None` when the day has no questionnaire.
pub fn featurize(record: &DailyRecord, norm: &NormalizationConfig) -> Option<StateFeatures> {
    let report = record.report.as_ref()?;
    Some(norm.featurize_report(
        report,
        record.mobility.as_ref().map(|m| m.effective_mobility),
    ))
}

/// Ranked best (A) to worst (E). The derived ordering sorts A first, so
/// `a < b` reads "a is better than b".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatientState {
    A,
    B,
    C,
    D,
    E,
}

impl PatientState {
    pub const ALL: [PatientState; N_STATES] = [
        PatientState::A,
        PatientState::B,
        PatientState::C,
        PatientState::D,
        PatientState::E,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_better_than(self, other: PatientState) -> bool {
        self < other
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for PatientState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for PatientState {
    type Err = StateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            other => Err(StateError::Parse(format!("unknown state {other:?}"))),
        }
    }
}

/// One value per Patient State, serialized as `{"A": .., ..., "E": ..}`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerState<T> {
    #[serde(rename = "A")]
    pub a: T,
    #[serde(rename = "B")]
    pub b: T,
    #[serde(rename = "C")]
    pub c: T,
    #[serde(rename = "D")]
    pub d: T,
    #[serde(rename = "E")]
    pub e: T,
}

impl<T: Copy> PerState<T> {
    pub fn from_array(v: [T; N_STATES]) -> Self {
        Self {
            a: v[0],
            b: v[1],
            c: v[2],
            d: v[3],
            e: v[4],
        }
    }

    pub fn to_array(&self) -> [T; N_STATES] {
        [self.a, self.b, self.c, self.d, self.e]
    }

    pub fn get(&self, s: PatientState) -> T {
        self.to_array()[s.index()]
    }
}

/// Five centroids in `[0, 1]^7`, one per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PerState<[f64; N_DIMS]>", into = "PerState<[f64; N_DIMS]>")]
pub struct StateModel {
    centroids: [[f64; N_DIMS]; N_STATES],
}

impl TryFrom<PerState<[f64; N_DIMS]>> for StateModel {
    type Error = StateError;

    fn try_from(p: PerState<[f64; N_DIMS]>) -> Result<Self, Self::Error> {
        StateModel::new(p.to_array())
    }
}

impl From<StateModel> for PerState<[f64; N_DIMS]> {
    fn from(m: StateModel) -> Self {
        PerState::from_array(m.centroids)
    }
}

impl StateModel {
    pub fn new(centroids: [[f64; N_DIMS]; N_STATES]) -> Result<Self, StateError> {
        for (i, c) in centroids.iter().enumerate() {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(StateError::CentroidOutOfRange(PatientState::ALL[i]));
            }
            for (j, other) in centroids.iter().enumerate().skip(i + 1) {
                if c == other {
                    return Err(StateError::DuplicateCentroid(
                        PatientState::ALL[i],
                        PatientState::ALL[j],
                    ));
                }
            }
        }
        Ok(Self { centroids })
    }

    /// Evenly spaced illustrative centroids (0.9, 0.7, 0.5, 0.3, 0.1 on every
    /// dimension). Suitable for synthetic data only.
    pub fn reference() -> Self {
        Self::new([[0.9; N_DIMS], [0.7; N_DIMS], [0.5; N_DIMS], [0.3; N_DIMS], [0.1; N_DIMS]])
            .expect("reference centroids are valid")
    }

    pub fn centroid(&self, s: PatientState) -> &[f64; N_DIMS] {
        &self.centroids[s.index()]
    }

    pub fn centroids(&self) -> &[[f64; N_DIMS]; N_STATES] {
        &self.centroids
    }

    pub fn from_json(text: &str) -> Result<Self, StateError> {
        serde_json::from_str(text).map_err(|e| StateError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state model serializes")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance; exact ties resolve toward the
/// better state.
pub fn assign_state(f: &StateFeatures, model: &StateModel) -> PatientState {
    let mut best = PatientState::A;
    let mut best_d = f64::INFINITY;
    for s in PatientState::ALL {
        let d = sq_dist(&f.0, model.centroid(s));
        if d < best_d {
            best = s;
            best_d = d;
        }
    }
    best
}

const KMEANS_MAX_ITER: usize = 300;

/// k-means (k = 5, k-means++ seeding) over the feature vectors; clusters are
/// labelled A..E by descending centroid component sum.
///
/// Input is sorted before seeding, so the result depends on the multiset of
/// points and the seed, never on input order.
pub fn fit_centroids(features: &[StateFeatures], seed: u64) -> Result<StateModel, StateError> {
    let mut points: Vec<[f64; N_DIMS]> = features.iter().map(|f| f.0).collect();
    points.sort_by(lex_cmp);
    let distinct = {
        let mut d = points.clone();
        d.dedup();
        d.len()
    };
    if distinct < N_STATES {
        return Err(StateError::TooFewDistinctPoints(distinct));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<[f64; N_DIMS]> = Vec::with_capacity(N_STATES);
    centroids.push(points[rng.random_range(0..points.len())]);
    while centroids.len() < N_STATES {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, w) in weights.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            chosen = Some(i);
            if target < *w {
                break;
            }
            target -= w;
        }
        centroids.push(points[chosen.expect("a point away from all centroids exists")]);
    }

    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let nearest = nearest_index(p, &centroids);
            if assignment[i] != nearest {
                assignment[i] = nearest;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; N_DIMS]; N_STATES];
        let mut counts = vec![0usize; N_STATES];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..N_STATES {
            if counts[k] == 0 {
                // Reseed an empty cluster at the point worst served by its centroid.
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assignment[i]])))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                centroids[k] = points[far];
                assignment[far] = k;
            } else {
                for d in 0..N_DIMS {
                    centroids[k][d] = sums[k][d] / counts[k] as f64;
                }
            }
        }
    }

    centroids.sort_by(|a, b| {
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        sb.total_cmp(&sa).then_with(|| lex_cmp(a, b))
    });
    let mut out = [[0.0; N_DIMS]; N_STATES];
    out.copy_from_slice(&centroids);
    StateModel::new(out)
}

fn lex_cmp(a: &[f64; N_DIMS], b: &[f64; N_DIMS]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn nearest_index(p: &[f64; N_DIMS], centroids: &[[f64; N_DIMS]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Fraction of days spent in each state over a period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellProfile {
    pub fractions: PerState<f64>,
    pub days_counted: usize,
}

impl DwellProfile {
    /// No day had an assigned state; fractions are all zero and meaningless.
    pub fn is_empty(&self) -> bool {
        self.days_counted == 0
    }

    pub fn fraction(&self, s: PatientState) -> f64 {
        self.fractions.get(s)
    }

    fn sum_of(&self, states: &[PatientState]) -> f64 {
        states.iter().map(|s| self.fraction(*s)).sum()
    }

    pub fn higher(&self) -> f64 {
        self.sum_of(&HIGHER_STATES)
    }

    pub fn lower(&self) -> f64 {
        self.sum_of(&LOWER_STATES)
    }

    /// CSV rows `state,fraction,days_counted`, with a header.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["state", "fraction", "days_counted"]).expect("in-memory write");
        for s in PatientState::ALL {
            w.write_record([
                s.to_string(),
                self.fraction(s).to_string(),
                self.days_counted.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

pub const HIGHER_STATES: [PatientState; 2] = [PatientState::A, PatientState::B];
pub const LOWER_STATES: [PatientState; 2] = [PatientState::D, PatientState::E];

/// Tallies the share of each state over days that have one; absent days are
/// left out of the denominator.
pub fn dwell_times(states: &[Option<PatientState>]) -> DwellProfile {
    let mut counts = [0usize; N_STATES];
    for s in states.iter().flatten() {
        counts[s.index()] += 1;
    }
    let days: usize = counts.iter().sum();
    let mut fractions = [0.0; N_STATES];
    if days > 0 {
        for (f, c) in fractions.iter_mut().zip(counts) {
            *f = c as f64 / days as f64;
        }
    }
    DwellProfile {
        fractions: PerState::from_array(fractions),
        days_counted: days,
    }
}

/// Assigns a state to each record (absent on report-less days) and tallies.
pub fn dwell_profile_of(
    records: &[DailyRecord],
    norm: &NormalizationConfig,
    model: &StateModel,
) -> DwellProfile {
    let states: Vec<Option<PatientState>> = records
        .iter()
        .map(|r| featurize(r, norm).map(|f| assign_state(&f, model)))
        .collect();
    dwell_times(&states)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DwellChange {
    Improved,
    Worsened,
    Same,
}

impl DwellChange {
    pub const ALL: [DwellChange; 3] = [DwellChange::Improved, DwellChange::Worsened, DwellChange::Same];
}

impl fmt::Display for DwellChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DwellChange::Improved => "Improved",
            DwellChange::Worsened => "Worsened",
            DwellChange::Same => "Same",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Increase measured in absolute dwell-fraction points.
    Absolute,
    /// Increase measured relative to the comparison-period fraction.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwellChangeRule {
    pub threshold: f64,
    pub mode: ThresholdMode,
}

impl Default for DwellChangeRule {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            mode: ThresholdMode::Absolute,
        }
    }
}

impl DwellChangeRule {
    fn exceeds(&self, before: f64, after: f64) -> bool {
        match self.mode {
            ThresholdMode::Absolute => after - before > self.threshold,
            ThresholdMode::Relative => after > before * (1.0 + self.threshold) && after > before,
        }
    }

    fn group_rises(&self, cmp: &DwellProfile, rec: &DwellProfile, group: &[PatientState]) -> bool {
        group.iter().any(|s| self.exceeds(cmp.fraction(*s), rec.fraction(*s)))
            || self.exceeds(cmp.sum_of(group), rec.sum_of(group))
    }
}

/// Compares recommendation-period dwell against the comparison period.
/// A rise above the threshold in A, B or A+B is an improvement; in D, E or
/// D+E a worsening. Worsening takes precedence. Comparisons are strict.
pub fn classify_dwell_change(
    comparison: &DwellProfile,
    recommendation: &DwellProfile,
    rule: &DwellChangeRule,
) -> Result<DwellChange, StateError> {
    if comparison.is_empty() || recommendation.is_empty() {
        return Err(StateError::EmptyProfile);
    }
    let improved = rule.group_rises(comparison, recommendation, &HIGHER_STATES);
    let worsened = rule.group_rises(comparison, recommendation, &LOWER_STATES);
    Ok(if worsened {
        DwellChange::Worsened
    } else if improved {
        DwellChange::Improved
    } else {
        DwellChange::Same
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subgroup {
    ActiveRecommendations,
    ActiveMonitoring,
    OpportunityForFollowUp,
}

impl Subgroup {
    pub const ALL: [Subgroup; 3] = [
        Subgroup::ActiveRecommendations,
        Subgroup::ActiveMonitoring,
        Subgroup::OpportunityForFollowUp,
    ];
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subgroup::ActiveRecommendations => "ActiveRecommendations",
            Subgroup::ActiveMonitoring => "ActiveMonitoring",
            Subgroup::OpportunityForFollowUp => "OpportunityForFollowUp",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubgroupThresholds {
    /// A+B dwell above which a patient is only monitored.
    pub monitoring: f64,
    /// D+E dwell above which a patient is flagged for clinical follow-up.
    pub follow_up: f64,
}

impl Default for SubgroupThresholds {
    fn default() -> Self {
        Self {
            monitoring: 0.80,
            follow_up: 0.90,
        }
    }
}

pub fn classify_subgroup(
    comparison: &DwellProfile,
    thresholds: &SubgroupThresholds,
) -> Result<Subgroup, StateError> {
    if comparison.is_empty() {
        return Err(StateError::EmptyProfile);
    }
    Ok(if comparison.higher() > thresholds.monitoring {
        Subgroup::ActiveMonitoring
    } else if comparison.lower() > thresholds.follow_up {
        Subgroup::OpportunityForFollowUp
    } else {
        Subgroup::ActiveRecommendations
    })
}
