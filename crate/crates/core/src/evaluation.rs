//! Outcome analysis between an equal-length comparison period and
//! recommendation period: per-metric two-sample permutation tests, the
//! QoL-majority rule, holistic labels and cohort cross-tabulation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DailyRecord, PatientId};
use crate::patient_state::{
    classify_dwell_change, classify_subgroup, dwell_profile_of, DwellChange, DwellChangeRule,
    DwellProfile, NormalizationConfig, StateError, StateModel, Subgroup, SubgroupThresholds,
};
use crate::rng::{mix_seed, substream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("permutation test needs at least 2 values per group, got {a} and {b}")]
    Undersized { a: usize, b: usize },
    #[error("no pain outcome among metric outcomes")]
    MissingPain,
    #[error("{0} period has no records")]
    EmptyPeriod(&'static str),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Exact enumeration is used up to this many label assignments.
pub const EXACT_LIMIT: u128 = 200_000;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMethod {
    /// Exact when the number of splits is at most [`EXACT_LIMIT`].
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub n_resamples: usize,
    pub seed: u64,
    pub method: PermutationMethod,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
            method: PermutationMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    /// `mean(b) - mean(a)`.
    pub effect: f64,
    pub exact: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    c
}

/// Two-sided permutation test on the difference of means.
///
/// The p-value is the share of label assignments whose absolute mean
/// difference is at least the observed one. Monte-Carlo estimates count the
/// observed assignment in numerator and denominator, so they are never 0.
pub fn permutation_test_with(
    a: &[f64],
    b: &[f64],
    config: &PermutationConfig,
) -> Result<PermutationResult, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::Undersized {
            a: a.len(),
            b: b.len(),
        });
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let total: f64 = pooled.iter().sum();
    let stat = |sum_a: f64| (sum_a / na as f64 - (total - sum_a) / nb as f64).abs();
    let observed = stat(a.iter().sum());
    let tol = 1e-9 * observed.max(pooled.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0));
    let extreme = |s: f64| s >= observed - tol;

    let splits = binomial(na + nb, na);
    let exact = match config.method {
        PermutationMethod::Exact => true,
        PermutationMethod::MonteCarlo => false,
        PermutationMethod::Auto => splits <= EXACT_LIMIT,
    };
    let p_value = if exact {
        let mut hits: u64 = 0;
        let mut count: u64 = 0;
        for_each_combination(na + nb, na, |idx| {
            let s: f64 = idx.iter().map(|&i| pooled[i]).sum();
            count += 1;
            if extreme(stat(s)) {
                hits += 1;
            }
        });
        hits as f64 / count as f64
    } else {
        let mut rng = substream(config.seed, "permutation");
        let mut work = pooled.clone();
        let mut hits: u64 = 0;
        for _ in 0..config.n_resamples {
            let (chosen, _) = work.partial_shuffle(&mut rng, na);
            let s: f64 = chosen.iter().sum();
            if extreme(stat(s)) {
                hits += 1;
            }
        }
        (hits + 1) as f64 / (config.n_resamples + 1) as f64
    };
    Ok(PermutationResult {
        p_value,
        effect: mean(b) - mean(a),
        exact,
    })
}

/// p-value only; exact enumeration when feasible, seeded Monte-Carlo
/// otherwise.
pub fn permutation_test(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<f64, EvalError> {
    permutation_test_with(
        a,
        b,
        &PermutationConfig {
            n_resamples,
            seed,
            method: PermutationMethod::Auto,
        },
    )
    .map(|r| r.p_value)
}

/// Visits every k-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Pain,
    Mood,
    Sleep,
    Alertness,
    Activity,
    MedOtc,
    MedPrescribed,
    MedOpioid,
    MedSleep,
    Adl,
}

impl MetricId {
    pub const ALL: [MetricId; 10] = [
        MetricId::Pain,
        MetricId::Mood,
        MetricId::Sleep,
        MetricId::Alertness,
        MetricId::Activity,
        MetricId::MedOtc,
        MetricId::MedPrescribed,
        MetricId::MedOpioid,
        MetricId::MedSleep,
        MetricId::Adl,
    ];

    /// Pain and medication counts improve when they go down.
    pub fn lower_is_better(self) -> bool {
        matches!(
            self,
            MetricId::Pain
                | MetricId::MedOtc
                | MetricId::MedPrescribed
                | MetricId::MedOpioid
                | MetricId::MedSleep
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricId::Pain => "pain",
            MetricId::Mood => "mood",
            MetricId::Sleep => "sleep",
            MetricId::Alertness => "alertness",
            MetricId::Activity => "activity",
            MetricId::MedOtc => "med_otc",
            MetricId::MedPrescribed => "med_prescribed",
            MetricId::MedOpioid => "med_opioid",
            MetricId::MedSleep => "med_sleep",
            MetricId::Adl => "adl",
        }
    }

    fn value(self, r: &DailyRecord) -> Option<f64> {
        let rep = r.report.as_ref()?;
        let m = rep.medication_use;
        match self {
            MetricId::Pain => Some(rep.pain),
            MetricId::Mood => Some(rep.mood),
            MetricId::Sleep => Some(rep.sleep),
            MetricId::Alertness => Some(rep.alertness),
            MetricId::Activity => Some(rep.activity),
            MetricId::MedOtc => Some(m.otc_pain as f64),
            MetricId::MedPrescribed => Some(m.prescribed_pain as f64),
            MetricId::MedOpioid => Some(m.opioid as f64),
            MetricId::MedSleep => Some(m.sleep as f64),
            MetricId::Adl => rep.adl,
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric_id: MetricId,
    pub comparison: Vec<f64>,
    pub recommendation: Vec<f64>,
}

/// Per-metric daily values for both periods; days without a value for a
/// metric are dropped from that metric only.
pub fn metric_series(comparison: &[DailyRecord], recommendation: &[DailyRecord]) -> Vec<MetricSeries> {
    MetricId::ALL
        .iter()
        .map(|&m| MetricSeries {
            metric_id: m,
            comparison: comparison.iter().filter_map(|r| m.value(r)).collect(),
            recommendation: recommendation.iter().filter_map(|r| m.value(r)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    ImprovedSig,
    WorsenedSig,
    NoChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOutcome {
    pub metric_id: MetricId,
    /// `mean(recommendation) - mean(comparison)`.
    pub effect: f64,
    pub p_value: f64,
    pub direction: Direction,
}

/// Tests one metric and orients the result by the metric's polarity.
pub fn classify_metric(
    series: &MetricSeries,
    alpha: f64,
    config: &PermutationConfig,
) -> Result<MetricOutcome, EvalError> {
    let r = permutation_test_with(&series.comparison, &series.recommendation, config)?;
    let oriented = if series.metric_id.lower_is_better() {
        -r.effect
    } else {
        r.effect
    };
    let direction = if r.p_value >= alpha || oriented == 0.0 {
        Direction::NoChange
    } else if oriented > 0.0 {
        Direction::ImprovedSig
    } else {
        Direction::WorsenedSig
    };
    Ok(MetricOutcome {
        metric_id: series.metric_id,
        effect: r.effect,
        p_value: r.p_value,
        direction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HolisticLabel {
    Improved,
    Worsened,
    NoChange,
}

impl HolisticLabel {
    pub const ALL: [HolisticLabel; 3] = [HolisticLabel::Improved, HolisticLabel::Worsened, HolisticLabel::NoChange];
}

impl fmt::Display for HolisticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HolisticLabel::Improved => "Improved",
            HolisticLabel::Worsened => "Worsened",
            HolisticLabel::NoChange => "NoChange",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolisticOutcome {
    pub label: HolisticLabel,
    pub qol_improved: bool,
    pub details: Vec<MetricOutcome>,
}

/// Improved when pain improved or a strict majority of the QoL metrics
/// (every tested metric except pain) improved; Worsened when pain worsened
/// and QoL did not improve; NoChange otherwise.
pub fn classify_holistic(outcomes: &[MetricOutcome]) -> Result<HolisticOutcome, EvalError> {
    let pain = outcomes
        .iter()
        .find(|o| o.metric_id == MetricId::Pain)
        .ok_or(EvalError::MissingPain)?;
    let qol: Vec<&MetricOutcome> = outcomes.iter().filter(|o| o.metric_id != MetricId::Pain).collect();
    let improved = qol.iter().filter(|o| o.direction == Direction::ImprovedSig).count();
    let qol_improved = !qol.is_empty() && 2 * improved > qol.len();
    let label = if pain.direction == Direction::ImprovedSig || qol_improved {
        HolisticLabel::Improved
    } else if pain.direction == Direction::WorsenedSig {
        HolisticLabel::Worsened
    } else {
        HolisticLabel::NoChange
    };
    Ok(HolisticOutcome {
        label,
        qol_improved,
        details: outcomes.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub alpha: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub dwell_rule: DwellChangeRule,
    pub subgroups: SubgroupThresholds,
    pub norm: NormalizationConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
            dwell_rule: DwellChangeRule::default(),
            subgroups: SubgroupThresholds::default(),
            norm: NormalizationConfig::default(),
        }
    }
}

/// Tests every metric with enough data in both periods and applies the
/// holistic rule. Monte-Carlo seeds derive from (seed, patient, metric).
pub fn evaluate_metrics(
    patient_id: &PatientId,
    comparison: &[DailyRecord],
    recommendation: &[DailyRecord],
    config: &EvaluationConfig,
) -> Result<HolisticOutcome, EvalError> {
    let mut outcomes = Vec::new();
    for series in metric_series(comparison, recommendation) {
        if series.comparison.len() < 2 || series.recommendation.len() < 2 {
            continue;
        }
        let perm = PermutationConfig {
            n_resamples: config.n_resamples,
            seed: mix_seed(config.seed, &[patient_id.as_str(), series.metric_id.name()]),
            method: PermutationMethod::Auto,
        };
        outcomes.push(classify_metric(&series, config.alpha, &perm)?);
    }
    classify_holistic(&outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEvaluation {
    pub patient_id: PatientId,
    pub period_days: usize,
    pub comparison_dwell: DwellProfile,
    pub recommendation_dwell: DwellProfile,
    pub subgroup: Subgroup,
    pub dwell_change: DwellChange,
    pub holistic: HolisticOutcome,
}

/// Full per-patient analysis. The longer period is trimmed so both cover
/// the same number of days: the comparison keeps its most recent days, the
/// recommendation period its earliest.
pub fn evaluate_patient(
    patient_id: &PatientId,
    comparison: &[DailyRecord],
    recommendation: &[DailyRecord],
    model: &StateModel,
    config: &EvaluationConfig,
) -> Result<PatientEvaluation, EvalError> {
    if comparison.is_empty() {
        return Err(EvalError::EmptyPeriod("comparison"));
    }
    if recommendation.is_empty() {
        return Err(EvalError::EmptyPeriod("recommendation"));
    }
    let days = comparison.len().min(recommendation.len());
    let comparison = &comparison[comparison.len() - days..];
    let recommendation = &recommendation[..days];
    let comparison_dwell = dwell_profile_of(comparison, &config.norm, model);
    let recommendation_dwell = dwell_profile_of(recommendation, &config.norm, model);
    Ok(PatientEvaluation {
        patient_id: patient_id.clone(),
        period_days: days,
        subgroup: classify_subgroup(&comparison_dwell, &config.subgroups)?,
        dwell_change: classify_dwell_change(&comparison_dwell, &recommendation_dwell, &config.dwell_rule)?,
        holistic: evaluate_metrics(patient_id, comparison, recommendation, config)?,
        comparison_dwell,
        recommendation_dwell,
    })
}

/// What the cohort table needs from each patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub patient_id: PatientId,
    pub subgroup: Subgroup,
    pub dwell_change: DwellChange,
    pub holistic: HolisticLabel,
}

impl From<&PatientEvaluation> for CohortEntry {
    fn from(e: &PatientEvaluation) -> Self {
        Self {
            patient_id: e.patient_id.clone(),
            subgroup: e.subgroup,
            dwell_change: e.dwell_change,
            holistic: e.holistic.label,
        }
    }
}

/// Dwell-change class by subgroup, plus holistic label counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n: usize,
    pub counts: BTreeMap<DwellChange, BTreeMap<Subgroup, usize>>,
    pub holistic_counts: BTreeMap<HolisticLabel, usize>,
}

impl CohortSummary {
    pub fn cell(&self, change: DwellChange, subgroup: Subgroup) -> usize {
        self.counts[&change][&subgroup]
    }

    pub fn row_total(&self, change: DwellChange) -> usize {
        self.counts[&change].values().sum()
    }

    pub fn subgroup_total(&self, subgroup: Subgroup) -> usize {
        self.counts.values().map(|row| row[&subgroup]).sum()
    }

    /// Table rows `class,N,<subgroups...>` followed by a `Total` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class".to_owned(), "N".to_owned()];
        header.extend(Subgroup::ALL.iter().map(|s| s.to_string()));
        w.write_record(&header).expect("in-memory write");
        for change in DwellChange::ALL {
            let mut row = vec![change.to_string(), self.row_total(change).to_string()];
            row.extend(Subgroup::ALL.iter().map(|s| self.cell(change, *s).to_string()));
            w.write_record(&row).expect("in-memory write");
        }
        let mut total = vec!["Total".to_owned(), self.n.to_string()];
        total.extend(Subgroup::ALL.iter().map(|s| self.subgroup_total(*s).to_string()));
        w.write_record(&total).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

pub fn summarize_cohort(entries: &[CohortEntry]) -> CohortSummary {
    let mut counts: BTreeMap<DwellChange, BTreeMap<Subgroup, usize>> = DwellChange::ALL
        .iter()
        .map(|c| (*c, Subgroup::ALL.iter().map(|s| (*s, 0)).collect()))
        .collect();
    let mut holistic_counts: BTreeMap<HolisticLabel, usize> =
        HolisticLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for e in entries {
        *counts.get_mut(&e.dwell_change).unwrap().get_mut(&e.subgroup).unwrap() += 1;
        *holistic_counts.get_mut(&e.holistic).unwrap() += 1;
    }
    CohortSummary {
        n: entries.len(),
        counts,
        holistic_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force over all label assignments by bitmask.
    fn exact_oracle(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let obs = (mean(a) - mean(b)).abs();
        let (mut hits, mut total) = (0u32, 0u32);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != a.len() {
                continue;
            }
            let (mut ga, mut gb) = (Vec::new(), Vec::new());
            for (i, v) in pooled.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    ga.push(*v)
                } else {
                    gb.push(*v)
                }
            }
            total += 1;
            if (mean(&ga) - mean(&gb)).abs() >= obs - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn exact_small_case() {
        let p = permutation_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 10_000, 0).unwrap();
        assert_eq!(exact_oracle(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), 0.1);
        assert!((p - 0.10).abs() < 1e-12);
    }

    #[test]
    fn constant_groups_give_one() {
        let p = permutation_test(&[3.0; 4], &[3.0; 5], 10_000, 0).unwrap();
        assert_eq!(p, 1.0);
        let mc = permutation_test_with(
            &[3.0; 4],
            &[3.0; 5],
            &PermutationConfig {
                method: PermutationMethod::MonteCarlo,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(mc.p_value, 1.0);
    }

    #[test]
    fn undersized_rejected() {
        assert_eq!(
            permutation_test(&[1.0], &[1.0, 2.0], 100, 0),
            Err(EvalError::Undersized { a: 1, b: 2 })
        );
    }

    #[test]
    fn large_samples_use_monte_carlo_and_never_zero() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        let r = permutation_test_with(&a, &b, &PermutationConfig::default()).unwrap();
        assert!(!r.exact);
        assert_eq!(r.p_value, 1.0 / 10_001.0);
    }

    #[test]
    fn combination_enumeration_counts() {
        let mut n = 0;
        for_each_combination(6, 3, |_| n += 1);
        assert_eq!(n, 20);
        assert_eq!(binomial(16, 8), 12870);
        assert_eq!(binomial(40, 20) > EXACT_LIMIT, true);
    }

    fn series(id: MetricId, c: &[f64], r: &[f64]) -> MetricSeries {
        MetricSeries {
            metric_id: id,
            comparison: c.to_vec(),
            recommendation: r.to_vec(),
        }
    }

    #[test]
    fn metric_classification() {
        let cfg = PermutationConfig::default();
        let pain = series(MetricId::Pain, &[7.0, 7.5, 6.5, 7.0, 7.2, 6.8], &[3.0, 3.2, 2.8, 3.1, 2.9, 3.0]);
        let o = classify_metric(&pain, 0.05, &cfg).unwrap();
        assert!(o.p_value < 0.05);
        assert_eq!(o.direction, Direction::ImprovedSig);
        let same = series(MetricId::Mood, &[5.0, 6.0, 5.0], &[5.0, 6.0, 5.0]);
        assert_eq!(classify_metric(&same, 0.05, &cfg).unwrap().direction, Direction::NoChange);
        let mood = series(MetricId::Mood, &[3.0, 3.5, 2.5, 3.0, 3.2, 2.8], &[7.0, 7.5, 6.5, 7.0, 7.2, 6.8]);
        assert_eq!(classify_metric(&mood, 0.05, &cfg).unwrap().direction, Direction::ImprovedSig);
        let opioid = series(MetricId::MedOpioid, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], &[3.0, 2.0, 3.0, 4.0, 3.0, 3.0]);
        assert_eq!(classify_metric(&opioid, 0.05, &cfg).unwrap().direction, Direction::WorsenedSig);
    }

    fn outcome(id: MetricId, d: Direction) -> MetricOutcome {
        MetricOutcome {
            metric_id: id,
            effect: 0.0,
            p_value: if d == Direction::NoChange { 0.5 } else { 0.01 },
            direction: d,
        }
    }

    fn with_qol(pain: Direction, improved: usize, n_qol: usize) -> Vec<MetricOutcome> {
        let mut v = vec![outcome(MetricId::Pain, pain)];
        for (i, id) in MetricId::ALL[1..=n_qol].iter().enumerate() {
            v.push(outcome(*id, if i < improved { Direction::ImprovedSig } else { Direction::NoChange }));
        }
        v
    }

    #[test]
    fn holistic_rule() {
        use Direction::*;
        assert_eq!(classify_holistic(&with_qol(ImprovedSig, 0, 9)).unwrap().label, HolisticLabel::Improved);
        assert_eq!(classify_holistic(&with_qol(WorsenedSig, 4, 9)).unwrap().label, HolisticLabel::Worsened);
        assert_eq!(classify_holistic(&with_qol(NoChange, 5, 9)).unwrap().label, HolisticLabel::Improved);
        assert_eq!(classify_holistic(&with_qol(WorsenedSig, 5, 9)).unwrap().label, HolisticLabel::Improved);
        assert_eq!(classify_holistic(&with_qol(NoChange, 4, 8)).unwrap().label, HolisticLabel::NoChange);
        assert_eq!(classify_holistic(&with_qol(NoChange, 0, 0)).unwrap().label, HolisticLabel::NoChange);
        assert_eq!(
            classify_holistic(&[outcome(MetricId::Mood, ImprovedSig)]),
            Err(EvalError::MissingPain)
        );
    }

    #[test]
    fn cohort_edge_cases() {
        let empty = summarize_cohort(&[]);
        assert_eq!(empty.n, 0);
        assert!(empty.counts.values().flat_map(|r| r.values()).all(|c| *c == 0));
        let one = summarize_cohort(&[CohortEntry {
            patient_id: PatientId::new("x"),
            subgroup: Subgroup::ActiveMonitoring,
            dwell_change: DwellChange::Same,
            holistic: HolisticLabel::NoChange,
        }]);
        let nonzero: Vec<usize> = one.counts.values().flat_map(|r| r.values()).copied().filter(|c| *c > 0).collect();
        assert_eq!(nonzero, vec![1]);
        assert_eq!(one.holistic_counts[&HolisticLabel::NoChange], 1);
    }

    #[test]
    fn summary_json_keys_are_labels() {
        let s = summarize_cohort(&[]);
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["counts"]["Improved"]["ActiveMonitoring"], 0);
        let back: CohortSummary = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    fn small_groups() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(0i32..10, 2..6),
            proptest::collection::vec(0i32..10, 2..6),
        )
            .prop_map(|(a, b)| {
                (
                    a.into_iter().map(|v| v as f64 * 0.5).collect(),
                    b.into_iter().map(|v| v as f64 * 0.5).collect(),
                )
            })
    }

    fn direction_strategy() -> impl Strategy<Value = Direction> {
        prop_oneof![
            Just(Direction::WorsenedSig),
            Just(Direction::NoChange),
            Just(Direction::ImprovedSig)
        ]
    }

    fn rank(d: Direction) -> u8 {
        match d {
            Direction::WorsenedSig => 0,
            Direction::NoChange => 1,
            Direction::ImprovedSig => 2,
        }
    }

    proptest! {
        #[test]
        fn exact_matches_oracle_and_is_symmetric((a, b) in small_groups()) {
            let p = permutation_test(&a, &b, 1000, 0).unwrap();
            prop_assert!((p - exact_oracle(&a, &b)).abs() < 1e-12);
            let q = permutation_test(&b, &a, 1000, 0).unwrap();
            prop_assert!((p - q).abs() < 1e-12);
            prop_assert!(p > 0.0 && p <= 1.0);
        }

        #[test]
        fn holistic_monotone(
            dirs in proptest::collection::vec(direction_strategy(), 1..10),
            which in 0usize..10,
        ) {
            let outcomes: Vec<MetricOutcome> = dirs.iter().enumerate()
                .map(|(i, d)| outcome(MetricId::ALL[i], *d)).collect();
            let before = classify_holistic(&outcomes).unwrap().label;
            let i = which % outcomes.len();
            let mut upgraded = outcomes.clone();
            upgraded[i].direction = match upgraded[i].direction {
                Direction::WorsenedSig => Direction::NoChange,
                _ => Direction::ImprovedSig,
            };
            prop_assert!(rank(upgraded[i].direction) >= rank(outcomes[i].direction));
            let after = classify_holistic(&upgraded).unwrap().label;
            if before == HolisticLabel::Improved {
                prop_assert_eq!(after, HolisticLabel::Improved);
            }
            if before == HolisticLabel::NoChange {
                prop_assert_ne!(after, HolisticLabel::Worsened);
            }
        }

        #[test]
        fn cohort_cells_sum_to_n(entries in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3), 0..40)) {
            let entries: Vec<CohortEntry> = entries.into_iter().enumerate().map(|(i, (s, d, h))| CohortEntry {
                patient_id: PatientId::new(format!("p{i}")),
                subgroup: Subgroup::ALL[s],
                dwell_change: DwellChange::ALL[d],
                holistic: HolisticLabel::ALL[h],
            }).collect();
            let s = summarize_cohort(&entries);
            let total: usize = s.counts.values().flat_map(|r| r.values()).sum();
            prop_assert_eq!(total, entries.len());
            prop_assert_eq!(s.holistic_counts.values().sum::<usize>(), entries.len());
        }
    }
}
