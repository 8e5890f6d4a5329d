//! Synthetic patients with a known linear arm-response structure, and a
//! trial runner that plays a comparison period (patient habit) followed by
//! an equal-length recommendation period (engine in the loop).
//!
//! A patient's latent wellbeing on a day is
//! `clamp(w0 + θ_armᵀ x + N(0, σ), 0, 1)` where `x` is the bias plus the
//! previous day's true features and `w0` the mean baseline feature. Each
//! reported dimension moves with the latent shift plus its own noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{
    compute_reward, derive_arms, history_samples, init_from_history, BanditError, BanditState,
    Baseline, ContextSpec, ContextTracker, CycleConfig, Exploration, RewardSample, DEFAULT_LAMBDA,
};
use crate::domain::{
    check_eligibility, compute_effective_mobility, to_jsonl, Arm, ArmBinning, DailyRecord,
    DaySpan, DeviceLogEntry, DomainError, EligibilityConfig, EligibilityReport, MedicationUse,
    MobilitySample, PatientId, SelfReport, DEFAULT_ACTIVE_THRESHOLD, MINUTES_PER_DAY, SCORE_MAX,
};
use crate::evaluation::{evaluate_patient, EvalError, EvaluationConfig, PatientEvaluation};
use crate::linalg::dot;
use crate::patient_state::{Dimension, NormalizationConfig, StateFeatures, StateModel, N_DIMS};
use crate::pipeline::{PatientMeta, DEVICE_LOG_FILE, META_FILE, MOBILITY_FILE, REPORTS_FILE, TRIAL_FILE};
use crate::rng::{mix_seed, substream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("synthetic patient {patient_id} is ineligible: {}", reasons.join(", "))]
    Ineligible {
        patient_id: PatientId,
        reasons: Vec<String>,
    },
    #[error("comparison and recommendation periods must have equal length ({0} vs {1})")]
    UnequalPeriods(u32, u32),
    #[error("patient needs at least one arm")]
    NoArms,
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("comparison period produced no reports")]
    NoReports,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Knobs for [`gen_patient`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientSpec {
    pub patient_id: PatientId,
    pub arm_count: usize,
    /// Margin by which the best arm's expected reward beats the runner-up
    /// at the baseline context.
    pub dominance_gap: f64,
    pub noise_sigma: f64,
    pub compliance_p: f64,
    /// Dirichlet concentration of the habit policy over arms.
    pub habit_concentration: f64,
    /// Half-width of the shared per-feature slope of the reward model.
    pub slope_scale: f64,
    pub drift: Option<[f64; N_DIMS]>,
    pub binning: ArmBinning,
    pub context: ContextSpec,
}

impl Default for PatientSpec {
    fn default() -> Self {
        Self {
            patient_id: PatientId::new("sim-0"),
            arm_count: 6,
            dominance_gap: 0.3,
            noise_sigma: 0.1,
            compliance_p: 1.0,
            habit_concentration: 2.0,
            slope_scale: 0.03,
            drift: None,
            binning: ArmBinning::default(),
            context: ContextSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPatient {
    pub patient_id: PatientId,
    pub arms: Vec<Arm>,
    /// Ground-truth reward coefficients per arm, in context layout.
    pub true_theta: BTreeMap<Arm, Vec<f64>>,
    pub noise_sigma: f64,
    pub compliance_p: f64,
    pub baseline_features: [f64; N_DIMS],
    /// Per-day additive drift of the baseline features.
    pub drift: Option<[f64; N_DIMS]>,
    /// Comparison-period habit: probability of picking each arm, aligned
    /// with `arms`.
    pub habit: Vec<f64>,
    pub binning: ArmBinning,
    pub context: ContextSpec,
}

impl SyntheticPatient {
    pub fn baseline_wellbeing(&self) -> f64 {
        self.baseline_features.iter().sum::<f64>() / N_DIMS as f64
    }

    pub fn baseline_context(&self, date: NaiveDate) -> Vec<f64> {
        self.context
            .build(&StateFeatures(self.baseline_features), date)
            .0
    }

    /// Noise-free reward `θ_armᵀ x`.
    pub fn expected_reward(&self, arm: &Arm, context: &[f64]) -> f64 {
        dot(&self.true_theta[arm], context)
    }

    /// Arm with the highest expected reward at the baseline context.
    pub fn best_arm(&self) -> Arm {
        let x = self.baseline_context(NaiveDate::MIN);
        *self
            .arms
            .iter()
            .max_by(|a, b| {
                self.expected_reward(a, &x)
                    .total_cmp(&self.expected_reward(b, &x))
            })
            .expect("patient has arms")
    }

    fn draw_habit(&self, rng: &mut ChaCha8Rng) -> Arm {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (arm, w) in self.arms.iter().zip(&self.habit) {
            acc += w;
            if u < acc {
                return *arm;
            }
        }
        *self.arms.last().expect("patient has arms")
    }
}

/// Draws a patient. Deterministic given `seed`. One arm beats every other by
/// at least `dominance_gap` at the baseline context, and per-arm slopes stay
/// small enough that it remains best for every context in `[0, 1]^7`.
pub fn gen_patient(spec: &PatientSpec, seed: u64) -> Result<SyntheticPatient, SimError> {
    if spec.arm_count == 0 {
        return Err(SimError::NoArms);
    }
    if !(0.0..=1.0).contains(&spec.compliance_p) {
        return Err(SimError::InvalidProbability(spec.compliance_p));
    }
    let mut rng = substream(seed, "patient");
    let bins = spec.binning.bins.max(1);
    let arms: Vec<Arm> = (0..spec.arm_count)
        .map(|i| Arm::new(i as u32 + 1, rng.random_range(0..bins)))
        .collect();
    let baseline_features: [f64; N_DIMS] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let dim = spec.context.dim();
    let shared: Vec<f64> = (0..dim)
        .map(|_| rng.random_range(-spec.slope_scale..=spec.slope_scale))
        .collect();
    let best = rng.random_range(0..spec.arm_count);
    let top = rng.random_range(0.05..0.15);
    let x0 = spec.context.build(&StateFeatures(baseline_features), NaiveDate::MIN).0;
    let mut true_theta = BTreeMap::new();
    for (i, arm) in arms.iter().enumerate() {
        let mut theta: Vec<f64> = shared
            .iter()
            .map(|s| s + rng.random_range(-0.01..=0.01))
            .collect();
        theta[0] = 0.0;
        let target = if i == best {
            top
        } else {
            top - spec.dominance_gap - rng.random_range(0.01..0.1)
        };
        theta[0] = target - dot(&theta, &x0);
        true_theta.insert(*arm, theta);
    }
    let habit = if spec.arm_count == 1 {
        vec![1.0]
    } else {
        // Dirichlet via normalized Gamma draws. Resample until at least two
        // arms carry real weight so the variability eligibility rule can pass.
        let gamma = Gamma::new(spec.habit_concentration.max(1e-3), 1.0).expect("valid concentration");
        loop {
            let g: Vec<f64> = (0..spec.arm_count).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = g.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let w: Vec<f64> = g.iter().map(|v| v / total).collect();
            if w.iter().filter(|v| **v >= 0.05).count() >= 2 {
                break w;
            }
        }
    };
    Ok(SyntheticPatient {
        patient_id: spec.patient_id.clone(),
        arms,
        true_theta,
        noise_sigma: spec.noise_sigma,
        compliance_p: spec.compliance_p,
        baseline_features,
        drift: spec.drift,
        habit,
        binning: spec.binning,
        context: spec.context,
    })
}

/// Per-trial random sources.
pub struct SimStreams {
    pub noise: ChaCha8Rng,
    pub reports: ChaCha8Rng,
    pub habit: ChaCha8Rng,
    pub compliance: ChaCha8Rng,
}

impl SimStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            noise: substream(seed, "noise"),
            reports: substream(seed, "reports"),
            habit: substream(seed, "habit"),
            compliance: substream(seed, "compliance"),
        }
    }
}

/// Everything one simulated day produces.
#[derive(Debug, Clone, PartialEq)]
pub struct DayOutcome {
    pub date: NaiveDate,
    pub arm: Arm,
    pub latent: f64,
    pub true_features: StateFeatures,
    pub report: Option<SelfReport>,
    pub device_log: Vec<DeviceLogEntry>,
    pub mobility: MobilitySample,
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

/// Simulates one day on `arm`. `previous` holds the patient's true
/// features from the day before and forms the context. The report is
/// withheld with probability `1 - report_compliance_p`.
pub fn step_day(
    patient: &SyntheticPatient,
    arm: Arm,
    date: NaiveDate,
    day_index: u32,
    previous: &StateFeatures,
    report_compliance_p: f64,
    streams: &mut SimStreams,
) -> DayOutcome {
    let x = patient.context.build(previous, date).0;
    let w0 = patient.baseline_wellbeing();
    let shift = patient.expected_reward(&arm, &x) + gaussian(&mut streams.noise, patient.noise_sigma);
    let latent = (w0 + shift).clamp(0.0, 1.0);
    let dim_sigma = patient.noise_sigma / 2.0;
    let mut f = [0.0; N_DIMS];
    for (i, v) in f.iter_mut().enumerate() {
        let drift = patient.drift.map_or(0.0, |d| d[i] * day_index as f64);
        let noise = gaussian(&mut streams.noise, dim_sigma);
        *v = (patient.baseline_features[i] + drift + (latent - w0) + noise).clamp(0.0, 1.0);
    }
    let true_features = StateFeatures(f);

    let pid = patient.patient_id.clone();
    let active_minutes = (f[Dimension::EffectiveMobility.index()] * MINUTES_PER_DAY as f64).round() as usize;
    let mut counts = vec![0i64; MINUTES_PER_DAY];
    counts[..active_minutes].iter_mut().for_each(|c| *c = DEFAULT_ACTIVE_THRESHOLD);
    let mobility = compute_effective_mobility(pid.clone(), date, &counts, DEFAULT_ACTIVE_THRESHOLD)
        .expect("synthetic counts are valid");

    let reported = streams.reports.random::<f64>() < report_compliance_p;
    let report = reported.then(|| {
        let score = |d: Dimension| round1(SCORE_MAX * f[d.index()]);
        let med_burden = 1.0 - f[Dimension::MedicationUsage.index()];
        let count = |max: f64| (med_burden * max).round() as u32;
        SelfReport {
            patient_id: pid.clone(),
            date,
            pain: round1(SCORE_MAX * (1.0 - f[Dimension::PainLevel.index()])),
            mood: score(Dimension::Mood),
            sleep: score(Dimension::Sleep),
            alertness: score(Dimension::Alertness),
            activity: score(Dimension::Activities),
            medication_use: MedicationUse {
                otc_pain: count(4.0),
                prescribed_pain: count(3.0),
                opioid: count(2.0),
                sleep: count(1.0),
            },
            free_feedback: None,
            adl: None,
        }
    });

    let device_log = vec![DeviceLogEntry {
        patient_id: pid,
        timestamp: date.and_hms_opt(0, 0, 0).expect("midnight"),
        program_id: arm.program_id,
        amplitude: patient.binning.bin_center(arm.intensity_bin),
    }];

    DayOutcome {
        date,
        arm,
        latent,
        true_features,
        report,
        device_log,
        mobility,
    }
}

impl DayOutcome {
    /// The aligned daily record, built directly from what was simulated.
    pub fn record(&self) -> DailyRecord {
        let mut r = DailyRecord::empty(self.mobility.patient_id.clone(), self.date);
        r.report = self.report.clone();
        r.mobility = Some(self.mobility.clone());
        r.dominant_arm = Some(self.arm);
        r.arm_usage.insert(self.arm, 1.0);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub n_days_comparison: u32,
    pub n_days_recommendation: u32,
    pub seed: u64,
    pub report_compliance_p: f64,
    pub start_date: NaiveDate,
    pub lambda: f64,
    pub exploration: Exploration,
    pub eligibility: EligibilityConfig,
    pub evaluation: EvaluationConfig,
    pub state_model: StateModel,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_days_comparison: 90,
            n_days_recommendation: 90,
            seed: 0,
            report_compliance_p: 0.9,
            start_date: NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date"),
            lambda: DEFAULT_LAMBDA,
            exploration: Exploration::default(),
            eligibility: EligibilityConfig::default(),
            evaluation: EvaluationConfig::default(),
            state_model: StateModel::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationLogEntry {
    pub date: NaiveDate,
    pub recommended: Arm,
    pub followed: bool,
    pub used: Arm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub patient_id: PatientId,
    pub comparison_records: Vec<DailyRecord>,
    pub recommendation_records: Vec<DailyRecord>,
    pub reports: Vec<SelfReport>,
    pub device_log: Vec<DeviceLogEntry>,
    pub mobility: Vec<MobilitySample>,
    pub recommendations: Vec<RecommendationLogEntry>,
    pub eligibility: EligibilityReport,
    pub baseline: Baseline,
    /// Engine state right after initialization from the comparison period.
    pub initial_state: BanditState,
    /// Context tracker at the end of the comparison period.
    pub initial_tracker: ContextTracker,
    pub final_state: BanditState,
    pub evaluation: PatientEvaluation,
    /// Rewards observed on report days, per period.
    pub comparison_rewards: Vec<f64>,
    pub recommendation_rewards: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl TrialResult {
    pub fn mean_comparison_reward(&self) -> f64 {
        mean(&self.comparison_rewards)
    }

    pub fn mean_recommendation_reward(&self) -> f64 {
        mean(&self.recommendation_rewards)
    }

    pub fn recommendation_start(&self) -> NaiveDate {
        self.recommendation_records[0].date
    }
}

/// Runs a comparison period under the patient's habit, initializes the
/// engine from it, then runs the recommendation period with the engine in
/// the loop and evaluates the result.
///
/// In the recommendation period a report day brings a recommendation that the
/// patient follows with probability `compliance_p` (otherwise falls back to
/// habit); on report-less days the patient stays on the last arm used.
pub fn run_trial(patient: &SyntheticPatient, config: &TrialConfig) -> Result<TrialResult, SimError> {
    if config.n_days_comparison != config.n_days_recommendation {
        return Err(SimError::UnequalPeriods(
            config.n_days_comparison,
            config.n_days_recommendation,
        ));
    }
    if !(0.0..=1.0).contains(&config.report_compliance_p) {
        return Err(SimError::InvalidProbability(config.report_compliance_p));
    }
    let mut streams = SimStreams::new(config.seed);
    let mut previous = StateFeatures(patient.baseline_features);
    let mut outcomes = Vec::new();

    for i in 0..config.n_days_comparison {
        let date = config.start_date + Duration::days(i as i64);
        let arm = patient.draw_habit(&mut streams.habit);
        let out = step_day(patient, arm, date, i, &previous, config.report_compliance_p, &mut streams);
        previous = out.true_features;
        outcomes.push(out);
    }
    let comparison_records: Vec<DailyRecord> = outcomes.iter().map(DayOutcome::record).collect();

    let window = config.n_days_comparison.clamp(1, 90);
    let eligibility = check_eligibility(&comparison_records, window, &config.eligibility)?;
    if !eligibility.eligible {
        return Err(SimError::Ineligible {
            patient_id: patient.patient_id.clone(),
            reasons: eligibility.reasons,
        });
    }

    let cycle = CycleConfig {
        context: patient.context,
        ..CycleConfig::default()
    };
    let baseline = Baseline::from_records(&comparison_records, &cycle.norm).ok_or(SimError::NoReports)?;
    let mut tracker = ContextTracker::new(baseline.0);
    let history = history_samples(&comparison_records, &baseline, &cycle, &mut tracker);
    let comparison_rewards: Vec<f64> = history.iter().map(|s| s.reward).collect();
    let arms: BTreeSet<Arm> = derive_arms(&comparison_records);
    let initial_state = init_from_history(&history, config.lambda, &arms, cycle.context.dim(), config.exploration)?;
    let initial_tracker = tracker;

    let mut state = initial_state.clone();
    let mut recommendations = Vec::new();
    let mut recommendation_rewards = Vec::new();
    let mut last_arm = outcomes.last().map(|o| o.arm).expect("comparison period is non-empty");
    let n0 = config.n_days_comparison;
    let mut rec_outcomes = Vec::new();
    for j in 0..config.n_days_recommendation {
        let i = n0 + j;
        let date = config.start_date + Duration::days(i as i64);
        // Peek whether today brings a report: the draw is consumed by
        // step_day from a cloned stream so both agree.
        let will_report = streams.reports.clone().random::<f64>() < config.report_compliance_p;
        let context = tracker.context(&cycle.context, date);
        let arm = if will_report {
            let recommended = state.recommend(&context)?;
            let followed = streams.compliance.random::<f64>() < patient.compliance_p;
            let used = if followed {
                recommended
            } else {
                patient.draw_habit(&mut streams.habit)
            };
            recommendations.push(RecommendationLogEntry {
                date,
                recommended,
                followed,
                used,
            });
            used
        } else {
            last_arm
        };
        let out = step_day(patient, arm, date, i, &previous, config.report_compliance_p, &mut streams);
        debug_assert_eq!(out.report.is_some(), will_report);
        if let Some(report) = &out.report {
            let features = cycle.norm.featurize_report(report, Some(out.mobility.effective_mobility));
            let reward = compute_reward(&features, &baseline, &cycle.reward);
            recommendation_rewards.push(reward);
            if state.model(&arm).is_some() {
                state.update(&RewardSample {
                    context,
                    arm,
                    reward,
                    date,
                })?;
            }
            tracker.observe(features);
        }
        previous = out.true_features;
        last_arm = arm;
        rec_outcomes.push(out);
    }
    let recommendation_records: Vec<DailyRecord> = rec_outcomes.iter().map(DayOutcome::record).collect();
    outcomes.extend(rec_outcomes);

    let eval_config = EvaluationConfig {
        seed: mix_seed(config.seed, &["evaluation"]),
        ..config.evaluation
    };
    let evaluation = evaluate_patient(
        &patient.patient_id,
        &comparison_records,
        &recommendation_records,
        &config.state_model,
        &eval_config,
    )?;

    Ok(TrialResult {
        patient_id: patient.patient_id.clone(),
        reports: outcomes.iter().filter_map(|o| o.report.clone()).collect(),
        device_log: outcomes.iter().flat_map(|o| o.device_log.clone()).collect(),
        mobility: outcomes.iter().map(|o| o.mobility.clone()).collect(),
        comparison_records,
        recommendation_records,
        recommendations,
        eligibility,
        baseline,
        initial_state,
        initial_tracker,
        final_state: state,
        evaluation,
        comparison_rewards,
        recommendation_rewards,
    })
}

#[derive(Debug, Clone, Serialize)]
struct TrialSummary<'a> {
    patient_id: &'a PatientId,
    true_best_arm: Arm,
    compliance_p: f64,
    recommendations: &'a [RecommendationLogEntry],
    mean_comparison_reward: f64,
    mean_recommendation_reward: f64,
    evaluation: &'a PatientEvaluation,
    final_state: &'a BanditState,
}

/// Writes a trial's streams in the ingestion formats, plus metadata and a
/// summary, under `dir`.
pub fn write_trial(dir: &Path, patient: &SyntheticPatient, result: &TrialResult) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORTS_FILE), to_jsonl(&result.reports))?;
    fs::write(dir.join(DEVICE_LOG_FILE), to_jsonl(&result.device_log))?;
    fs::write(dir.join(MOBILITY_FILE), to_jsonl(&result.mobility))?;
    let span = |r: &[DailyRecord]| DaySpan::new(r[0].date, r[r.len() - 1].date);
    let meta = PatientMeta {
        patient_id: result.patient_id.clone(),
        comparison: span(&result.comparison_records),
        recommendation: span(&result.recommendation_records),
        binning: patient.binning,
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    let summary = TrialSummary {
        patient_id: &result.patient_id,
        true_best_arm: patient.best_arm(),
        compliance_p: patient.compliance_p,
        recommendations: &result.recommendations,
        mean_comparison_reward: result.mean_comparison_reward(),
        mean_recommendation_reward: result.mean_recommendation_reward(),
        evaluation: &result.evaluation,
        final_state: &result.final_state,
    };
    fs::write(dir.join(TRIAL_FILE), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(())
}

/// Share of the recommendations in the last `last_days` of the period that
/// named `arm`.
pub fn share_recommending(result: &TrialResult, arm: Arm, last_days: i64) -> f64 {
    let end = result.recommendation_records.last().map(|r| r.date).expect("non-empty period");
    let from = end - Duration::days(last_days - 1);
    let recent: Vec<&RecommendationLogEntry> =
        result.recommendations.iter().filter(|r| r.date >= from).collect();
    if recent.is_empty() {
        return 0.0;
    }
    recent.iter().filter(|r| r.recommended == arm).count() as f64 / recent.len() as f64
}

/// Default feature normalization; re-exported for callers assembling
/// pipelines around simulated data.
pub fn default_norm() -> NormalizationConfig {
    NormalizationConfig::default()
}
