//! Contextual multi-armed bandit over stimulation arms.
//!
//! Each arm keeps the sufficient statistics of a ridge regression from
//! context to reward: the regularized Gram matrix `λI + Σ x xᵀ` and the
//! moment vector `Σ x r`. A recommendation is the arm with the highest
//! predicted reward for today's context, optionally with an optimistic
//! confidence bonus. After each self-report the model of the arm the
//! patient actually used absorbs the observed `(context, reward)` pair.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Arm, DailyRecord};
use crate::linalg::{dot, Cholesky, NotPositiveDefinite};
use crate::patient_state::{featurize, NormalizationConfig, StateFeatures, N_DIMS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("context has dimension {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("arm {0} is not in the patient's arm set")]
    UnknownArm(Arm),
    #[error("arm set is empty")]
    NoArms,
    #[error("ridge weight must be positive, got {0}")]
    InvalidLambda(f64),
    #[error("exploration weight must be non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("reward {0} outside [-1, 1]")]
    RewardOutOfRange(f64),
    #[error(transparent)]
    Numerical(#[from] NotPositiveDefinite),
    #[error("invalid bandit state: {0}")]
    Parse(String),
}

/// Which optional features are appended after the bias and the previous
/// day's state features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextSpec {
    pub day_of_week: bool,
}

impl ContextSpec {
    pub fn dim(&self) -> usize {
        1 + N_DIMS + if self.day_of_week { 7 } else { 0 }
    }

    pub fn build(&self, previous: &StateFeatures, date: NaiveDate) -> ContextVector {
        let mut v = Vec::with_capacity(self.dim());
        v.push(1.0);
        v.extend_from_slice(previous.as_slice());
        if self.day_of_week {
            let dow = date.weekday().num_days_from_monday() as usize;
            v.extend((0..7).map(|i| if i == dow { 1.0 } else { 0.0 }));
        }
        ContextVector(v)
    }
}

/// Model input. Component 0 is the bias term and is always 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub context: ContextVector,
    pub arm: Arm,
    pub reward: f64,
    pub date: NaiveDate,
}

/// Mean state features over the comparison window; rewards are measured
/// against it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Baseline(pub StateFeatures);

impl Baseline {
    pub fn from_features<'a, I: IntoIterator<Item = &'a StateFeatures>>(features: I) -> Option<Self> {
        let mut sum = [0.0; N_DIMS];
        let mut n = 0usize;
        for f in features {
            for (s, v) in sum.iter_mut().zip(f.as_slice()) {
                *s += v;
            }
            n += 1;
        }
        (n > 0).then(|| Baseline(StateFeatures(sum.map(|s| s / n as f64))))
    }

    pub fn from_records(records: &[DailyRecord], norm: &NormalizationConfig) -> Option<Self> {
        let feats: Vec<StateFeatures> = records.iter().filter_map(|r| featurize(r, norm)).collect();
        Self::from_features(&feats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Per-dimension weights; the reward is the weighted mean improvement.
    pub weights: [f64; N_DIMS],
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: [1.0; N_DIMS],
        }
    }
}

/// Weighted mean improvement of today's features over the baseline,
/// clamped to `[-1, 1]`.
pub fn compute_reward(today: &StateFeatures, baseline: &Baseline, config: &RewardConfig) -> f64 {
    let wsum: f64 = config.weights.iter().sum();
    let delta: f64 = today
        .as_slice()
        .iter()
        .zip(baseline.0.as_slice())
        .zip(&config.weights)
        .map(|((t, b), w)| w * (t - b))
        .sum();
    (delta / wsum).clamp(-1.0, 1.0)
}

/// Every arm that received stimulation time in any record.
pub fn derive_arms(records: &[DailyRecord]) -> BTreeSet<Arm> {
    records
        .iter()
        .flat_map(|r| r.arm_usage.keys().copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    /// `λI + Σ x xᵀ`, row-major.
    pub gram: Vec<f64>,
    /// `Σ x r`.
    pub moment: Vec<f64>,
    pub n_samples: u64,
}

impl ArmModel {
    pub fn new(dim: usize, lambda: f64) -> Self {
        let mut gram = vec![0.0; dim * dim];
        for i in 0..dim {
            gram[i * dim + i] = lambda;
        }
        Self {
            gram,
            moment: vec![0.0; dim],
            n_samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.moment.len()
    }

    fn absorb(&mut self, x: &[f64], reward: f64) {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                self.gram[i * d + j] += x[i] * x[j];
            }
            self.moment[i] += x[i] * reward;
        }
        self.n_samples += 1;
    }

    pub fn factor(&self) -> Result<Cholesky, NotPositiveDefinite> {
        Cholesky::factor(&self.gram, self.dim())
    }

    /// Ridge coefficients solving `gram · θ = moment`.
    pub fn coefficients(&self) -> Result<Vec<f64>, NotPositiveDefinite> {
        Ok(self.factor()?.solve(&self.moment))
    }

    /// `θᵀx + α·sqrt(xᵀ gram⁻¹ x)`.
    pub fn score(&self, x: &[f64], alpha: f64) -> Result<f64, NotPositiveDefinite> {
        let chol = self.factor()?;
        let theta = chol.solve(&self.moment);
        let mut s = dot(&theta, x);
        if alpha > 0.0 {
            s += alpha * chol.inverse_quadratic_form(x).sqrt();
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Exploration {
    /// Weight of the confidence bonus; zero means plain greedy argmax.
    pub alpha: f64,
}

impl Default for Exploration {
    fn default() -> Self {
        Self { alpha: 0.0 }
    }
}

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Per-patient bandit: one ridge model per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateDoc", into = "StateDoc")]
pub struct BanditState {
    dim: usize,
    lambda: f64,
    exploration: Exploration,
    models: BTreeMap<Arm, ArmModel>,
}

#[derive(Serialize, Deserialize)]
struct ArmDoc {
    program_id: u32,
    intensity_bin: u32,
    gram: Vec<f64>,
    moment: Vec<f64>,
    n_samples: u64,
}

#[derive(Serialize, Deserialize)]
struct StateDoc {
    dim: usize,
    lambda: f64,
    alpha: f64,
    arms: Vec<ArmDoc>,
}

impl From<BanditState> for StateDoc {
    fn from(s: BanditState) -> Self {
        StateDoc {
            dim: s.dim,
            lambda: s.lambda,
            alpha: s.exploration.alpha,
            arms: s
                .models
                .into_iter()
                .map(|(arm, m)| ArmDoc {
                    program_id: arm.program_id,
                    intensity_bin: arm.intensity_bin,
                    gram: m.gram,
                    moment: m.moment,
                    n_samples: m.n_samples,
                })
                .collect(),
        }
    }
}

impl TryFrom<StateDoc> for BanditState {
    type Error = BanditError;

    fn try_from(doc: StateDoc) -> Result<Self, Self::Error> {
        let mut state = BanditState::new(
            std::iter::empty(),
            doc.dim,
            doc.lambda,
            Exploration { alpha: doc.alpha },
        )?;
        for a in doc.arms {
            if a.gram.len() != doc.dim * doc.dim || a.moment.len() != doc.dim {
                return Err(BanditError::Parse(format!(
                    "arm P{}/I{} has statistics of the wrong size",
                    a.program_id, a.intensity_bin
                )));
            }
            state.models.insert(
                Arm::new(a.program_id, a.intensity_bin),
                ArmModel {
                    gram: a.gram,
                    moment: a.moment,
                    n_samples: a.n_samples,
                },
            );
        }
        Ok(state)
    }
}

impl BanditState {
    /// Fresh state: every arm starts at `gram = λI`, `moment = 0`.
    pub fn new<I: IntoIterator<Item = Arm>>(
        arms: I,
        dim: usize,
        lambda: f64,
        exploration: Exploration,
    ) -> Result<Self, BanditError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(BanditError::InvalidLambda(lambda));
        }
        if !(exploration.alpha >= 0.0) || !exploration.alpha.is_finite() {
            return Err(BanditError::InvalidAlpha(exploration.alpha));
        }
        let models = arms
            .into_iter()
            .map(|a| (a, ArmModel::new(dim, lambda)))
            .collect();
        Ok(Self {
            dim,
            lambda,
            exploration,
            models,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn exploration(&self) -> Exploration {
        self.exploration
    }

    pub fn set_exploration(&mut self, exploration: Exploration) -> Result<(), BanditError> {
        if !(exploration.alpha >= 0.0) {
            return Err(BanditError::InvalidAlpha(exploration.alpha));
        }
        self.exploration = exploration;
        Ok(())
    }

    /// Adds an arm at the prior (`gram = λI`). Returns false if it was
    /// already known.
    pub fn add_arm(&mut self, arm: Arm) -> bool {
        if self.models.contains_key(&arm) {
            return false;
        }
        self.models.insert(arm, ArmModel::new(self.dim, self.lambda));
        true
    }

    pub fn arms(&self) -> impl Iterator<Item = Arm> + '_ {
        self.models.keys().copied()
    }

    pub fn model(&self, arm: &Arm) -> Option<&ArmModel> {
        self.models.get(arm)
    }

    pub fn models(&self) -> &BTreeMap<Arm, ArmModel> {
        &self.models
    }

    fn check_dim(&self, found: usize) -> Result<(), BanditError> {
        if found != self.dim {
            return Err(BanditError::DimensionMismatch {
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }

    /// Predicted reward per arm, including the exploration bonus when α > 0.
    pub fn predict_rewards(&self, context: &ContextVector) -> Result<BTreeMap<Arm, f64>, BanditError> {
        self.check_dim(context.dim())?;
        let alpha = self.exploration.alpha;
        self.models
            .iter()
            .map(|(arm, m)| Ok((*arm, m.score(context.as_slice(), alpha)?)))
            .collect()
    }

    /// Arm with the highest predicted reward.
    pub fn recommend(&self, context: &ContextVector) -> Result<Arm, BanditError> {
        let predictions = self.predict_rewards(context)?;
        select_arm(
            predictions
                .iter()
                .map(|(arm, p)| (*arm, *p, self.models[arm].n_samples)),
        )
        .ok_or(BanditError::NoArms)
    }

    /// Folds one observation into the model of the arm the patient used.
    pub fn update(&mut self, sample: &RewardSample) -> Result<(), BanditError> {
        self.check_dim(sample.context.dim())?;
        if !(-1.0..=1.0).contains(&sample.reward) {
            return Err(BanditError::RewardOutOfRange(sample.reward));
        }
        let model = self
            .models
            .get_mut(&sample.arm)
            .ok_or(BanditError::UnknownArm(sample.arm))?;
        model.absorb(sample.context.as_slice(), sample.reward);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bandit state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BanditError> {
        serde_json::from_str(text).map_err(|e| BanditError::Parse(e.to_string()))
    }
}

/// Argmax over `(arm, score, n_samples)`. Exact ties prefer the arm with
/// fewer samples, then the lowest `(program_id, intensity_bin)`.
pub fn select_arm<I>(candidates: I) -> Option<Arm>
where
    I: IntoIterator<Item = (Arm, f64, u64)>,
{
    let mut best: Option<(Arm, f64, u64)> = None;
    for (arm, score, n) in candidates {
        let better = match best {
            None => true,
            Some((b_arm, b_score, b_n)) => {
                score > b_score || (score == b_score && (n, arm) < (b_n, b_arm))
            }
        };
        if better {
            best = Some((arm, score, n));
        }
    }
    best.map(|(a, _, _)| a)
}

/// Builds the initial state from historical samples.
pub fn init_from_history(
    samples: &[RewardSample],
    lambda: f64,
    arms: &BTreeSet<Arm>,
    dim: usize,
    exploration: Exploration,
) -> Result<BanditState, BanditError> {
    let mut state = BanditState::new(arms.iter().copied(), dim, lambda, exploration)?;
    for s in samples {
        state.update(s)?;
    }
    Ok(state)
}

/// Everything needed to turn daily records into contexts and rewards.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleConfig {
    pub context: ContextSpec,
    pub reward: RewardConfig,
    pub norm: NormalizationConfig,
}

/// Tracks the most recent day's features, which become the next context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextTracker {
    pub last_features: StateFeatures,
}

impl ContextTracker {
    pub fn new(initial: StateFeatures) -> Self {
        Self {
            last_features: initial,
        }
    }

    pub fn context(&self, spec: &ContextSpec, date: NaiveDate) -> ContextVector {
        spec.build(&self.last_features, date)
    }

    pub fn observe(&mut self, features: StateFeatures) {
        self.last_features = features;
    }
}

/// Training samples from a stretch of history: on each report day with a
/// known dominant arm, the context is the latest earlier features and the
/// reward is that day's improvement over the baseline.
pub fn history_samples(
    records: &[DailyRecord],
    baseline: &Baseline,
    config: &CycleConfig,
    tracker: &mut ContextTracker,
) -> Vec<RewardSample> {
    let mut samples = Vec::new();
    for r in records {
        let Some(features) = featurize(r, &config.norm) else {
            continue;
        };
        if let Some(arm) = r.dominant_arm {
            samples.push(RewardSample {
                context: tracker.context(&config.context, r.date),
                arm,
                reward: compute_reward(&features, baseline, &config.reward),
                date: r.date,
            });
        }
        tracker.observe(features);
    }
    samples
}

/// One report day of the recommend-then-learn loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStep {
    pub date: NaiveDate,
    pub recommended: Arm,
    pub predicted: BTreeMap<Arm, f64>,
    /// Arm the patient actually used that day, if known.
    pub realized_arm: Option<Arm>,
    pub reward: f64,
}

/// Replays a record stream through the engine. On each report day the
/// engine recommends from the previous features, then learns from the arm
/// actually used and that day's reward. Report-less days produce nothing.
pub fn recommendation_cycle(
    state: &BanditState,
    records: &[DailyRecord],
    baseline: &Baseline,
    config: &CycleConfig,
    tracker: ContextTracker,
) -> Result<(Vec<CycleStep>, BanditState), BanditError> {
    let mut state = state.clone();
    let mut tracker = tracker;
    let mut steps = Vec::new();
    for r in records {
        let Some(features) = featurize(r, &config.norm) else {
            continue;
        };
        let context = tracker.context(&config.context, r.date);
        let predicted = state.predict_rewards(&context)?;
        let recommended = select_arm(
            predicted
                .iter()
                .map(|(a, p)| (*a, *p, state.models[a].n_samples)),
        )
        .ok_or(BanditError::NoArms)?;
        let reward = compute_reward(&features, baseline, &config.reward);
        let realized_arm = r.dominant_arm.filter(|a| state.models.contains_key(a));
        if let Some(arm) = realized_arm {
            state.update(&RewardSample {
                context,
                arm,
                reward,
                date: r.date,
            })?;
        }
        steps.push(CycleStep {
            date: r.date,
            recommended,
            predicted,
            realized_arm,
            reward,
        });
        tracker.observe(features);
    }
    Ok((steps, state))
}
