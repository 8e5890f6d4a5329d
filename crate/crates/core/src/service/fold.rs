//! Patient state as a pure fold over the event log.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::events::{
    ArmPrediction, Enrollment, Event, EventKind, FeedbackAction, FeedbackSubmitted,
    RecommendationIssued, ReportSubmitted,
};
use crate::bandit::{
    compute_reward, derive_arms, history_samples, init_from_history, BanditError, BanditState,
    Baseline, ContextTracker, ContextVector, RewardSample,
};
use crate::domain::{
    build_daily_records, check_eligibility, Arm, DailyRecord, DaySpan, DeviceLogEntry,
    DomainError, EligibilityReport, MobilitySample, PatientId, SelfReport,
};
use crate::patient_state::StateFeatures;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("seq {seq}: log must start with PatientEnrolled, found {kind}")]
    NotEnrolled { seq: u64, kind: &'static str },
    #[error("seq {seq}: patient is already enrolled")]
    AlreadyEnrolled { seq: u64 },
    #[error("seq {seq}: event for patient {found} in log of {expected}")]
    WrongPatient {
        seq: u64,
        expected: PatientId,
        found: PatientId,
    },
    #[error("seq {seq} does not follow {previous}")]
    OutOfSequence { seq: u64, previous: u64 },
    #[error("seq {seq}: report for {date} precedes the latest report {latest}")]
    ReportOutOfOrder {
        seq: u64,
        date: NaiveDate,
        latest: NaiveDate,
    },
    #[error("seq {seq}: second recommendation for {date}")]
    DuplicateRecommendation { seq: u64, date: NaiveDate },
    #[error("seq {seq}: feedback references unknown recommendation {rec_id}")]
    UnknownRecommendation { seq: u64, rec_id: String },
    #[error("seq {seq}: recommendation {rec_id} cannot move from {from:?}")]
    IllegalTransition {
        seq: u64,
        rec_id: String,
        from: RecStatus,
    },
    #[error("seq {seq}: {source}")]
    Bandit { seq: u64, source: BanditError },
    #[error("seq {seq}: {source}")]
    Domain { seq: u64, source: DomainError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecStatus {
    Sent,
    Accepted,
    Dismissed,
    Expired,
}

impl RecStatus {
    /// Target of a feedback action, or `None` when the transition is not
    /// allowed.
    pub fn after(self, action: FeedbackAction) -> Option<RecStatus> {
        match (self, action) {
            (RecStatus::Sent, FeedbackAction::Accept) => Some(RecStatus::Accepted),
            (RecStatus::Sent, FeedbackAction::Dismiss) => Some(RecStatus::Dismissed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rec_id: String,
    pub patient_id: PatientId,
    pub arm: Arm,
    pub date: NaiveDate,
    pub issued_at: NaiveDateTime,
    pub rationale: Vec<ArmPrediction>,
    pub status: RecStatus,
}

impl Recommendation {
    /// Status as seen at `now`, with expiry applied.
    pub fn status_at(&self, now: NaiveDateTime, expiry_hours: i64) -> RecStatus {
        if self.status == RecStatus::Sent && now >= self.issued_at + Duration::hours(expiry_hours) {
            RecStatus::Expired
        } else {
            self.status
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub seq: u64,
    pub timestamp: NaiveDateTime,
    #[serde(flatten)]
    pub feedback: FeedbackSubmitted,
    /// Whether the action changed the recommendation's status.
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub seq: u64,
    pub report: SelfReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_mobility: Option<f64>,
}

/// One bandit update, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningStep {
    pub seq: u64,
    pub date: NaiveDate,
    pub arm: Arm,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFold {
    pub patient_id: PatientId,
    pub last_seq: u64,
    pub enrollment: Enrollment,
    /// Eligibility from the enrollment history; `None` when the patient was
    /// enrolled without one.
    pub eligibility: Option<EligibilityReport>,
    pub comparison: Vec<DailyRecord>,
    pub baseline: Option<Baseline>,
    pub baseline_pool: Vec<StateFeatures>,
    pub bandit: BanditState,
    pub tracker: Option<ContextTracker>,
    pub reports: BTreeMap<NaiveDate, StoredReport>,
    pub device_log: Vec<DeviceLogEntry>,
    pub recommendations: Vec<Recommendation>,
    pub feedback: Vec<FeedbackRecord>,
    pub learning: Vec<LearningStep>,
}

/// Folds a whole log. An empty log yields no patient.
pub fn replay(events: &[Event]) -> Result<Option<PatientFold>, ReplayError> {
    let Some((first, rest)) = events.split_first() else {
        return Ok(None);
    };
    let mut fold = PatientFold::enroll(first)?;
    for e in rest {
        fold.apply(e)?;
    }
    Ok(Some(fold))
}

impl PatientFold {
    pub fn enroll(event: &Event) -> Result<Self, ReplayError> {
        let seq = event.seq;
        let EventKind::PatientEnrolled(enrollment) = &event.kind else {
            return Err(ReplayError::NotEnrolled {
                seq,
                kind: event.kind.name(),
            });
        };
        let engine = enrollment.engine;
        let pid = event.patient_id.clone();
        let domain = |source| ReplayError::Domain { seq, source };
        let bandit_err = |source| ReplayError::Bandit { seq, source };
        let mut arms: BTreeSet<Arm> = enrollment.arms.iter().copied().collect();
        let mut eligibility = None;
        let mut comparison = Vec::new();
        let mut baseline = None;
        let mut tracker = None;
        let mut samples = Vec::new();
        if let Some(h) = enrollment.history.as_ref().filter(|h| !h.is_empty()) {
            let dates = h
                .reports
                .iter()
                .map(|r| r.date)
                .chain(h.mobility.iter().map(|m| m.date))
                .chain(h.device_log.iter().map(|d| d.timestamp.date()));
            let (lo, hi) = dates.fold((NaiveDate::MAX, NaiveDate::MIN), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            });
            comparison = build_daily_records(
                &pid,
                &h.reports,
                &h.device_log,
                &h.mobility,
                DaySpan::new(lo, hi),
                &enrollment.binning,
            )
            .map_err(domain)?;
            let window = (comparison.len() as u32).clamp(1, 90);
            eligibility =
                Some(check_eligibility(&comparison, window, &engine.eligibility).map_err(domain)?);
            let b = Baseline::from_records(&comparison, &engine.cycle.norm)
                .expect("history has reports");
            let mut t = ContextTracker::new(b.0);
            samples = history_samples(&comparison, &b, &engine.cycle, &mut t);
            arms.extend(derive_arms(&comparison));
            baseline = Some(b);
            tracker = Some(t);
        }
        let bandit = init_from_history(
            &samples,
            engine.lambda,
            &arms,
            engine.cycle.context.dim(),
            engine.exploration,
        )
        .map_err(bandit_err)?;
        Ok(Self {
            patient_id: pid,
            last_seq: seq,
            enrollment: enrollment.clone(),
            eligibility,
            comparison,
            baseline,
            baseline_pool: Vec::new(),
            bandit,
            tracker,
            reports: BTreeMap::new(),
            device_log: Vec::new(),
            recommendations: Vec::new(),
            feedback: Vec::new(),
            learning: Vec::new(),
        })
    }

    pub fn expiry_hours(&self) -> i64 {
        self.enrollment.engine.expiry_hours
    }

    pub fn eligible(&self) -> bool {
        self.eligibility.as_ref().is_none_or(|e| e.eligible)
    }

    pub fn latest_report_date(&self) -> Option<NaiveDate> {
        self.reports.keys().next_back().copied()
    }

    pub fn recommendation(&self, rec_id: &str) -> Option<&Recommendation> {
        self.recommendations.iter().find(|r| r.rec_id == rec_id)
    }

    pub fn recommendation_for(&self, date: NaiveDate) -> Option<&Recommendation> {
        self.recommendations.iter().rev().find(|r| r.date == date)
    }

    /// Reward baseline: the comparison-period mean, or the mean of the first
    /// few live reports when the patient was enrolled without history.
    pub fn current_baseline(&self) -> Option<Baseline> {
        self.baseline.or_else(|| Baseline::from_features(&self.baseline_pool))
    }

    /// Context for a recommendation effective on `date`, if any report has
    /// been seen.
    pub fn context_for(&self, date: NaiveDate) -> Option<ContextVector> {
        self.tracker
            .map(|t| t.context(&self.enrollment.engine.cycle.context, date))
    }

    /// Arm the patient used on `date`: the dominant device setting if the
    /// log covers that day, otherwise the latest earlier recommendation when
    /// it was accepted.
    pub fn arm_used_on(&self, date: NaiveDate) -> Option<Arm> {
        let from_device = build_daily_records(
            &self.patient_id,
            &[],
            &self.device_log,
            &[],
            DaySpan::new(date, date),
            &self.enrollment.binning,
        )
        .ok()
        .and_then(|r| r[0].dominant_arm);
        from_device.or_else(|| {
            self.recommendations
                .iter()
                .rev()
                .find(|r| r.date < date)
                .filter(|r| r.status == RecStatus::Accepted)
                .map(|r| r.arm)
        })
    }

    /// Live-period daily records over `span`.
    pub fn live_records(&self, span: DaySpan) -> Vec<DailyRecord> {
        let reports: Vec<SelfReport> = self
            .reports
            .range(span.start..=span.end)
            .map(|(_, s)| s.report.clone())
            .collect();
        let mobility: Vec<MobilitySample> = self
            .reports
            .range(span.start..=span.end)
            .filter_map(|(d, s)| {
                s.effective_mobility.map(|m| MobilitySample {
                    patient_id: self.patient_id.clone(),
                    date: *d,
                    effective_mobility: m,
                })
            })
            .collect();
        build_daily_records(
            &self.patient_id,
            &reports,
            &self.device_log,
            &mobility,
            span,
            &self.enrollment.binning,
        )
        .expect("stored streams are valid")
    }

    fn expire(&mut self, now: NaiveDateTime) {
        let hours = self.expiry_hours();
        for r in &mut self.recommendations {
            r.status = r.status_at(now, hours);
        }
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), ReplayError> {
        let seq = event.seq;
        if seq <= self.last_seq {
            return Err(ReplayError::OutOfSequence {
                seq,
                previous: self.last_seq,
            });
        }
        if event.patient_id != self.patient_id {
            return Err(ReplayError::WrongPatient {
                seq,
                expected: self.patient_id.clone(),
                found: event.patient_id.clone(),
            });
        }
        self.expire(event.timestamp);
        match &event.kind {
            EventKind::PatientEnrolled(_) => return Err(ReplayError::AlreadyEnrolled { seq }),
            EventKind::ReportSubmitted(r) => self.apply_report(seq, r)?,
            EventKind::RecommendationIssued(r) => self.apply_recommendation(seq, event.timestamp, r)?,
            EventKind::FeedbackSubmitted(f) => self.apply_feedback(seq, event.timestamp, f)?,
            EventKind::DeviceLogUploaded(d) => {
                self.device_log.extend(d.entries.iter().cloned());
                self.device_log.sort_by_key(|e| e.timestamp);
            }
        }
        self.last_seq = seq;
        Ok(())
    }

    fn apply_report(&mut self, seq: u64, r: &ReportSubmitted) -> Result<(), ReplayError> {
        let date = r.report.date;
        let stored = StoredReport {
            seq,
            report: r.report.clone(),
            effective_mobility: r.effective_mobility,
        };
        if let Some(existing) = self.reports.get_mut(&date) {
            // A same-day resubmission replaces the stored answers only; the
            // day has already been learned from.
            *existing = stored;
            return Ok(());
        }
        if let Some(latest) = self.latest_report_date() {
            if date < latest {
                return Err(ReplayError::ReportOutOfOrder { seq, date, latest });
            }
        }
        let engine = self.enrollment.engine;
        let features = engine
            .cycle
            .norm
            .featurize_report(&r.report, r.effective_mobility);
        if let (Some(context), Some(baseline)) = (self.context_for(date), self.current_baseline()) {
            if let Some(arm) = self.arm_used_on(date) {
                self.bandit.add_arm(arm);
                let reward = compute_reward(&features, &baseline, &engine.cycle.reward);
                self.bandit
                    .update(&RewardSample {
                        context,
                        arm,
                        reward,
                        date,
                    })
                    .map_err(|source| ReplayError::Bandit { seq, source })?;
                self.learning.push(LearningStep {
                    seq,
                    date,
                    arm,
                    reward,
                });
            }
        }
        match &mut self.tracker {
            Some(t) => t.observe(features),
            None => self.tracker = Some(ContextTracker::new(features)),
        }
        if self.baseline.is_none() && self.baseline_pool.len() < engine.baseline_reports {
            self.baseline_pool.push(features);
        }
        self.reports.insert(date, stored);
        Ok(())
    }

    fn apply_recommendation(
        &mut self,
        seq: u64,
        at: NaiveDateTime,
        r: &RecommendationIssued,
    ) -> Result<(), ReplayError> {
        if self.recommendation_for(r.date).is_some() {
            return Err(ReplayError::DuplicateRecommendation { seq, date: r.date });
        }
        self.recommendations.push(Recommendation {
            rec_id: r.rec_id.clone(),
            patient_id: self.patient_id.clone(),
            arm: r.arm,
            date: r.date,
            issued_at: at,
            rationale: r.rationale.clone(),
            status: RecStatus::Sent,
        });
        Ok(())
    }

    fn apply_feedback(
        &mut self,
        seq: u64,
        at: NaiveDateTime,
        f: &FeedbackSubmitted,
    ) -> Result<(), ReplayError> {
        let Some(rec) = self.recommendations.iter_mut().find(|r| r.rec_id == f.rec_id) else {
            return Err(ReplayError::UnknownRecommendation {
                seq,
                rec_id: f.rec_id.clone(),
            });
        };
        let mut applied = false;
        if let Some(action) = f.action {
            match (rec.status, rec.status.after(action)) {
                (_, Some(next)) => {
                    rec.status = next;
                    applied = true;
                }
                (RecStatus::Expired, None) => {}
                (from, None) => {
                    return Err(ReplayError::IllegalTransition {
                        seq,
                        rec_id: f.rec_id.clone(),
                        from,
                    })
                }
            }
        }
        self.feedback.push(FeedbackRecord {
            seq,
            timestamp: at,
            feedback: f.clone(),
            applied,
        });
        Ok(())
    }

    /// Canonical JSON of the whole state; two equal states give equal bytes.
    pub fn summary(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }
}
