//! Live backend: accepts reports and feedback, issues recommendations and
//! serves dashboards. Every change is an event appended to a per-patient
//! log, and in-memory state is a fold over that log.

pub mod config;
pub mod events;
pub mod fold;
pub mod http;
pub mod log;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{Duration, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ingest_device_log, ingest_mobility, ingest_reports, Arm, ArmBinning, DaySpan, DeviceLogEntry,
    EligibilityReport, PatientId, RawReport,
};
use crate::evaluation::{evaluate_patient, EvaluationConfig, HolisticOutcome};
use crate::patient_state::{
    classify_subgroup, dwell_profile_of, DwellChange, DwellProfile, StateModel, Subgroup,
};

pub use config::{ConfigError, ServiceConfig};
pub use events::{
    ArmPrediction, DeviceLogUploaded, EngineSettings, Enrollment, EnrollmentHistory, Event,
    EventKind, FeedbackAction, FeedbackSubmitted, RecommendationIssued, ReportSubmitted,
};
pub use fold::{replay, PatientFold, RecStatus, Recommendation, ReplayError};
pub use log::{decode_log, encode_line, EventLog, LogError, Snapshot};

/// Source of event timestamps (patient-local wall clock).
pub type Clock = Arc<dyn Fn() -> NaiveDateTime + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| Utc::now().naive_utc())
}

pub const DEFAULT_WINDOW_DAYS: u32 = 30;
pub const MAX_WINDOW_DAYS: u32 = 366;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Splits a validation message such as `pain out of range` or
    /// `missing field date` into field and reason.
    pub fn from_message(message: &str) -> Self {
        if let Some(field) = message.strip_prefix("missing field ") {
            return Self::new(field, "missing");
        }
        match message.split_once(' ') {
            Some((field, reason)) => Self::new(field, reason),
            None => Self::new("", message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    Validation {
        message: String,
        field_errors: Vec<FieldError>,
    },
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Forbidden(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation { .. } => "validation_failed",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::Log(_)
            | ServiceError::Replay(_)
            | ServiceError::Config(_)
            | ServiceError::Io(_) => "internal",
        }
    }

    fn invalid(field_errors: Vec<FieldError>) -> Self {
        ServiceError::Validation {
            message: "request failed validation".to_owned(),
            field_errors,
        }
    }
}

/// Patient ids double as file names, so they are restricted to a safe set.
pub fn validate_patient_id(id: &str) -> Result<PatientId, ServiceError> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().next().is_some_and(|c| c.is_ascii_alphanumeric())
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(PatientId::new(id))
    } else {
        Err(ServiceError::invalid(vec![FieldError::new(
            "patient_id",
            "must be 1-64 characters of [A-Za-z0-9_.-] starting with a letter or digit",
        )]))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrollRequest {
    pub arms: Vec<Arm>,
    pub binning: Option<ArmBinning>,
    pub history: Option<EnrollmentHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    #[serde(flatten)]
    pub report: RawReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_mobility: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackRequest {
    pub action: Option<FeedbackAction>,
    pub text: Option<String>,
    pub rating: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLogRequest {
    pub entries: Vec<DeviceLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollResponse {
    pub patient_id: PatientId,
    pub seq: u64,
    pub arms: Vec<Arm>,
    pub eligibility: Option<EligibilityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationView {
    pub rec_id: String,
    pub patient_id: PatientId,
    pub arm: Arm,
    pub date: NaiveDate,
    pub issued_at: NaiveDateTime,
    pub expires_at: NaiveDateTime,
    pub status: RecStatus,
    pub rationale: Vec<ArmPrediction>,
}

impl RecommendationView {
    fn new(rec: &Recommendation, now: NaiveDateTime, expiry_hours: i64) -> Self {
        Self {
            rec_id: rec.rec_id.clone(),
            patient_id: rec.patient_id.clone(),
            arm: rec.arm,
            date: rec.date,
            issued_at: rec.issued_at,
            expires_at: rec.issued_at + Duration::hours(expiry_hours),
            status: rec.status_at(now, expiry_hours),
            rationale: rec.rationale.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub patient_id: PatientId,
    pub date: NaiveDate,
    pub seq: u64,
    /// An earlier report for the same day was replaced.
    pub superseded: bool,
    /// The engine learned from this report.
    pub learned: bool,
    pub recommendation: Option<RecommendationView>,
    /// Why no recommendation was issued, when suppressed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub rec_id: String,
    pub seq: u64,
    pub status: RecStatus,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLogResponse {
    pub seq: Option<u64>,
    pub accepted: usize,
    pub rejected: Vec<crate::domain::Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub comparison_days: usize,
    pub recommendation_days: usize,
    pub dwell_change: DwellChange,
    pub holistic: HolisticOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSummary {
    pub issued: usize,
    pub accepted: usize,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dashboard {
    pub patient_id: PatientId,
    pub window: DaySpan,
    pub window_days: u32,
    /// True when the window holds no report; the profile is then absent
    /// rather than zero.
    pub empty_window: bool,
    pub dwell_profile: Option<DwellProfile>,
    pub comparison_profile: Option<DwellProfile>,
    pub subgroup: Option<Subgroup>,
    pub latest_outcome: Option<OutcomeSummary>,
    pub acceptance: AcceptanceSummary,
    pub eligibility: Option<EligibilityReport>,
}

#[derive(Debug)]
struct Slot {
    log: EventLog,
    fold: PatientFold,
    since_snapshot: u64,
}

pub struct Service {
    config: ServiceConfig,
    model: StateModel,
    clock: Clock,
    patients: RwLock<BTreeMap<PatientId, Arc<Mutex<Slot>>>>,
}

const LOG_SUFFIX: &str = ".events.jsonl";
const SNAPSHOT_SUFFIX: &str = ".snapshot.json";

pub fn log_path(dir: &Path, patient: &PatientId) -> PathBuf {
    dir.join(format!("{patient}{LOG_SUFFIX}"))
}

pub fn snapshot_path(dir: &Path, patient: &PatientId) -> PathBuf {
    dir.join(format!("{patient}{SNAPSHOT_SUFFIX}"))
}

/// Rebuilds one patient from its log, starting from the snapshot when a
/// usable one exists.
pub fn recover_patient(
    log: &[Event],
    snapshot: Option<Snapshot>,
) -> Result<Option<PatientFold>, ReplayError> {
    let usable = snapshot.filter(|s| {
        s.state.last_seq == s.seq && log.iter().any(|e| e.seq == s.seq)
    });
    match usable {
        Some(s) => {
            let mut fold = s.state;
            for e in log.iter().filter(|e| e.seq > s.seq) {
                fold.apply(e)?;
            }
            Ok(Some(fold))
        }
        None => replay(log),
    }
}

fn lock(slot: &Mutex<Slot>) -> std::sync::MutexGuard<'_, Slot> {
    slot.lock().unwrap_or_else(|p| p.into_inner())
}

impl Service {
    /// Opens the service, recovering every patient log under the data
    /// directory. A damaged log stops startup.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        Self::with_clock(config, system_clock())
    }

    pub fn with_clock(config: ServiceConfig, clock: Clock) -> Result<Self, ServiceError> {
        let model = match &config.state_model {
            Some(p) => StateModel::from_json(&fs::read_to_string(p)?)
                .map_err(|e| ServiceError::BadRequest(format!("state model {}: {e}", p.display())))?,
            None => StateModel::reference(),
        };
        let mut patients = BTreeMap::new();
        if let Some(dir) = &config.data_dir {
            fs::create_dir_all(dir)?;
            let mut names: Vec<String> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| n.ends_with(LOG_SUFFIX))
                .collect();
            names.sort();
            for name in names {
                let pid = PatientId::new(name.trim_end_matches(LOG_SUFFIX));
                let log = EventLog::open(&log_path(dir, &pid))?;
                let snap = Snapshot::read(&snapshot_path(dir, &pid));
                if let Some(fold) = recover_patient(log.events(), snap)? {
                    let slot = Slot {
                        log,
                        fold,
                        since_snapshot: 0,
                    };
                    patients.insert(pid, Arc::new(Mutex::new(slot)));
                }
            }
        }
        Ok(Self {
            config,
            model,
            clock,
            patients: RwLock::new(patients),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn now(&self) -> NaiveDateTime {
        (self.clock)()
    }

    pub fn patient_ids(&self) -> Vec<PatientId> {
        self.patients
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    fn slot(&self, pid: &PatientId) -> Result<Arc<Mutex<Slot>>, ServiceError> {
        self.patients
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(pid)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown patient {pid}")))
    }

    /// Validates the event against the current state, then persists it.
    fn commit(&self, slot: &mut Slot, kind: EventKind) -> Result<u64, ServiceError> {
        let seq = slot.log.last_seq() + 1;
        let event = Event {
            seq,
            timestamp: self.now(),
            patient_id: slot.fold.patient_id.clone(),
            kind,
        };
        let mut next = slot.fold.clone();
        next.apply(&event)?;
        slot.log.append(event)?;
        slot.fold = next;
        slot.since_snapshot += 1;
        if let Some(dir) = &self.config.data_dir {
            if self.config.snapshot_every > 0 && slot.since_snapshot >= self.config.snapshot_every {
                Snapshot {
                    seq,
                    state: slot.fold.clone(),
                }
                .write(&snapshot_path(dir, &slot.fold.patient_id))?;
                slot.since_snapshot = 0;
            }
        }
        Ok(seq)
    }

    /// Registers a patient, optionally with comparison-period data that
    /// decides eligibility and seeds the engine.
    pub fn enroll(&self, patient_id: &str, req: EnrollRequest) -> Result<EnrollResponse, ServiceError> {
        let pid = validate_patient_id(patient_id)?;
        let binning = req.binning.unwrap_or(self.config.binning);
        let mut field_errors = Vec::new();
        if !(binning.amp_max > 0.0) || binning.bins == 0 {
            field_errors.push(FieldError::new("binning", "amp_max must be positive and bins at least 1"));
        }
        let history = match req.history {
            Some(h) => {
                let reports = ingest_reports(h.reports.iter().map(RawReport::from));
                let device = ingest_device_log(h.device_log, &binning);
                let mobility = ingest_mobility(h.mobility);
                for (stream, rejected) in [
                    ("history.reports", &reports.rejected),
                    ("history.device_log", &device.rejected),
                    ("history.mobility", &mobility.rejected),
                ] {
                    for r in rejected {
                        field_errors.push(FieldError::new(format!("{stream}[{}]", r.index), r.reason.clone()));
                    }
                }
                let wrong = reports
                    .records
                    .iter()
                    .map(|r| &r.patient_id)
                    .chain(device.records.iter().map(|d| &d.patient_id))
                    .chain(mobility.records.iter().map(|m| &m.patient_id))
                    .any(|p| *p != pid);
                if wrong {
                    field_errors.push(FieldError::new("history", "records for another patient"));
                }
                Some(EnrollmentHistory {
                    reports: reports.records,
                    device_log: device.records,
                    mobility: mobility.records,
                })
            }
            None => None,
        }
        .filter(|h| !h.is_empty());
        if req.arms.is_empty() && history.is_none() {
            field_errors.push(FieldError::new("arms", "required when no history with reports is given"));
        }
        if !field_errors.is_empty() {
            return Err(ServiceError::invalid(field_errors));
        }
        let mut patients = self.patients.write().unwrap_or_else(|p| p.into_inner());
        if patients.contains_key(&pid) {
            return Err(ServiceError::Conflict(format!("patient {pid} is already enrolled")));
        }
        let event = Event {
            seq: 1,
            timestamp: self.now(),
            patient_id: pid.clone(),
            kind: EventKind::PatientEnrolled(Enrollment {
                arms: req.arms,
                binning,
                engine: self.config.engine(),
                history,
            }),
        };
        let fold = PatientFold::enroll(&event)?;
        if fold.bandit.arms().next().is_none() {
            return Err(ServiceError::invalid(vec![FieldError::new(
                "history.device_log",
                "no stimulation arm could be derived",
            )]));
        }
        let mut log = match &self.config.data_dir {
            Some(dir) => EventLog::open(&log_path(dir, &pid))?,
            None => EventLog::in_memory(),
        };
        if log.last_seq() != 0 {
            return Err(ServiceError::Conflict(format!("log for {pid} already exists")));
        }
        log.append(event)?;
        let response = EnrollResponse {
            patient_id: pid.clone(),
            seq: 1,
            arms: fold.bandit.arms().collect(),
            eligibility: fold.eligibility.clone(),
        };
        let slot = Slot {
            log,
            fold,
            since_snapshot: 1,
        };
        patients.insert(pid, Arc::new(Mutex::new(slot)));
        Ok(response)
    }

    /// Stores a report, lets the engine learn from it and issues at most one
    /// recommendation for that day.
    pub fn handle_report(&self, patient_id: &str, req: ReportRequest) -> Result<ReportResponse, ServiceError> {
        let pid = validate_patient_id(patient_id)?;
        let mut raw = req.report;
        let mut field_errors = Vec::new();
        match raw.patient_id.as_deref() {
            None => raw.patient_id = Some(pid.0.clone()),
            Some(id) if id != pid.as_str() => {
                field_errors.push(FieldError::new("patient_id", "does not match the path"))
            }
            Some(_) => {}
        }
        if let Some(m) = req.effective_mobility {
            if !(0.0..=1.0).contains(&m) {
                field_errors.push(FieldError::new("effective_mobility", "out of range"));
            }
        }
        let report = match raw.validate() {
            Ok(r) => Some(r),
            Err(errors) => {
                field_errors.extend(errors.iter().map(|e| FieldError::from_message(e)));
                None
            }
        };
        if !field_errors.is_empty() {
            return Err(ServiceError::invalid(field_errors));
        }
        let report = report.expect("validated");
        let date = report.date;

        let slot = self.slot(&pid)?;
        let mut slot = lock(&slot);
        if let Some(latest) = slot.fold.latest_report_date() {
            if date < latest {
                return Err(ServiceError::Conflict(format!(
                    "report for {date} precedes the latest report {latest}"
                )));
            }
        }
        let superseded = slot.fold.reports.contains_key(&date);
        let seq = self.commit(
            &mut slot,
            EventKind::ReportSubmitted(ReportSubmitted {
                report,
                effective_mobility: req.effective_mobility,
            }),
        )?;
        let learned = slot.fold.learning.last().is_some_and(|l| l.seq == seq);
        let now = self.now();
        let hours = slot.fold.expiry_hours();
        let mut response = ReportResponse {
            patient_id: pid.clone(),
            date,
            seq,
            superseded,
            learned,
            recommendation: None,
            suppressed: Vec::new(),
        };
        if let Some(existing) = slot.fold.recommendation_for(date) {
            response.recommendation = Some(RecommendationView::new(existing, now, hours));
            return Ok(response);
        }
        if superseded {
            return Ok(response);
        }
        if !slot.fold.eligible() {
            response.suppressed = slot
                .fold
                .eligibility
                .as_ref()
                .map(|e| e.reasons.clone())
                .unwrap_or_default();
            return Ok(response);
        }
        let context = slot
            .fold
            .context_for(date + Duration::days(1))
            .expect("a report was just folded");
        let bandit = &slot.fold.bandit;
        let arm = bandit.recommend(&context).map_err(ReplayError::from_bandit(seq))?;
        let mut rationale: Vec<ArmPrediction> = bandit
            .predict_rewards(&context)
            .map_err(ReplayError::from_bandit(seq))?
            .into_iter()
            .map(|(a, predicted)| ArmPrediction {
                program_id: a.program_id,
                intensity_bin: a.intensity_bin,
                predicted,
            })
            .collect();
        rationale.sort_by(|a, b| b.predicted.total_cmp(&a.predicted).then(a.arm().cmp(&b.arm())));
        let rec_seq = slot.log.last_seq() + 1;
        let rec_id = format!("{pid}-{rec_seq}");
        self.commit(
            &mut slot,
            EventKind::RecommendationIssued(RecommendationIssued {
                rec_id: rec_id.clone(),
                date,
                arm,
                context,
                rationale,
            }),
        )?;
        let rec = slot.fold.recommendation(&rec_id).expect("just issued");
        response.recommendation = Some(RecommendationView::new(rec, now, hours));
        Ok(response)
    }

    /// Records feedback and applies its status transition. Feedback never
    /// changes the engine.
    pub fn handle_feedback(&self, rec_id: &str, req: FeedbackRequest) -> Result<FeedbackResponse, ServiceError> {
        let not_found = || ServiceError::NotFound(format!("unknown recommendation {rec_id}"));
        let (patient, _) = rec_id.rsplit_once('-').ok_or_else(not_found)?;
        let pid = validate_patient_id(patient).map_err(|_| not_found())?;
        if let Some(r) = req.rating {
            if !(1..=5).contains(&r) {
                return Err(ServiceError::invalid(vec![FieldError::new("rating", "out of range")]));
            }
        }
        let slot = self.slot(&pid).map_err(|_| not_found())?;
        let mut slot = lock(&slot);
        let rec = slot.fold.recommendation(rec_id).ok_or_else(not_found)?;
        let status = rec.status_at(self.now(), slot.fold.expiry_hours());
        if let Some(action) = req.action {
            if status != RecStatus::Expired && status.after(action).is_none() {
                return Err(ServiceError::Conflict(format!(
                    "recommendation {rec_id} is already {status:?}"
                )));
            }
        }
        let seq = self.commit(
            &mut slot,
            EventKind::FeedbackSubmitted(FeedbackSubmitted {
                rec_id: rec_id.to_owned(),
                action: req.action,
                text: req.text,
                rating: req.rating.map(|r| r as u8),
            }),
        )?;
        let rec = slot.fold.recommendation(rec_id).expect("exists");
        let applied = slot.fold.feedback.last().is_some_and(|f| f.applied);
        Ok(FeedbackResponse {
            rec_id: rec_id.to_owned(),
            seq,
            status: rec.status,
            applied,
        })
    }

    pub fn upload_device_log(&self, patient_id: &str, req: DeviceLogRequest) -> Result<DeviceLogResponse, ServiceError> {
        let pid = validate_patient_id(patient_id)?;
        let slot = self.slot(&pid)?;
        let mut slot = lock(&slot);
        let mut ingested = ingest_device_log(req.entries, &slot.fold.enrollment.binning);
        if ingested.records.iter().any(|e| e.patient_id != pid) {
            return Err(ServiceError::invalid(vec![FieldError::new(
                "entries",
                "records for another patient",
            )]));
        }
        if ingested.records.is_empty() {
            return Ok(DeviceLogResponse {
                seq: None,
                accepted: 0,
                rejected: ingested.rejected,
            });
        }
        let accepted = ingested.records.len();
        let seq = self.commit(
            &mut slot,
            EventKind::DeviceLogUploaded(DeviceLogUploaded {
                entries: std::mem::take(&mut ingested.records),
            }),
        )?;
        Ok(DeviceLogResponse {
            seq: Some(seq),
            accepted,
            rejected: ingested.rejected,
        })
    }

    pub fn latest_recommendation(&self, patient_id: &str) -> Result<RecommendationView, ServiceError> {
        let pid = validate_patient_id(patient_id)?;
        let slot = self.slot(&pid)?;
        let slot = lock(&slot);
        let rec = slot
            .fold
            .recommendations
            .last()
            .ok_or_else(|| ServiceError::NotFound(format!("no recommendation for {pid}")))?;
        Ok(RecommendationView::new(rec, self.now(), slot.fold.expiry_hours()))
    }

    /// Triage summary over the `window_days` days ending today.
    pub fn dashboard(&self, patient_id: &str, window_days: Option<u32>) -> Result<Dashboard, ServiceError> {
        let pid = validate_patient_id(patient_id)?;
        let window_days = window_days.unwrap_or(DEFAULT_WINDOW_DAYS);
        if !(1..=MAX_WINDOW_DAYS).contains(&window_days) {
            return Err(ServiceError::invalid(vec![FieldError::new(
                "window_days",
                format!("must be between 1 and {MAX_WINDOW_DAYS}"),
            )]));
        }
        let slot = self.slot(&pid)?;
        let fold = lock(&slot).fold.clone();
        let now = self.now();
        let today = now.date();
        let window = DaySpan::from_len(today - Duration::days(window_days as i64 - 1), window_days);
        let norm = &fold.enrollment.engine.cycle.norm;

        let records = fold.live_records(window);
        let empty_window = records.iter().all(|r| r.report.is_none());
        let dwell_profile = (!empty_window).then(|| dwell_profile_of(&records, norm, &self.model));
        let comparison_profile = (!fold.comparison.is_empty())
            .then(|| dwell_profile_of(&fold.comparison, norm, &self.model))
            .filter(|p| !p.is_empty());
        let subgroup = comparison_profile
            .as_ref()
            .or(dwell_profile.as_ref())
            .and_then(|p| classify_subgroup(p, &self.config.subgroups).ok());

        let latest_outcome = match (comparison_profile.is_some(), fold.reports.keys().next()) {
            (true, Some(first)) => {
                let live = fold.live_records(DaySpan::new(*first, today.max(*first)));
                let cfg = EvaluationConfig {
                    alpha: self.config.alpha_level,
                    n_resamples: self.config.n_resamples,
                    seed: self.config.seed,
                    dwell_rule: self.config.dwell_rule,
                    subgroups: self.config.subgroups,
                    norm: *norm,
                };
                evaluate_patient(&pid, &fold.comparison, &live, &self.model, &cfg)
                    .ok()
                    .map(|e| OutcomeSummary {
                        comparison_days: e.period_days,
                        recommendation_days: e.period_days,
                        dwell_change: e.dwell_change,
                        holistic: e.holistic,
                    })
            }
            _ => None,
        };

        let hours = fold.expiry_hours();
        let in_window: Vec<&Recommendation> = fold
            .recommendations
            .iter()
            .filter(|r| window.contains(r.date))
            .collect();
        let accepted = in_window
            .iter()
            .filter(|r| r.status_at(now, hours) == RecStatus::Accepted)
            .count();
        let issued = in_window.len();
        Ok(Dashboard {
            patient_id: pid,
            window,
            window_days,
            empty_window,
            dwell_profile,
            comparison_profile,
            subgroup,
            latest_outcome,
            acceptance: AcceptanceSummary {
                issued,
                accepted,
                rate: (issued > 0).then(|| accepted as f64 / issued as f64),
            },
            eligibility: fold.eligibility,
        })
    }

    /// Current folded state of one patient.
    pub fn state(&self, patient_id: &PatientId) -> Result<PatientFold, ServiceError> {
        let slot = self.slot(patient_id)?;
        let fold = lock(&slot).fold.clone();
        Ok(fold)
    }

    pub fn events(&self, patient_id: &PatientId) -> Result<Vec<Event>, ServiceError> {
        let slot = self.slot(patient_id)?;
        let events = lock(&slot).log.events().to_vec();
        Ok(events)
    }

    /// Writes a snapshot of one patient now.
    pub fn snapshot(&self, patient_id: &PatientId) -> Result<Option<u64>, ServiceError> {
        let Some(dir) = &self.config.data_dir else {
            return Ok(None);
        };
        let slot = self.slot(patient_id)?;
        let mut slot = lock(&slot);
        let seq = slot.fold.last_seq;
        Snapshot {
            seq,
            state: slot.fold.clone(),
        }
        .write(&snapshot_path(dir, patient_id))?;
        slot.since_snapshot = 0;
        Ok(Some(seq))
    }
}

impl ReplayError {
    fn from_bandit(seq: u64) -> impl Fn(crate::bandit::BanditError) -> ReplayError {
        move |source| ReplayError::Bandit { seq, source }
    }
}
