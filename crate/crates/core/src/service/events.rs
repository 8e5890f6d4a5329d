//! Event records persisted to the per-patient log.

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::bandit::{ContextVector, CycleConfig, Exploration};
use crate::domain::{
    Arm, ArmBinning, DeviceLogEntry, EligibilityConfig, MobilitySample, PatientId, SelfReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: NaiveDateTime,
    pub patient_id: PatientId,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventKind {
    PatientEnrolled(Enrollment),
    ReportSubmitted(ReportSubmitted),
    RecommendationIssued(RecommendationIssued),
    FeedbackSubmitted(FeedbackSubmitted),
    DeviceLogUploaded(DeviceLogUploaded),
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::PatientEnrolled(_) => "PatientEnrolled",
            EventKind::ReportSubmitted(_) => "ReportSubmitted",
            EventKind::RecommendationIssued(_) => "RecommendationIssued",
            EventKind::FeedbackSubmitted(_) => "FeedbackSubmitted",
            EventKind::DeviceLogUploaded(_) => "DeviceLogUploaded",
        }
    }
}

/// Engine parameters frozen into the log at enrollment so that replay never
/// depends on the running service's configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub lambda: f64,
    pub exploration: Exploration,
    pub cycle: CycleConfig,
    /// Without an enrollment history, the reward baseline is the mean of
    /// this many first reports.
    pub baseline_reports: usize,
    pub expiry_hours: i64,
    pub eligibility: EligibilityConfig,
}

/// Comparison-period data supplied when a patient is enrolled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrollmentHistory {
    pub reports: Vec<SelfReport>,
    pub device_log: Vec<DeviceLogEntry>,
    pub mobility: Vec<MobilitySample>,
}

impl EnrollmentHistory {
    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enrollment {
    pub arms: Vec<Arm>,
    pub binning: ArmBinning,
    pub engine: EngineSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<EnrollmentHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSubmitted {
    pub report: SelfReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_mobility: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPrediction {
    pub program_id: u32,
    pub intensity_bin: u32,
    pub predicted: f64,
}

impl ArmPrediction {
    pub fn arm(&self) -> Arm {
        Arm::new(self.program_id, self.intensity_bin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationIssued {
    pub rec_id: String,
    /// Report day that triggered the recommendation.
    pub date: NaiveDate,
    pub arm: Arm,
    pub context: ContextVector,
    /// Predicted reward per arm, best first.
    pub rationale: Vec<ArmPrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackAction {
    Accept,
    Dismiss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSubmitted {
    pub rec_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<FeedbackAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLogUploaded {
    pub entries: Vec<DeviceLogEntry>,
}
