#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use scsrec::domain::{DeviceLogEntry, MedicationUse, MobilitySample, PatientId, SelfReport};
use scsrec::service::{Clock, ReportRequest};
use serde_json::json;

pub fn day(n: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 3, 1).unwrap() + Duration::days(n)
}

pub fn at(n: i64, hour: u32) -> NaiveDateTime {
    day(n).and_hms_opt(hour, 0, 0).unwrap()
}

/// A report whose normalized features all equal `level` (a multiple of 0.1).
pub fn report_at_level(pid: &str, date: NaiveDate, level: f64) -> SelfReport {
    let score = (level * 10.0).round();
    SelfReport {
        patient_id: PatientId::new(pid),
        date,
        pain: 10.0 - score,
        mood: score,
        sleep: score,
        alertness: score,
        activity: score,
        medication_use: MedicationUse {
            otc_pain: (10.0 - score) as u32,
            prescribed_pain: 0,
            opioid: 0,
            sleep: 0,
        },
        free_feedback: None,
        adl: None,
    }
}

pub fn report_request(pid: &str, date: NaiveDate, level: f64) -> ReportRequest {
    let r = report_at_level(pid, date, level);
    ReportRequest {
        report: scsrec::domain::RawReport::from(&r),
        effective_mobility: Some(level),
    }
}

pub fn report_json(date: NaiveDate, level: f64) -> serde_json::Value {
    let score = (level * 10.0_f64).round();
    json!({
        "date": date,
        "pain": 10.0 - score,
        "mood": score,
        "sleep": score,
        "alertness": score,
        "activity": score,
        "medication_use": {"otc_pain": (10.0 - score) as i64, "prescribed_pain": 0, "opioid": 0, "sleep": 0},
        "effective_mobility": level,
    })
}

pub fn device_entry(pid: &str, when: NaiveDateTime, program_id: u32, amplitude: f64) -> DeviceLogEntry {
    DeviceLogEntry {
        patient_id: PatientId::new(pid),
        timestamp: when,
        program_id,
        amplitude,
    }
}

pub fn mobility(pid: &str, date: NaiveDate, v: f64) -> MobilitySample {
    MobilitySample {
        patient_id: PatientId::new(pid),
        date,
        effective_mobility: v,
    }
}

/// Settable clock for deterministic event timestamps.
#[derive(Clone)]
pub struct TestClock(pub Arc<Mutex<NaiveDateTime>>);

impl TestClock {
    pub fn new(start: NaiveDateTime) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    pub fn set(&self, t: NaiveDateTime) {
        *self.0.lock().unwrap() = t;
    }

    pub fn advance(&self, d: Duration) {
        *self.0.lock().unwrap() += d;
    }

    pub fn clock(&self) -> Clock {
        let inner = self.0.clone();
        Arc::new(move || *inner.lock().unwrap())
    }
}
