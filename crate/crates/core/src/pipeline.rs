//! File-based trial layout shared by the simulator output and offline
//! evaluation: one directory per patient holding the three JSONL streams
//! and a `patient.json` describing the two periods.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    build_daily_records, parse_device_log_jsonl, parse_mobility_jsonl, parse_reports_csv,
    parse_reports_jsonl, ArmBinning, DailyRecord, DaySpan, DomainError, PatientId, Rejection,
};
use crate::evaluation::{
    evaluate_patient, summarize_cohort, CohortEntry, CohortSummary, EvalError, EvaluationConfig,
    PatientEvaluation,
};
use crate::patient_state::{PatientState, StateModel};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const REPORTS_CSV_FILE: &str = "reports.csv";
pub const DEVICE_LOG_FILE: &str = "device_log.jsonl";
pub const MOBILITY_FILE: &str = "mobility.jsonl";
pub const META_FILE: &str = "patient.json";
pub const TRIAL_FILE: &str = "trial.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Meta { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Domain { path: PathBuf, source: DomainError },
    #[error("patient {patient_id}: {source}")]
    Eval { patient_id: PatientId, source: EvalError },
    #[error("no patient directories under {0}")]
    NoPatients(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    pub patient_id: PatientId,
    pub comparison: DaySpan,
    pub recommendation: DaySpan,
    #[serde(default)]
    pub binning: ArmBinning,
}

/// One patient's aligned records, split by period.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPatient {
    pub meta: PatientMeta,
    pub comparison: Vec<DailyRecord>,
    pub recommendation: Vec<DailyRecord>,
    /// Input lines that failed validation, per stream file.
    pub rejected: Vec<(String, Rejection)>,
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_owned(),
        source,
    })
}

fn read_optional(path: &Path) -> Result<String, PipelineError> {
    if path.exists() {
        read(path)
    } else {
        Ok(String::new())
    }
}

/// Reads and aligns one patient directory. Reports come from
/// `reports.jsonl`, or `reports.csv` when there is no JSONL file.
pub fn load_patient_dir(dir: &Path) -> Result<LoadedPatient, PipelineError> {
    let meta_path = dir.join(META_FILE);
    let meta: PatientMeta = serde_json::from_str(&read(&meta_path)?).map_err(|e| PipelineError::Meta {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    if meta.comparison.is_empty() || meta.recommendation.is_empty() {
        return Err(PipelineError::Meta {
            path: meta_path,
            message: "periods must be non-empty".to_owned(),
        });
    }
    let jsonl = dir.join(REPORTS_FILE);
    let reports = if jsonl.exists() {
        parse_reports_jsonl(&read(&jsonl)?)
    } else {
        let csv_path = dir.join(REPORTS_CSV_FILE);
        parse_reports_csv(read(&csv_path)?.as_bytes()).map_err(|source| PipelineError::Domain {
            path: csv_path,
            source,
        })?
    };
    let device = parse_device_log_jsonl(&read_optional(&dir.join(DEVICE_LOG_FILE))?, &meta.binning);
    let mobility = parse_mobility_jsonl(&read_optional(&dir.join(MOBILITY_FILE))?);
    let mut rejected = Vec::new();
    for (name, list) in [
        (REPORTS_FILE, reports.rejected),
        (DEVICE_LOG_FILE, device.rejected),
        (MOBILITY_FILE, mobility.rejected),
    ] {
        rejected.extend(list.into_iter().map(|r| (name.to_owned(), r)));
    }
    let build = |span: DaySpan| {
        build_daily_records(
            &meta.patient_id,
            &reports.records,
            &device.records,
            &mobility.records,
            span,
            &meta.binning,
        )
        .map_err(|source| PipelineError::Domain {
            path: dir.to_owned(),
            source,
        })
    };
    Ok(LoadedPatient {
        comparison: build(meta.comparison)?,
        recommendation: build(meta.recommendation)?,
        meta,
        rejected,
    })
}

/// Patient directories under `root`: `root` itself if it holds a
/// `patient.json`, otherwise each child directory that does, sorted.
pub fn patient_dirs(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if root.join(META_FILE).exists() {
        return Ok(vec![root.to_owned()]);
    }
    let entries = fs::read_dir(root).map_err(|source| PipelineError::Io {
        path: root.to_owned(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(PipelineError::NoPatients(root.to_owned()));
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub patients: Vec<PatientEvaluation>,
    pub summary: CohortSummary,
}

pub fn evaluate_dirs(
    dirs: &[PathBuf],
    model: &StateModel,
    config: &EvaluationConfig,
) -> Result<CohortReport, PipelineError> {
    let mut patients = Vec::new();
    for dir in dirs {
        let p = load_patient_dir(dir)?;
        let eval = evaluate_patient(&p.meta.patient_id, &p.comparison, &p.recommendation, model, config)
            .map_err(|source| PipelineError::Eval {
                patient_id: p.meta.patient_id.clone(),
                source,
            })?;
        patients.push(eval);
    }
    let entries: Vec<CohortEntry> = patients.iter().map(CohortEntry::from).collect();
    Ok(CohortReport {
        summary: summarize_cohort(&entries),
        patients,
    })
}

/// Paired dwell fractions per patient and period, for bar charts.
pub fn dwell_plot_csv(patients: &[PatientEvaluation]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "period", "state", "fraction", "days_counted"])
        .expect("in-memory write");
    for p in patients {
        for (period, profile) in [
            ("comparison", &p.comparison_dwell),
            ("recommendation", &p.recommendation_dwell),
        ] {
            for s in PatientState::ALL {
                w.write_record([
                    p.patient_id.to_string(),
                    period.to_owned(),
                    s.to_string(),
                    profile.fractions.get(s).to_string(),
                    profile.days_counted.to_string(),
                ])
                .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
