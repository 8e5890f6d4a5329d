//! Closed-loop recommender for spinal cord stimulation settings.
//!
//! The crate ingests daily patient self-reports, stimulator usage and
//! wearable mobility, learns per-setting reward models with a contextual
//! bandit, issues recommendations, and evaluates outcomes through Patient
//! State dwell times and permutation tests. A synthetic-patient simulator
//! drives the whole loop without clinical data, and [`service`] exposes it
//! as an event-sourced HTTP backend.

pub mod bandit;
pub mod domain;
pub mod evaluation;
pub mod linalg;
pub mod patient_state;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod service;

pub use bandit::{BanditError, BanditState, ContextVector, RewardSample};
pub use domain::{Arm, ArmBinning, DailyRecord, PatientId, SelfReport};
pub use patient_state::{DwellProfile, PatientState, StateModel, Subgroup};
