use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use scsrec::evaluation::{EvaluationConfig, DEFAULT_ALPHA, DEFAULT_RESAMPLES};
use scsrec::patient_state::{featurize, fit_centroids, NormalizationConfig, StateModel};
use scsrec::pipeline::{dwell_plot_csv, evaluate_dirs, load_patient_dir, patient_dirs};
use scsrec::rng::mix_seed;
use scsrec::service::{http, Service, ServiceConfig};
use scsrec::simulator::{gen_patient, run_trial, share_recommending, write_trial, PatientSpec, SimError, TrialConfig};
use scsrec::PatientId;

#[derive(Parser)]
#[command(name = "scsrec", version, about = "Closed-loop stimulation recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort and write each trial in the ingestion formats.
    Simulate {
        #[arg(long, default_value_t = 20)]
        patients: usize,
        /// Days per period; both periods have this length.
        #[arg(long, default_value_t = 90)]
        days: u32,
        #[arg(long, default_value_t = 6)]
        arms: usize,
        /// Probability of following a recommendation.
        #[arg(long, default_value_t = 1.0)]
        compliance: f64,
        /// Probability of filing the daily questionnaire.
        #[arg(long, default_value_t = 0.9)]
        report_compliance: f64,
        #[arg(long, default_value_t = 0.3)]
        gap: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate patient directories and summarize the cohort.
    Evaluate {
        /// A patient directory, or a directory of them.
        #[arg(long)]
        patient_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Summary JSON path; per-patient JSON and CSVs go next to it.
        #[arg(long)]
        out: PathBuf,
        /// Also write paired dwell-profile bar data.
        #[arg(long)]
        plot: bool,
        /// State model JSON; the reference centroids otherwise.
        #[arg(long)]
        state_model: Option<PathBuf>,
    },
    /// Fit state centroids to every report in the given directories.
    FitStates {
        #[arg(long)]
        patient_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML config file; SCSREC_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()).into())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    patients: usize,
    days: u32,
    arms: usize,
    compliance: f64,
    report_compliance: f64,
    gap: f64,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut written = 0;
    for i in 0..patients {
        let id = format!("sim-{i:03}");
        let patient_seed = mix_seed(seed, &["patient", &id]);
        let spec = PatientSpec {
            patient_id: PatientId::new(&id),
            arm_count: arms,
            dominance_gap: gap,
            noise_sigma: noise,
            compliance_p: compliance,
            ..PatientSpec::default()
        };
        let patient = gen_patient(&spec, patient_seed)?;
        let config = TrialConfig {
            n_days_comparison: days,
            n_days_recommendation: days,
            seed: patient_seed,
            report_compliance_p: report_compliance,
            ..TrialConfig::default()
        };
        match run_trial(&patient, &config) {
            Ok(result) => {
                write_trial(&out.join(&id), &patient, &result)?;
                written += 1;
                println!(
                    "{id}: best arm {} recommended on {:.0}% of the last 30 days, mean reward {:+.3} -> {:+.3}",
                    patient.best_arm(),
                    100.0 * share_recommending(&result, patient.best_arm(), 30),
                    result.mean_comparison_reward(),
                    result.mean_recommendation_reward(),
                );
            }
            Err(SimError::Ineligible { reasons, .. }) => {
                println!("{id}: skipped, ineligible ({})", reasons.join(", "));
            }
            Err(e) => return Err(e.into()),
        }
    }
    println!("wrote {written} of {patients} trials to {}", out.display());
    Ok(())
}

fn load_model(path: Option<&Path>) -> Result<StateModel> {
    Ok(match path {
        Some(p) => StateModel::from_json(&fs::read_to_string(p)?)?,
        None => StateModel::reference(),
    })
}

fn evaluate(
    patient_dir: &Path,
    config: EvaluationConfig,
    out: &Path,
    plot: bool,
    state_model: Option<&Path>,
) -> Result<()> {
    let model = load_model(state_model)?;
    let dirs = patient_dirs(patient_dir)?;
    let report = evaluate_dirs(&dirs, &model, &config)?;
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("summary");
    let per_patient = out_dir.join("patients");
    fs::create_dir_all(&per_patient)?;
    for p in &report.patients {
        write(
            &per_patient.join(format!("{}.json", p.patient_id)),
            serde_json::to_string_pretty(p)?,
        )?;
        write(
            &per_patient.join(format!("{}.comparison_dwell.csv", p.patient_id)),
            p.comparison_dwell.to_csv(),
        )?;
        write(
            &per_patient.join(format!("{}.recommendation_dwell.csv", p.patient_id)),
            p.recommendation_dwell.to_csv(),
        )?;
    }
    write(out, serde_json::to_string_pretty(&report)?)?;
    write(&out_dir.join(format!("{stem}_cohort.csv")), report.summary.to_csv())?;
    if plot {
        write(&out_dir.join(format!("{stem}_dwell_plot.csv")), dwell_plot_csv(&report.patients))?;
    }
    print!("{}", report.summary.to_csv());
    Ok(())
}

fn fit_states(patient_dir: &Path, seed: u64, out: &Path) -> Result<()> {
    let norm = NormalizationConfig::default();
    let mut features = Vec::new();
    for dir in patient_dirs(patient_dir)? {
        let p = load_patient_dir(&dir)?;
        features.extend(p.comparison.iter().chain(&p.recommendation).filter_map(|r| featurize(r, &norm)));
    }
    let model = fit_centroids(&features, seed)?;
    write(out, model.to_json())?;
    println!("fitted {} reports into {}", features.len(), out.display());
    Ok(())
}

fn serve(config: Option<&Path>, port: Option<u16>, data_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = ServiceConfig::load(config)?;
    if let Some(p) = port {
        cfg.port = p;
    }
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    let service = Arc::new(Service::open(cfg)?);
    let rt = tokio::runtime::Runtime::new()?;
    let c = service.config();
    eprintln!(
        "listening on {}:{} ({} patients recovered)",
        c.bind,
        c.port,
        service.patient_ids().len()
    );
    rt.block_on(http::serve(service))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            patients,
            days,
            arms,
            compliance,
            report_compliance,
            gap,
            noise,
            seed,
            out,
        } => simulate(patients, days, arms, compliance, report_compliance, gap, noise, seed, &out),
        Command::Evaluate {
            patient_dir,
            alpha,
            resamples,
            seed,
            out,
            plot,
            state_model,
        } => {
            let config = EvaluationConfig {
                alpha,
                n_resamples: resamples,
                seed,
                ..EvaluationConfig::default()
            };
            evaluate(&patient_dir, config, &out, plot, state_model.as_deref())
        }
        Command::FitStates { patient_dir, seed, out } => fit_states(&patient_dir, seed, &out),
        Command::Serve { config, port, data_dir } => serve(config.as_deref(), port, data_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
