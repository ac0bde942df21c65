use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use p31_core::pipeline::analyze::{prepare_subject, reselect_recovery_start};
use p31_core::pipeline::cohort::subject_markers;
use p31_core::pipeline::schema::check_unique_ids;
use p31_core::pipeline::{
    analyze_cohort, bland_altman, cohort_report, load_cohort_dir, load_subject, report_csv, report_json, save_subject,
    AnalysisConfig, SubjectRecord,
};
use p31_core::qc::Decision;
use p31_core::relax::T1Mode;
use p31_core::stats::power_curve;
use p31_core::synth::{draw_cohort, synth_subject, AcquisitionProtocol, CohortSpec, DataForm, Moments};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    /// Bad input: unreadable or invalid files, configuration or arguments.
    #[error("{0}")]
    Validation(String),
    /// The run completed but some subjects could not be analyzed.
    #[error("{0}")]
    Analysis(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Analysis(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "p31", version, about = "Dynamic 31P-MRS muscle energetics analysis")]
struct Cli {
    /// JSON analysis configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// T1 correction mode: individual, fixed or cohort_mean.
    #[arg(long, global = true, value_parser = parse_mode)]
    t1_mode: Option<T1Mode>,
    /// Apply QC exclusions and reselections in reports (default).
    #[arg(long, global = true, overrides_with = "no_qcs")]
    with_qcs: bool,
    /// Report every subject without QC exclusions.
    #[arg(long, global = true, overrides_with = "with_qcs")]
    no_qcs: bool,
    /// Random seed for simulation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> std::result::Result<T1Mode, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated patient/control cohort as subject files.
    Simulate(SimulateArgs),
    /// Quantify the FIDs of one subject and print amplitudes as JSON.
    Quantify {
        subject: PathBuf,
    },
    /// Analyze subject files and write the analyzed records.
    Analyze {
        /// Subject files or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print QC scores and decisions; optionally approve a recovery start.
    Qc(QcArgs),
    /// Compare patient and control groups across T1 modes.
    CohortCompare(CompareArgs),
    /// Print a Welch power curve as CSV.
    Power(PowerArgs),
    /// Agreement of one marker between individual and fixed T1 correction.
    BlandAltman {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "pcr_rest")]
        marker: String,
        /// Restrict to one group.
        #[arg(long)]
        group: Option<String>,
    },
    /// Serve the review API for an analyzed cohort.
    Serve {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "patient")]
        patient_group: String,
        #[arg(long, default_value = "control")]
        control_group: String,
        /// Bind address; defaults to the P31_REVIEW_ADDR environment variable.
        #[arg(long, env = p31_review::BIND_ENV, default_value = p31_review::DEFAULT_BIND)]
        bind: SocketAddr,
        /// File the cohort state is written to after each change.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// CohortSpec JSON for the patient group; overrides the flags below.
    #[arg(long)]
    patient_spec: Option<PathBuf>,
    /// CohortSpec JSON for the control group; overrides the flags below.
    #[arg(long)]
    control_spec: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    patients: usize,
    #[arg(long, default_value_t = 32)]
    controls: usize,
    /// Patient recovery PCr tau as MEAN,SD (s).
    #[arg(long, default_value = "40.73,9.29", value_parser = parse_moments)]
    patient_tau: Moments,
    /// Control recovery PCr tau as MEAN,SD (s).
    #[arg(long, default_value = "33.11,8.24", value_parser = parse_moments)]
    control_tau: Moments,
    /// Amplitude noise as a fraction of resting PCr.
    #[arg(long, default_value_t = 0.0025)]
    noise_cv: f64,
    /// Fraction of subjects with corrupted exercise frames.
    #[arg(long, default_value_t = 0.0)]
    exercise_corruption: f64,
    /// Fraction of subjects with a corrupted first recovery frame.
    #[arg(long, default_value_t = 0.0)]
    first_point: f64,
    /// Write raw FIDs instead of amplitude series.
    #[arg(long)]
    fids: bool,
    /// Match the requested group moments exactly.
    #[arg(long)]
    exact_moments: bool,
}

fn parse_moments(s: &str) -> std::result::Result<Moments, String> {
    let (m, sd) = s.split_once(',').ok_or("expected MEAN,SD")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v}: {e}"));
    Ok(Moments::new(parse(m)?, parse(sd)?))
}

#[derive(Args)]
struct QcArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Approve a recovery start index as SUBJECT_ID=INDEX and rewrite the file.
    #[arg(long)]
    approve: Option<String>,
    #[arg(long)]
    operator: Option<String>,
    /// Allow reselection on a subject that was not flagged.
    #[arg(long = "override")]
    override_flag: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "patient")]
    patient_group: String,
    #[arg(long, default_value = "control")]
    control_group: String,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the full report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PowerArgs {
    #[arg(long)]
    control_mean: f64,
    #[arg(long)]
    control_sd: f64,
    /// Fixed control group size.
    #[arg(long)]
    control_n: usize,
    #[arg(long)]
    patient_mean: f64,
    #[arg(long)]
    patient_sd: f64,
    #[arg(long, default_value_t = 5)]
    n_min: usize,
    #[arg(long, default_value_t = 100)]
    n_max: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    target: f64,
}

fn load_config(cli: &Cli) -> Result<AnalysisConfig> {
    let mut config = match &cli.config {
        Some(path) => AnalysisConfig::load(path).map_err(invalid)?,
        None => AnalysisConfig::default(),
    };
    if let Some(mode) = cli.t1_mode {
        config.t1_mode = mode;
    }
    Ok(config)
}

fn load_inputs(inputs: &[PathBuf]) -> Result<Vec<SubjectRecord>> {
    let mut records = Vec::new();
    for p in inputs {
        if p.is_dir() {
            records.extend(load_cohort_dir(p).map_err(invalid)?);
        } else {
            records.push(load_subject(p).map_err(invalid)?);
        }
    }
    check_unique_ids(&records).map_err(invalid)?;
    Ok(records)
}

fn write_records(records: &[SubjectRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    for r in records {
        save_subject(r, &dir.join(format!("{}.json", r.id))).map_err(invalid)?;
    }
    Ok(())
}

/// Analyzes records that carry no analysis yet. Fails with an analysis error
/// only after everything else has been done.
fn ensure_analyzed(records: &mut [SubjectRecord], config: &AnalysisConfig) -> Result<usize> {
    if records.iter().all(|r| r.analysis.is_some()) {
        return Ok(0);
    }
    analyze_cohort(records, config).map_err(invalid)
}

fn analysis_failures(records: &[SubjectRecord]) -> Result<()> {
    let failed: Vec<String> = records
        .iter()
        .filter_map(|r| r.analysis_error.as_ref().map(|e| format!("{}: {e}", r.id)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Analysis(format!(
            "{} subject(s) failed analysis:\n  {}",
            failed.len(),
            failed.join("\n  ")
        )))
    }
}

fn load_spec(path: &Option<PathBuf>, fallback: CohortSpec) -> Result<CohortSpec> {
    let Some(path) = path else { return Ok(fallback) };
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn simulate(args: &SimulateArgs, seed: u64) -> Result<()> {
    let protocol = AcquisitionProtocol::default();
    let base = CohortSpec {
        noise_rest_cv: args.noise_cv,
        exact_moments: args.exact_moments,
        exercise_corruption_fraction: args.exercise_corruption,
        first_point_fraction: args.first_point,
        exercise_spike_multiple: 200.0,
        first_point_multiple: -120.0,
        ..Default::default()
    };
    let patients = load_spec(
        &args.patient_spec,
        CohortSpec {
            group: "patient".into(),
            size: args.patients,
            tau_pcr_rec: args.patient_tau,
            ..base.clone()
        },
    )?;
    let controls = load_spec(
        &args.control_spec,
        CohortSpec {
            group: "control".into(),
            size: args.controls,
            tau_pcr_rec: args.control_tau,
            ..base
        },
    )?;
    let form = if args.fids { DataForm::Fids } else { DataForm::Amplitudes };
    let mut records = Vec::new();
    for (k, spec) in [patients, controls].iter().enumerate() {
        let group_seed = seed.wrapping_mul(2).wrapping_add(k as u64);
        let truths = draw_cohort(spec, &protocol, group_seed).map_err(invalid)?;
        for (i, t) in truths.iter().enumerate() {
            let id = format!("{}-{i:03}", spec.group);
            let subject_seed = group_seed.wrapping_mul(10_000).wrapping_add(i as u64);
            records.push(synth_subject(&id, &spec.group, t, &protocol, subject_seed, form).map_err(invalid)?);
        }
    }
    write_records(&records, &args.out)?;
    eprintln!("wrote {} subjects to {}", records.len(), args.out.display());
    Ok(())
}

fn quantify(path: &Path, config: &AnalysisConfig) -> Result<()> {
    let record = load_subject(path).map_err(invalid)?;
    let prepared = prepare_subject(&record, config).map_err(|e| CliError::Analysis(e.to_string()))?;
    let out = serde_json::json!({
        "id": record.id,
        "data": prepared.data,
        "quant": prepared.quant,
        "t1_individual": prepared.t1_individual,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json output"));
    Ok(())
}

fn qc(args: &QcArgs, config: &AnalysisConfig) -> Result<()> {
    let mut records = load_inputs(&args.inputs)?;
    ensure_analyzed(&mut records, config)?;
    if let Some(spec) = &args.approve {
        let (id, index) = spec
            .split_once('=')
            .ok_or_else(|| invalid("--approve expects SUBJECT_ID=INDEX"))?;
        let index: usize = index.parse().map_err(|e| invalid(format!("--approve index: {e}")))?;
        let record = records
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| invalid(format!("unknown subject {id}")))?;
        let analysis = record
            .analysis
            .as_ref()
            .ok_or_else(|| CliError::Analysis(format!("subject {id} has no analysis")))?;
        let updated = reselect_recovery_start(
            analysis,
            &record.protocol,
            config,
            index,
            args.operator.as_deref(),
            args.override_flag,
        )
        .map_err(invalid)?;
        record.analysis = Some(updated);
        // Rewrite the approved subject next to its source when it came from
        // a single file, otherwise inside the input directory.
        let target = args
            .inputs
            .iter()
            .find_map(|p| {
                if p.is_dir() {
                    let f = p.join(format!("{id}.json"));
                    f.exists().then_some(f)
                } else {
                    load_subject(p).ok().filter(|r| r.id == id).map(|_| p.clone())
                }
            })
            .ok_or_else(|| invalid(format!("cannot locate the file of subject {id}")))?;
        save_subject(record, &target).map_err(invalid)?;
    }

    println!("id,group,exercise_score,recovery_score,exercise,subject,first_point_flag,suggested_index,reselected_index");
    for r in &records {
        match &r.analysis {
            Some(a) => {
                let q = &a.qc;
                let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
                println!(
                    "{},{},{},{},{},{},{},{},{}",
                    r.id,
                    r.group,
                    q.score_total_exercise,
                    q.score_total_recovery,
                    decision(q.exercise_decision),
                    decision(q.subject_decision),
                    q.first_point_flag,
                    opt(q.suggested_start_index),
                    opt(q.reselected_start_index)
                );
            }
            None => println!("{},{},,,,,,,", r.id, r.group),
        }
    }
    analysis_failures(&records)
}

fn decision(d: Decision) -> &'static str {
    match d {
        Decision::Accepted => "accepted",
        Decision::Excluded => "excluded",
    }
}

fn cohort_compare(args: &CompareArgs, config: &AnalysisConfig, with_qcs: bool, mode: T1Mode) -> Result<()> {
    let mut records = load_inputs(&args.inputs)?;
    ensure_analyzed(&mut records, config)?;
    let report = cohort_report(&records, &args.patient_group, &args.control_group, config.alpha);
    if let Some(path) = &args.json {
        std::fs::write(path, report_json(&report)).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    }
    let csv = report_csv(&report).map_err(invalid)?;
    if let Some(path) = &args.csv {
        std::fs::write(path, &csv).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    }
    let qcs_label = if with_qcs { "with_qcs" } else { "without_qcs" };
    let mut lines = csv.lines();
    if let Some(header) = lines.next() {
        println!("{header}");
    }
    let prefix = format!("{},{qcs_label},", mode.label());
    for line in lines.filter(|l| l.starts_with(&prefix)) {
        println!("{line}");
    }
    analysis_failures(&records)
}

fn power(args: &PowerArgs) -> Result<()> {
    if args.n_min > args.n_max {
        return Err(invalid("--n-min must not exceed --n-max"));
    }
    let grid: Vec<usize> = (args.n_min..=args.n_max).collect();
    let curve = power_curve(
        args.control_mean,
        args.control_sd,
        args.control_n,
        args.patient_mean,
        args.patient_sd,
        &grid,
        args.alpha,
        args.target,
    )
    .map_err(invalid)?;
    println!("n_control,n_patient,power");
    for (n, p) in curve.n_patient.iter().zip(&curve.power) {
        println!("{},{n},{p:.6}", curve.n_control);
    }
    let show = |v: Option<usize>| v.map_or("not reached".to_string(), |n| n.to_string());
    eprintln!(
        "difference {:.3}; patients needed with {} controls: {}; equal groups: {} per group",
        curve.detectable_difference,
        curve.n_control,
        show(curve.required_n_patient),
        show(curve.required_n_per_group)
    );
    Ok(())
}

fn bland_altman_cmd(inputs: &[PathBuf], marker: &str, group: Option<&str>, config: &AnalysisConfig, with_qcs: bool) -> Result<()> {
    if p31_core::pipeline::markers::marker_spec(marker).is_none() {
        return Err(invalid(format!("unknown marker {marker}")));
    }
    let mut records = load_inputs(inputs)?;
    ensure_analyzed(&mut records, config)?;
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| group.is_none_or(|g| r.group == g))
        .filter_map(|r| {
            let ind = subject_markers(r, T1Mode::Individual, with_qcs)?.get(marker).copied()?;
            let fix = subject_markers(r, T1Mode::Fixed, with_qcs)?.get(marker).copied()?;
            Some((ind, fix))
        })
        .collect();
    let ba = bland_altman(&pairs).map_err(|e| CliError::Analysis(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&ba).expect("json output"));
    analysis_failures(&records)
}

fn serve(
    inputs: &[PathBuf],
    config: AnalysisConfig,
    patient_group: &str,
    control_group: &str,
    bind: SocketAddr,
    snapshot: Option<PathBuf>,
) -> Result<()> {
    let mut records = load_inputs(inputs)?;
    ensure_analyzed(&mut records, &config)?;
    let store = p31_review::Store::new(records, config, patient_group, control_group, snapshot).map_err(invalid)?;
    let runtime = tokio::runtime::Runtime::new().map_err(invalid)?;
    eprintln!("review service listening on http://{bind}");
    runtime.block_on(p31_review::serve(store, bind)).map_err(invalid)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let with_qcs = !cli.no_qcs;
    match &cli.command {
        Command::Simulate(args) => simulate(args, cli.seed),
        Command::Quantify { subject } => quantify(subject, &config),
        Command::Analyze { inputs, out } => {
            let mut records = load_inputs(inputs)?;
            analyze_cohort(&mut records, &config).map_err(invalid)?;
            write_records(&records, out)?;
            let flagged = records
                .iter()
                .filter(|r| r.analysis.as_ref().is_some_and(|a| a.qc.first_point_flag))
                .count();
            eprintln!(
                "analyzed {} subjects ({} flagged for review) into {}",
                records.len(),
                flagged,
                out.display()
            );
            analysis_failures(&records)
        }
        Command::Qc(args) => qc(args, &config),
        Command::CohortCompare(args) => cohort_compare(args, &config, with_qcs, config.t1_mode),
        Command::Power(args) => power(args),
        Command::BlandAltman { inputs, marker, group } => {
            bland_altman_cmd(inputs, marker, group.as_deref(), &config, with_qcs)
        }
        Command::Serve {
            inputs,
            patient_group,
            control_group,
            bind,
            snapshot,
        } => serve(inputs, config.clone(), patient_group, control_group, *bind, snapshot.clone()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
