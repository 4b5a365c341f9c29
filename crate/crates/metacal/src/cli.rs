//! Command-line surface: synth, fit, apply, evaluate and verify-bounds over
//! the CSV/JSON formats in [`crate::fileio`].
//!
//! Exit codes: 0 on success, 2 on usage/validation problems, 3 on method
//! errors (a constraint that cannot be certified, an unreachable accuracy
//! target, and the like). Errors go to standard error as one JSON object
//! `{code, message, context}`; standard output carries only the result
//! document.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::binning::{binned_ece, sup_binned_ece, BinReport, BinningScheme};
use crate::bounds::{
    ece_lower_bound_acc_preserving, gate_metrics, metacal_lower_bound, miscoverage_tail,
    monte_carlo_verify, GateMetrics, VerifyConfig, VerifyReport,
};
use crate::calibrators::{BaseCalibrator, CalibError};
use crate::fileio::{
    atomic_write, read_dataset_csv, read_json, read_model, write_dataset_csv, write_json,
    write_model, write_outputs_csv, IoError, SCHEMA_VERSION,
};
use crate::gate::{order_statistic_rank, GateError};
use crate::model::{
    calibrated_dataset, default_transform_bins, fit_coverage, fit_miscoverage, gate_split_size,
    MetaCalError, Mode,
};
use crate::prob::TieBreakPolicy;
use crate::ranking::Ranker;
use crate::synthgen::{generate, GeneratorSpec};

#[derive(Parser)]
#[command(
    name = "metacal",
    version,
    about = "Constrained post-hoc multi-class calibration over CSV/JSON files"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Miscoverage,
    Coverage,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Seeded,
    Lowest,
    Expected,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic miscalibrated-classifier dataset with a
    /// ground-truth sidecar.
    Synth {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        /// Distortion temperature; below 1 emits overconfident outputs.
        #[arg(long, default_value_t = 0.5)]
        tdist: f64,
        #[arg(long, default_value_t = 3.0)]
        logit_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sidecar path; defaults to `<out>.truth.json`.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Fit a constrained calibration model on a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Miscoverage tolerance (miscoverage mode only).
        #[arg(long)]
        alpha: Option<f64>,
        /// Target coverage accuracy (coverage mode only).
        #[arg(long)]
        beta: Option<f64>,
        /// Uniform-mass bins for the coverage transform.
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Treat the label column as 1-based.
        #[arg(long)]
        labels_one_based: bool,
    },
    /// Apply a fitted model to a dataset, writing calibrated outputs.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels_one_based: bool,
    },
    /// Evaluate a fitted model: calibration errors, gate metrics and the
    /// analytic bounds, before and after calibration.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 15)]
        bins: usize,
        #[arg(long, value_enum, default_value = "seeded")]
        policy: PolicyArg,
        /// Seed for the seeded tie policy; defaults to the model seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        labels_one_based: bool,
    },
    /// Run the Monte Carlo harness that checks the analytic guarantees on
    /// synthetic data.
    VerifyBounds {
        /// JSON harness spec (generator shape, sizes, alpha or beta).
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's run count (default 40).
        #[arg(long)]
        runs: Option<usize>,
        /// Overrides the spec's master seed (default 0).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Plot-ready per-run CSV.
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
}

struct CliError {
    exit: i32,
    code: String,
    message: String,
    context: Value,
}

impl CliError {
    fn new(exit: i32, code: &str, message: impl Into<String>) -> Self {
        Self {
            exit,
            code: code.into(),
            message: message.into(),
            context: json!({}),
        }
    }

    fn with_context(mut self, context: Value) -> Self {
        self.context = context;
        self
    }
}

impl From<IoError> for CliError {
    fn from(err: IoError) -> Self {
        let (code, context) = match &err {
            IoError::Csv { line, .. } => ("PARSE_ERROR", json!({ "line": line })),
            IoError::Json { line, column, .. } => {
                ("PARSE_ERROR", json!({ "line": line, "column": column }))
            }
            IoError::SchemaVersion { found, expected } => (
                "SCHEMA_VERSION",
                json!({ "found": found, "expected": expected }),
            ),
            IoError::BadHeader(_) => ("PARSE_ERROR", json!({})),
            IoError::InvalidModel(_) => ("MODEL_INVALID", json!({})),
            IoError::Io { path, .. } => ("IO_ERROR", json!({ "path": path })),
        };
        CliError::new(2, code, err.to_string()).with_context(context)
    }
}

impl From<MetaCalError> for CliError {
    fn from(err: MetaCalError) -> Self {
        let (exit, code) = match &err {
            MetaCalError::ClassCountMismatch { .. } => (2, "CLASS_COUNT_MISMATCH"),
            MetaCalError::Gate(GateError::InvalidTolerance { .. }) => (2, "INVALID_TOLERANCE"),
            MetaCalError::Gate(GateError::ToleranceTooSmall { .. }) => (3, "TOLERANCE_TOO_SMALL"),
            MetaCalError::Gate(GateError::TooFewValues { .. }) => (3, "TOO_FEW_VALUES"),
            MetaCalError::Gate(GateError::UnreachableAccuracy { .. }) => {
                (3, "UNREACHABLE_ACCURACY")
            }
            MetaCalError::Gate(GateError::EmptyNegatives)
            | MetaCalError::NoCorrectPredictions => (3, "NO_CORRECT_PREDICTIONS"),
            MetaCalError::EmptyAcceptedTrainingSet => (3, "EMPTY_ACCEPTED_TRAINING_SET"),
            MetaCalError::BaseNotAccuracyPreserving => (2, "MODEL_INVALID"),
            MetaCalError::Calibration(CalibError::NonPositiveProbability) => {
                (3, "NON_POSITIVE_PROBABILITY")
            }
            MetaCalError::Calibration(CalibError::ClassCountMismatch { .. }) => {
                (2, "CLASS_COUNT_MISMATCH")
            }
        };
        CliError::new(exit, code, err.to_string())
    }
}

/// Run the CLI against the process arguments; returns the exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Run the CLI against explicit arguments (used by the integration tests).
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                return 0;
            }
            emit_error(&CliError::new(2, "USAGE", err.to_string()));
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(doc) => {
            println!("{}", serde_json::to_string_pretty(&doc).expect("result doc"));
            0
        }
        Err(err) => {
            emit_error(&err);
            err.exit
        }
    }
}

fn emit_error(err: &CliError) {
    let doc = json!({
        "code": err.code,
        "message": err.message,
        "context": err.context,
    });
    eprintln!("{doc}");
}

fn execute(cmd: Cmd) -> Result<Value, CliError> {
    match cmd {
        Cmd::Synth {
            k,
            n,
            tdist,
            logit_scale,
            seed,
            out,
            truth_out,
        } => cmd_synth(k, n, tdist, logit_scale, seed, &out, truth_out),
        Cmd::Fit {
            data,
            mode,
            alpha,
            beta,
            bins,
            seed,
            out,
            labels_one_based,
        } => cmd_fit(&data, mode, alpha, beta, bins, seed, &out, labels_one_based),
        Cmd::Apply {
            model,
            data,
            out,
            labels_one_based,
        } => cmd_apply(&model, &data, &out, labels_one_based),
        Cmd::Evaluate {
            model,
            data,
            bins,
            policy,
            seed,
            out,
            labels_one_based,
        } => cmd_evaluate(&model, &data, bins, policy, seed, out, labels_one_based),
        Cmd::VerifyBounds {
            spec,
            runs,
            seed,
            out,
            csv_out,
        } => cmd_verify_bounds(&spec, runs, seed, &out, csv_out),
    }
}

fn cmd_synth(
    k: usize,
    n: usize,
    tdist: f64,
    logit_scale: f64,
    seed: u64,
    out: &Path,
    truth_out: Option<PathBuf>,
) -> Result<Value, CliError> {
    let spec = GeneratorSpec {
        k,
        n,
        logit_scale,
        distortion_temperature: tdist,
        seed,
    };
    spec.validate()
        .map_err(|m| CliError::new(2, "INVALID_FLAG", m))?;
    let (data, truth) = generate(&spec);
    write_dataset_csv(out, &data)?;
    let truth_path = truth_out.unwrap_or_else(|| sidecar_path(out));
    #[derive(Serialize)]
    struct TruthDoc<'a> {
        schema_version: u32,
        generator: &'a GeneratorSpec,
        population_accuracy: f64,
        profile: &'a [crate::synthgen::ProfilePoint],
        p_star: &'a [Vec<f64>],
    }
    write_json(
        &truth_path,
        &TruthDoc {
            schema_version: SCHEMA_VERSION,
            generator: &spec,
            population_accuracy: truth.population_accuracy,
            profile: &truth.profile,
            p_star: &truth.p_star,
        },
    )?;
    Ok(json!({
        "data": out.display().to_string(),
        "truth": truth_path.display().to_string(),
        "n": n,
        "k": k,
        "population_accuracy": truth.population_accuracy,
    }))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    name.push_str(".truth.json");
    out.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    data_path: &Path,
    mode: ModeArg,
    alpha: Option<f64>,
    beta: Option<f64>,
    bins: Option<usize>,
    seed: u64,
    out: &Path,
    one_based: bool,
) -> Result<Value, CliError> {
    let target = match (mode, alpha, beta) {
        (ModeArg::Miscoverage, Some(a), None) => a,
        (ModeArg::Coverage, None, Some(b)) => b,
        _ => {
            return Err(CliError::new(
                2,
                "FLAG_MISMATCH",
                "miscoverage mode takes exactly --alpha, coverage mode exactly --beta",
            ))
        }
    };
    if !(target > 0.0 && target < 1.0) {
        return Err(CliError::new(
            2,
            "INVALID_FLAG",
            format!("the constraint target must lie strictly between 0 and 1 (got {target})"),
        ));
    }
    let data = read_dataset_csv(data_path, one_based)?;
    let part_a = gate_split_size(data.len());
    let model = match mode {
        ModeArg::Miscoverage => fit_miscoverage(&data, target, Ranker::Entropy, seed)?,
        ModeArg::Coverage => {
            let b = bins.unwrap_or_else(|| default_transform_bins(part_a));
            fit_coverage(&data, target, Ranker::Entropy, b, seed)?
        }
    };
    write_model(out, &model)?;

    let policy = TieBreakPolicy::SeededUniform { seed };
    let train_metrics = gate_metrics(model.gate(), &data, &policy);
    let base_temperature = match model.base() {
        BaseCalibrator::Temperature(t) => Some(t.temperature()),
        BaseCalibrator::Identity => None,
    };
    let v = model
        .n1()
        .and_then(|n1| order_statistic_rank(n1, target).ok());
    Ok(json!({
        "model": out.display().to_string(),
        "mode": match mode { ModeArg::Miscoverage => "miscoverage", ModeArg::Coverage => "coverage" },
        "target": target,
        "threshold": model.gate().threshold,
        "part_a_size": part_a,
        "part_b_size": data.len() - part_a,
        "n1": model.n1(),
        "v": v,
        "transform_bins": model.transform().map(|t| t.bins),
        "base_temperature": base_temperature,
        "train_metrics": serde_json::to_value(&train_metrics).expect("metrics"),
    }))
}

fn cmd_apply(
    model_path: &Path,
    data_path: &Path,
    out: &Path,
    one_based: bool,
) -> Result<Value, CliError> {
    let model = read_model(model_path)?;
    let data = read_dataset_csv(data_path, one_based)?;
    let outputs = model.apply_dataset(&data)?;
    write_outputs_csv(out, &data, &outputs)?;
    let accepted = outputs.iter().filter(|o| o.accepted).count();
    Ok(json!({
        "out": out.display().to_string(),
        "rows": outputs.len(),
        "accepted_count": accepted,
        "rejected_count": outputs.len() - accepted,
    }))
}

#[derive(Serialize)]
struct EvaluateBounds {
    ece_lower_bound_acc_preserving: f64,
    metacal_w: Option<f64>,
    metacal_lower_bound: Option<f64>,
    miscoverage_tail: Option<f64>,
}

#[derive(Serialize)]
struct EvaluateReport {
    schema_version: u32,
    n: usize,
    k: usize,
    bins: usize,
    policy: String,
    mode: String,
    target: f64,
    ece_before: f64,
    ece_after: f64,
    sup_ece_before: f64,
    sup_ece_after: f64,
    gate_metrics: GateMetrics,
    bounds: EvaluateBounds,
    before: BinReport,
    after: BinReport,
}

fn cmd_evaluate(
    model_path: &Path,
    data_path: &Path,
    bins: usize,
    policy_arg: PolicyArg,
    seed: Option<u64>,
    out: Option<PathBuf>,
    one_based: bool,
) -> Result<Value, CliError> {
    if bins == 0 {
        return Err(CliError::new(2, "INVALID_FLAG", "--bins must be positive"));
    }
    let model = read_model(model_path)?;
    let data = read_dataset_csv(data_path, one_based)?;
    if data.k() != model.k() {
        return Err(CliError::new(
            2,
            "CLASS_COUNT_MISMATCH",
            format!("model expects {} classes, data has {}", model.k(), data.k()),
        ));
    }
    let policy = match policy_arg {
        PolicyArg::Seeded => TieBreakPolicy::SeededUniform {
            seed: seed.unwrap_or_else(|| model.seed()),
        },
        PolicyArg::Lowest => TieBreakPolicy::LowestIndex,
        PolicyArg::Expected => TieBreakPolicy::ExpectedValue,
    };
    let scheme = BinningScheme::equal_width(bins).expect("bins >= 1");
    let outputs = model.apply_dataset(&data)?;
    let calibrated = calibrated_dataset(&data, &outputs);

    let before = binned_ece(&data, &scheme, &policy);
    let after = binned_ece(&calibrated, &scheme, &policy);
    let metrics = gate_metrics(model.gate(), &data, &policy);

    let (mode_name, target) = match model.mode() {
        Mode::Miscoverage { alpha } => ("miscoverage", alpha),
        Mode::Coverage { beta } => ("coverage", beta),
    };
    let meta_bound = match (metrics.type1, metrics.type2) {
        (Some(r0), Some(r1)) => Some(metacal_lower_bound(metrics.accuracy, r0, r1, data.k())),
        _ => None,
    };
    let tail = match model.mode() {
        Mode::Miscoverage { alpha } => model
            .n1()
            .and_then(|n1| miscoverage_tail(n1, alpha).ok()),
        Mode::Coverage { .. } => None,
    };
    let report = EvaluateReport {
        schema_version: SCHEMA_VERSION,
        n: data.len(),
        k: data.k(),
        bins,
        policy: match policy_arg {
            PolicyArg::Seeded => "seeded".into(),
            PolicyArg::Lowest => "lowest".into(),
            PolicyArg::Expected => "expected".into(),
        },
        mode: mode_name.into(),
        target,
        ece_before: before.ece,
        ece_after: after.ece,
        sup_ece_before: sup_binned_ece(&data, &policy),
        sup_ece_after: sup_binned_ece(&calibrated, &policy),
        bounds: EvaluateBounds {
            ece_lower_bound_acc_preserving: ece_lower_bound_acc_preserving(
                metrics.accuracy,
                data.k(),
            ),
            metacal_w: meta_bound.map(|b| b.w),
            metacal_lower_bound: meta_bound.map(|b| b.bound),
            miscoverage_tail: tail,
        },
        gate_metrics: metrics,
        before,
        after,
    };
    let doc = serde_json::to_value(&report).expect("report");
    if let Some(path) = out {
        write_json(&path, &report)?;
    }
    Ok(doc)
}

fn cmd_verify_bounds(
    spec_path: &Path,
    runs: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    csv_out: Option<PathBuf>,
) -> Result<Value, CliError> {
    let mut spec: Value = read_json(spec_path)?;
    let obj = spec
        .as_object_mut()
        .ok_or_else(|| CliError::new(2, "INVALID_SPEC", "harness spec must be a JSON object"))?;
    if let Some(r) = runs {
        obj.insert("runs".into(), json!(r));
    } else {
        obj.entry("runs").or_insert(json!(40));
    }
    if let Some(s) = seed {
        obj.insert("seed".into(), json!(s));
    } else {
        obj.entry("seed").or_insert(json!(0));
    }
    let config: VerifyConfig = serde_json::from_value(spec).map_err(|e| {
        CliError::new(2, "INVALID_SPEC", e.to_string())
            .with_context(json!({ "line": e.line(), "column": e.column() }))
    })?;
    let report = monte_carlo_verify(&config)
        .map_err(|e| CliError::new(2, "INVALID_SPEC", e.to_string()))?;
    if report.completed == 0 {
        // Still record what happened before exiting with the method error.
        write_json(out, &report)?;
        return Err(CliError::new(
            3,
            "ALL_RUNS_FAILED",
            "every harness run failed",
        )
        .with_context(json!({ "report": out.display().to_string() })));
    }
    write_json(out, &report)?;
    if let Some(path) = csv_out {
        write_verify_csv(&path, &report)?;
    }
    Ok(serde_json::to_value(&report).expect("report"))
}

fn write_verify_csv(path: &Path, report: &VerifyReport) -> Result<(), IoError> {
    let mut text = String::from("run,seed,threshold,n1,m1,holdout,population,tail\n");
    for r in &report.per_run {
        text.push_str(&format!(
            "{},{},{:.16e},{},{},{:.16e},{:.16e},{}\n",
            r.run,
            r.seed,
            r.threshold,
            r.n1.map_or(String::new(), |v| v.to_string()),
            r.m1,
            r.holdout,
            r.population,
            r.tail.map_or(String::new(), |t| format!("{t:.16e}")),
        ));
    }
    atomic_write(path, text.as_bytes())
}
