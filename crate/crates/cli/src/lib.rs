//! Command-line front end for the `orthotest` library.

pub mod config;
pub mod selftest;

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use orthotest::dist::Dataset;
use orthotest::gmm::{estimate_gmm, j_statistic};
use orthotest::iv::{dwh_statistic, estimate_2sls, estimate_ols, IVDataset};
use orthotest::mc::{compare_to_theory, run_experiment_with_records, write_records_csv};
use orthotest::path::{hellinger_residual, sample_local, LocalPath};
use orthotest::predict::{predict, Prediction};
use orthotest::score::decompose_score;
use orthotest::{Error, Instance};
use serde_json::{json, Value};

use config::{LoadedConfig, PathGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "orthotest",
    version,
    about = "Local-asymptotic bias and power of GMM, OLS/2SLS and their specification tests"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Source {
    /// Experiment configuration (JSON, schema 1).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: g1_null, g1_perp, g1_bias, iv1_tangent, iv1_power.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config field, e.g. --set score.t_perp_cap_m.0=1.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Predicted bias, test noncentralities and local power.
    Predict {
        #[command(flatten)]
        source: Source,
    },
    /// Monte Carlo experiment compared against the predictions.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-replication rows as CSV.
        #[arg(long)]
        raw_csv: Option<PathBuf>,
        /// Compare against this prediction document instead of recomputing it.
        #[arg(long)]
        prediction: Option<PathBuf>,
    },
    /// Split the configured score into its T, T⊥∩M and M⊥ parts.
    Decompose {
        #[command(flatten)]
        source: Source,
    },
    /// Hellinger residuals of the configured path on a geometric grid, as CSV.
    CheckPath {
        #[command(flatten)]
        source: Source,
    },
    /// Draw one sample of size n from the configured local deviation, as CSV.
    Sample {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the configured model on a CSV data file.
    Estimate {
        #[command(flatten)]
        source: Source,
        /// CSV with a header row; columns in support-point order.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<i32, Failure>;

/// Runs one command; `args` includes the program name.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Predict { source } => cmd_predict(&source),
        Command::Run {
            source,
            reps,
            seed,
            raw_csv,
            prediction,
        } => cmd_run(&source, reps, seed, raw_csv.as_deref(), prediction.as_deref()),
        Command::Decompose { source } => cmd_decompose(&source),
        Command::CheckPath { source } => cmd_check_path(&source),
        Command::Sample { source, seed } => cmd_sample(&source, seed),
        Command::Estimate { source, data } => cmd_estimate(&source, &data),
        Command::Selftest => Ok(if selftest::run(&mut io::stdout()) {
            EXIT_OK
        } else {
            EXIT_FAIL
        }),
    }
}

fn load(source: &Source, extra: &[String]) -> std::result::Result<LoadedConfig, Failure> {
    let doc = match (&source.config, &source.preset) {
        (Some(path), _) => config::read_document(path)?,
        (None, Some(name)) => config::preset(name)?,
        (None, None) => unreachable!("clap requires one of --config and --preset"),
    };
    let mut overrides = source.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(config::load(doc, &overrides)?)
}

fn output(out: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit_json(out: Option<&Path>, value: &Value) -> std::result::Result<(), Failure> {
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    })?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn prediction_for(cfg: &LoadedConfig) -> std::result::Result<Prediction, Failure> {
    let e = &cfg.experiment;
    Ok(predict(
        &e.instance,
        &e.score_function()?,
        &e.estimators,
        &e.tests,
        e.alpha,
    )?)
}

fn cmd_predict(source: &Source) -> CliResult {
    let cfg = load(source, &[])?;
    let pred = prediction_for(&cfg)?;
    emit_json(source.out.as_deref(), &to_value(&pred))?;
    Ok(EXIT_OK)
}

fn cmd_run(
    source: &Source,
    reps: Option<usize>,
    seed: Option<u64>,
    raw_csv: Option<&Path>,
    prediction: Option<&Path>,
) -> CliResult {
    let mut extra = Vec::new();
    if let Some(r) = reps {
        extra.push(format!("reps={r}"));
    }
    if let Some(s) = seed {
        extra.push(format!("seed={s}"));
    }
    let cfg = load(source, &extra)?;
    let pred = match prediction {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure {
                code: EXIT_USAGE,
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            serde_json::from_str::<Prediction>(&text).map_err(|e| Failure {
                code: EXIT_USAGE,
                message: format!("{} is not a prediction document: {e}", path.display()),
            })?
        }
        None => prediction_for(&cfg)?,
    };
    let e = &cfg.experiment;
    eprintln!(
        "running {} replications of n = {} (seed {})",
        e.reps, e.n, e.master_seed
    );
    let (summary, records) = run_experiment_with_records(e)?;
    if let Some(path) = raw_csv {
        write_records_csv(e, &records, io::BufWriter::new(File::create(path)?))?;
    }
    let comparison = compare_to_theory(&summary, &pred)?;
    for entry in comparison.entries.iter().filter(|c| !c.pass) {
        eprintln!(
            "mismatch: {} predicted {:.6} empirical {:.6} (z = {:.2})",
            entry.quantity, entry.predicted, entry.empirical, entry.z
        );
    }
    let doc = json!({
        "prediction": to_value(&pred),
        "summary": to_value(&summary),
        "comparison": to_value(&comparison),
    });
    emit_json(source.out.as_deref(), &doc)?;
    Ok(if comparison.all_pass { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_decompose(source: &Source) -> CliResult {
    let cfg = load(source, &[])?;
    let inst = &cfg.experiment.instance;
    let g = cfg.experiment.score_function()?;
    let bases = inst.tangent_bases()?;
    let rep = decompose_score(inst.dist(), &g, &bases)?;
    let doc = json!({
        "support": inst.dist().support(),
        "probs": inst.dist().probs(),
        "g": g.values(),
        "dims": {
            "T": bases.t.dim(),
            "T_perp_cap_M": bases.t_perp_cap_m.dim(),
            "M_perp": bases.m_perp.dim(),
        },
        "components": {
            "T": rep.pi_t.values(),
            "T_perp_cap_M": rep.pi_tperp_m.values(),
            "M_perp": rep.pi_mperp.values(),
        },
        "decomposition": {
            "var_T": rep.variances[0],
            "var_TperpM": rep.variances[1],
            "var_Mperp": rep.variances[2],
        },
    });
    emit_json(source.out.as_deref(), &doc)?;
    Ok(EXIT_OK)
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    }
}

fn cmd_check_path(source: &Source) -> CliResult {
    let cfg = load(source, &[])?;
    let e = &cfg.experiment;
    let path = LocalPath::new(e.instance.dist().clone(), e.score_function()?, e.tilt)?;
    let grid: PathGrid = cfg.path_grid;
    let mut w = csv::Writer::from_writer(output(source.out.as_deref())?);
    w.write_record(["t", "residual", "residual_over_t2"])
        .map_err(csv_failure)?;
    for t in grid.values()? {
        let r = hellinger_residual(&path, t)?;
        w.write_record([t.to_string(), r.to_string(), (r / (t * t)).to_string()])
            .map_err(csv_failure)?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn header_for(instance: &Instance) -> Vec<String> {
    match instance {
        Instance::LinearIv { model, .. } => model.layout.header(),
        Instance::Moments { dist, .. } => (0..dist.dim()).map(|j| format!("x{j}")).collect(),
    }
}

fn cmd_sample(source: &Source, seed: Option<u64>) -> CliResult {
    let cfg = load(source, &[])?;
    let e = &cfg.experiment;
    let path = LocalPath::new(e.instance.dist().clone(), e.score_function()?, e.tilt)?;
    let data = sample_local(&path, e.n, seed.unwrap_or(e.master_seed))?;
    let mut w = csv::Writer::from_writer(output(source.out.as_deref())?);
    w.write_record(header_for(&e.instance)).map_err(csv_failure)?;
    for row in data.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_failure)?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn read_rows(path: &Path, width: usize) -> std::result::Result<Dataset, Failure> {
    let usage = |message: String| Failure {
        code: EXIT_USAGE,
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| usage(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if row.len() != width {
            return Err(usage(format!(
                "{} row {}: expected {width} columns, got {}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(Dataset::from_rows(&rows)?)
}

fn cmd_estimate(source: &Source, data: &Path) -> CliResult {
    let cfg = load(source, &[])?;
    let e = &cfg.experiment;
    let inst = &e.instance;
    let rows = read_rows(data, inst.dist().dim())?;
    let doc = match inst {
        Instance::Moments { model, theta0, .. } => {
            let est = estimate_gmm(&rows, model.as_ref(), theta0)?;
            let j = if model.n_moments() > model.n_params() {
                let j = j_statistic(&rows, model.as_ref(), &est)?;
                json!({"value": j.value, "dof": j.dof, "reject": j.reject(e.alpha)?})
            } else {
                Value::Null
            };
            json!({"n": rows.n(), "gmm": to_value(&est), "j": j})
        }
        Instance::LinearIv { model, .. } => {
            let d = IVDataset::from_dataset(&rows, model.layout)?;
            let ols = estimate_ols(&d)?;
            let tsls = estimate_2sls(&d)?;
            let dwh = dwh_statistic(&d, &ols, &tsls)?;
            json!({
                "n": d.n(),
                "ols": to_value(&ols),
                "tsls": to_value(&tsls),
                "dwh": {"value": dwh.value, "dof": dwh.dof, "reject": dwh.reject(e.alpha)?,
                        "negative_spectrum_warning": dwh.negative_spectrum_warning},
            })
        }
    };
    emit_json(source.out.as_deref(), &doc)?;
    Ok(EXIT_OK)
}
