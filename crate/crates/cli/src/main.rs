//! `nica`: generate synthetic scenarios, run KL or MAP inference on them and
//! score the results against ground truth. Everything is written as CSV plus
//! JSON metadata; see the README for the file formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nica::inference::PlateauStop;
use nica::io::{self, FieldTable, TRUTH_COMPONENTS_FILE};
use nica::{
    evaluate, generate_scenario, run_inference, run_map, Evaluation, InferenceConfig, InferenceMode, MixtureMatrix,
    MultiField, ScenarioSpec, Schedule,
};
use serde::{Deserialize, Serialize};

const RUN_FILE: &str = "run.json";
const REPORT_FILE: &str = "report.json";
const MEAN_FILE: &str = "mean.csv";
const STD_FILE: &str = "std.csv";
const MIXTURE_FILE: &str = "mixture.csv";
const TRACE_FILE: &str = "trace.csv";
const ALIGNED_FILE: &str = "aligned.csv";
const ALIGNED_MIXTURE_FILE: &str = "aligned_mixture.csv";

#[derive(Parser)]
#[command(
    name = "nica",
    version,
    about = "Bayesian component separation of multi-channel data"
)]
struct Cli {
    /// Parent directory for outputs when `--out` is not given.
    #[arg(long, global = true, env = "NICA_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario bundle.
    Generate(GenerateArgs),
    /// Sample-based inference of components and mixture.
    InferKl(InferArgs),
    /// Joint MAP baseline.
    InferMap(InferArgs),
    /// Score a results directory against the scenario's ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in scenario: scenario1 or scenario2.
    #[arg(long, required_unless_present = "spec", conflicts_with = "spec")]
    preset: Option<String>,
    /// JSON scenario specification instead of a preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed of a spec file; defaults to 42 for presets.
    #[arg(long)]
    seed: Option<u64>,
    /// Bundle directory; defaults to `<output-root>/<preset>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Scenario bundle directory.
    #[arg(long)]
    scenario: PathBuf,
    /// Results directory; defaults to `<output-root>/<kl|map>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for the initial mixture and all sample streams.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    samples_initial: usize,
    #[arg(long, default_value_t = 25)]
    samples_final: usize,
    /// Fraction of iterations run with `samples-initial` before the ramp.
    #[arg(long, default_value_t = 0.6)]
    ramp_start: f64,
    /// Relative CG tolerance before the final phase.
    #[arg(long, default_value_t = 1e-4)]
    early_tol: f64,
    /// Relative CG tolerance in the final phase and for the closing solve.
    #[arg(long, default_value_t = 1e-7)]
    final_tol: f64,
    /// Fraction of iterations after which `final-tol` applies.
    #[arg(long, default_value_t = 0.9)]
    final_phase: f64,
    #[arg(long, default_value_t = 5000)]
    cg_max_iter: usize,
    /// Stop early once the sampled KL stalls over this many iterations.
    #[arg(long)]
    plateau_window: Option<usize>,
    #[arg(long, default_value_t = 1e-4, requires = "plateau_window")]
    plateau_tol: f64,
    /// Mixture CSV to start from instead of a random draw.
    #[arg(long)]
    initial_mixture: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Results directory written by infer-kl or infer-map.
    #[arg(long)]
    results: PathBuf,
    /// Scenario bundle; defaults to the one recorded in the results.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Report path; defaults to `<results>/report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Generate,
    InferKl,
    InferMap,
    Evaluate,
}

/// Everything needed to repeat a run. The output directory is the one the
/// record lives in and is not stored, so reruns produce identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    mode: Mode,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scenario: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plateau: Option<PlateauStop>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_mixture: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    results: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Status {
    Complete,
    Failed,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    version: String,
    config: RunConfig,
    status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iterations_completed: Option<usize>,
    #[serde(default)]
    regularized_iterations: Vec<usize>,
}

impl RunRecord {
    fn new(config: RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            status: Status::Failed,
            error: None,
            artifacts: Vec::new(),
            iterations_completed: None,
            regularized_iterations: Vec::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Report {
    config: RunConfig,
    #[serde(flatten)]
    evaluation: Evaluation,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(&cli.output_root, args),
        Command::InferKl(args) => cmd_infer(&cli.output_root, InferenceMode::Kl, args),
        Command::InferMap(args) => cmd_infer(&cli.output_root, InferenceMode::Map, args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn cmd_generate(root: &Path, args: GenerateArgs) -> Result<()> {
    let spec = match (&args.preset, &args.spec) {
        (Some(name), _) => ScenarioSpec::preset(name, args.seed.unwrap_or(42))?,
        (None, Some(path)) => {
            let mut spec: ScenarioSpec =
                io::read_json(path).with_context(|| format!("reading scenario spec {}", path.display()))?;
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            spec
        }
        (None, None) => bail!("either --preset or --spec is required"),
    };
    let name = args.preset.as_deref().unwrap_or("custom");
    let out = args
        .out
        .unwrap_or_else(|| root.join(format!("{name}-seed{}", spec.seed)));
    let scenario = generate_scenario(&spec)?;
    prepare_dir(&out)?;
    io::save_scenario(&out, &scenario).with_context(|| format!("writing scenario to {}", out.display()))?;
    let mut record = RunRecord::new(RunConfig {
        mode: Mode::Generate,
        seed: spec.seed,
        scenario: None,
        spec: Some(spec),
        schedule: None,
        plateau: None,
        initial_mixture: None,
        results: None,
    });
    record.status = Status::Complete;
    record.artifacts = scenario_artifacts(scenario.spec.channels);
    io::write_json(&out.join(RUN_FILE), &record)?;
    println!("{}", out.display());
    Ok(())
}

fn scenario_artifacts(channels: usize) -> Vec<String> {
    let mut files: Vec<String> = (0..channels).map(io::data_file).collect();
    for f in [
        io::MASK_FILE,
        io::VARIANCE_FILE,
        TRUTH_COMPONENTS_FILE,
        io::TRUTH_MIXTURE_FILE,
        io::METADATA_FILE,
    ] {
        files.push(f.into());
    }
    files
}

fn cmd_infer(root: &Path, mode: InferenceMode, args: InferArgs) -> Result<()> {
    let schedule = Schedule {
        iterations: args.iterations,
        initial_samples: args.samples_initial,
        final_samples: args.samples_final,
        ramp_start: args.ramp_start,
        early_rel_tol: args.early_tol,
        final_rel_tol: args.final_tol,
        final_phase: args.final_phase,
        cg_max_iter: args.cg_max_iter,
    };
    let initial_mixture = args
        .initial_mixture
        .as_deref()
        .map(|p| io::read_mixture(p).with_context(|| format!("reading initial mixture {}", p.display())))
        .transpose()?;
    let config = RunConfig {
        mode: match mode {
            InferenceMode::Kl => Mode::InferKl,
            InferenceMode::Map => Mode::InferMap,
        },
        seed: args.seed,
        scenario: Some(absolute(&args.scenario)),
        spec: None,
        schedule: Some(schedule.clone()),
        plateau: args.plateau_window.map(|window| PlateauStop {
            window,
            rel_change: args.plateau_tol,
        }),
        initial_mixture: initial_mixture.as_ref().map(mixture_rows),
        results: None,
    };
    let label = match mode {
        InferenceMode::Kl => "kl",
        InferenceMode::Map => "map",
    };
    let out = args
        .out
        .unwrap_or_else(|| root.join(format!("{label}-seed{}", args.seed)));
    prepare_dir(&out)?;

    let mut record = RunRecord::new(config);
    let outcome = infer_into(&out, mode, &args.scenario, initial_mixture, &mut record);
    if let Err(e) = &outcome {
        record.status = Status::Failed;
        record.error = Some(format!("{e:#}"));
    }
    io::write_json(&out.join(RUN_FILE), &record)
        .with_context(|| format!("writing {}", out.join(RUN_FILE).display()))?;
    outcome?;
    println!("{}", out.display());
    Ok(())
}

fn mixture_rows(m: &MixtureMatrix) -> Vec<Vec<f64>> {
    (0..m.channels())
        .map(|i| (0..m.components()).map(|j| m.get(i, j)).collect())
        .collect()
}

/// Runs one inference and writes its artifacts, listing each in `record`
/// as soon as it exists so a failure leaves an accurate inventory.
fn infer_into(
    out: &Path,
    mode: InferenceMode,
    scenario: &Path,
    initial_mixture: Option<MixtureMatrix>,
    record: &mut RunRecord,
) -> Result<()> {
    let bundle = io::load_scenario(scenario).with_context(|| format!("reading scenario {}", scenario.display()))?;
    let inputs = bundle.inference_inputs()?;
    let schedule = record.config.schedule.clone().expect("infer runs carry a schedule");
    let mut config = match mode {
        InferenceMode::Kl => InferenceConfig::kl(schedule, record.config.seed),
        InferenceMode::Map => InferenceConfig::map(schedule, record.config.seed),
    };
    config.initial_mixture = initial_mixture;
    config.plateau = record.config.plateau;
    let truth = bundle.truth.as_ref().map(|t| &t.components);
    log::info!(
        "{} inference on {}: {} iterations, seed {}",
        if mode == InferenceMode::Kl { "KL" } else { "MAP" },
        scenario.display(),
        config.schedule.iterations,
        config.seed
    );
    let result = match mode {
        InferenceMode::Kl => run_inference(&inputs, &config, truth),
        InferenceMode::Map => run_map(&inputs, &config, truth),
    }?;
    record.iterations_completed = Some(result.trace.len());
    record.regularized_iterations = result.regularized_iterations.clone();

    let state = &result.state;
    let std = state.std()?;
    let mut write = |name: &str, f: &dyn Fn(&Path) -> nica::Result<()>| -> Result<()> {
        f(&out.join(name)).with_context(|| format!("writing {name}"))?;
        record.artifacts.push(name.into());
        Ok(())
    };
    write(MEAN_FILE, &|p| FieldTable::from_multifield("m", &state.mean).write(p))?;
    write(STD_FILE, &|p| FieldTable::from_multifield("std", &std).write(p))?;
    write(MIXTURE_FILE, &|p| io::write_mixture(p, &state.mixture))?;
    write(TRACE_FILE, &|p| io::write_trace(p, &result.trace))?;

    if let Some(truth) = &bundle.truth {
        let evaluation = evaluate(&state.mean, &state.mixture, &std, &truth.components, &truth.mixture)?;
        let aligned = nica::align_to_reference(&state.mixture, &state.mean, &truth.components)?;
        let aligned_std = aligned.alignment.permute_field(&std);
        write(ALIGNED_FILE, &|p| {
            aligned_table(&aligned.mean, &aligned_std, &truth.components)?.write(p)
        })?;
        write(ALIGNED_MIXTURE_FILE, &|p| io::write_mixture(p, &aligned.mixture))?;
        let report = Report {
            config: RunConfig {
                mode: Mode::Evaluate,
                results: None,
                ..record.config.clone()
            },
            evaluation,
        };
        write(REPORT_FILE, &|p| io::write_json(p, &report))?;
        log::info!(
            "epsilon {:.4}, floor {:.4}, coverage {:.3}, mixture deviation {:.4}",
            report.evaluation.epsilon,
            report.evaluation.uncertainty_floor,
            report.evaluation.coverage,
            report.evaluation.mixture_deviation
        );
    }
    record.status = Status::Complete;
    Ok(())
}

/// Aligned mean, its standard deviation and the truth side by side.
fn aligned_table(mean: &MultiField, std: &MultiField, truth: &MultiField) -> nica::Result<FieldTable> {
    let c = mean.len();
    let mut names = Vec::with_capacity(3 * c);
    let mut columns = Vec::with_capacity(3 * c);
    for (prefix, f) in [("m", mean), ("std", std), ("s", truth)] {
        for (j, comp) in f.components().iter().enumerate() {
            names.push(format!("{prefix}{j}"));
            columns.push(comp.values().to_vec());
        }
    }
    FieldTable::new(mean.grid(), names, columns)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let record: RunRecord = io::read_json(&args.results.join(RUN_FILE))
        .with_context(|| format!("reading {}", args.results.join(RUN_FILE).display()))?;
    if record.status != Status::Complete {
        bail!("{} holds a failed run", args.results.display());
    }
    let scenario = match args.scenario.or(record.config.scenario.clone()) {
        Some(s) => s,
        None => bail!("no scenario given and none recorded in the results"),
    };
    let bundle = io::load_scenario(&scenario).with_context(|| format!("reading scenario {}", scenario.display()))?;
    let Some(truth) = bundle.truth else {
        bail!("scenario {} has no ground truth", scenario.display());
    };
    let read_field = |name: &str| -> Result<MultiField> {
        let path = args.results.join(name);
        FieldTable::read(&path)
            .and_then(FieldTable::into_multifield)
            .with_context(|| format!("reading {}", path.display()))
    };
    let mean = read_field(MEAN_FILE)?;
    let std = read_field(STD_FILE)?;
    let mixture = io::read_mixture(&args.results.join(MIXTURE_FILE)).context("reading mixture")?;
    let evaluation = evaluate(&mean, &mixture, &std, &truth.components, &truth.mixture)?;
    let report = Report {
        config: RunConfig {
            mode: Mode::Evaluate,
            scenario: Some(absolute(&scenario)),
            results: Some(absolute(&args.results)),
            ..record.config
        },
        evaluation,
    };
    let out = args.out.unwrap_or_else(|| args.results.join(REPORT_FILE));
    io::write_json(&out, &report).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}
