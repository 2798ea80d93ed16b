//! Command-line front end: `run`, `sweep`, `datasyn`, and `metrics`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::condensation::datasyn;
use crate::error::{Error, Result};
use crate::fairness::{bias_score, FairnessMetricKind, NeighborGraph};
use crate::federation::{
    run_experiment, run_round, CalibratorKind, DpNoiseConfig, GammaSchedule, MetricTrace,
    RoundPlan, ServerState, ExperimentOutput,
};
use crate::model::{accuracy, ModelParams};

use super::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "fedfair", about = "federated fairness experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Jsonl,
}

impl OutputFormat {
    fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Knob {
    /// Calibration weight (constant schedule).
    Gamma,
    /// Checkpoint fraction: s = round(fraction * T).
    RoundFraction,
    /// Synthetic sample count m.
    SynSize,
    /// Client count.
    Clients,
    /// DP noise multiplier sigma.
    Sigma,
}

impl Knob {
    fn name(self) -> &'static str {
        match self {
            Knob::Gamma => "gamma",
            Knob::RoundFraction => "round_fraction",
            Knob::SynSize => "syn_size",
            Knob::Clients => "clients",
            Knob::Sigma => "sigma",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute one experiment config and write its trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
        format: OutputFormat,
    },
    /// Vary one knob over a value list; one trace per point plus a summary.
    Sweep {
        knob: Knob,
        /// Comma-separated values, e.g. `0,0.5,1,2`.
        values: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
        format: OutputFormat,
    },
    /// Build and dump the synthetic set only (runs the checkpoint phase).
    Datasyn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved model against the config's evaluation split.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/usage text; keep its exit semantics
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut sink = OutputSink::default();
    match dispatch(cli.command, &mut sink) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            sink.remove_partial();
            1
        }
    }
}

/// Tracks files written by the current invocation so failures leave no
/// partial outputs behind.
#[derive(Default)]
struct OutputSink {
    written: Vec<PathBuf>,
}

impl OutputSink {
    fn track(&mut self, path: &Path) {
        self.written.push(path.to_path_buf());
    }

    fn remove_partial(&self) {
        for path in &self.written {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn dispatch(command: Command, sink: &mut OutputSink) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            format,
        } => {
            let config = load_config(&config, seed)?;
            ensure_dir(&out)?;
            let output = execute(&config)?;
            write_trace(&output.trace, &out.join("trace"), format, sink)?;
            write_model(&output.final_global, &out.join("model.json"), sink)?;
            if let Some(syn) = &output.synthetic {
                let path = out.join("synthetic.csv");
                sink.track(&path);
                syn.write_csv(&path)?;
            }
            Ok(())
        }
        Command::Sweep {
            knob,
            values,
            config,
            out,
            seed,
            format,
        } => {
            let config = load_config(&config, seed)?;
            ensure_dir(&out)?;
            let values = parse_values(&values)?;
            sweep(&config, knob, &values, &out, format, sink)
        }
        Command::Datasyn { config, out, seed } => {
            let config = load_config(&config, seed)?;
            ensure_dir(&out)?;
            let syn = build_synthetic(&config)?;
            let path = out.join("synthetic.csv");
            sink.track(&path);
            syn.write_csv(&path)
        }
        Command::Metrics { model, config, out } => {
            let config = load_config(&config, None)?;
            let params = read_model(&model)?;
            let report = score_model(&params, &config)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => {
                    sink.track(&path);
                    std::fs::write(&path, text + "\n")
                        .map_err(|e| Error::io(path.display().to_string(), e))
                }
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn execute(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let built = config.build()?;
    run_experiment(&built.experiment, &built.clients, &built.eval)
}

fn write_trace(
    trace: &MetricTrace,
    stem: &Path,
    format: OutputFormat,
    sink: &mut OutputSink,
) -> Result<()> {
    let path = stem.with_extension(format.extension());
    sink.track(&path);
    match format {
        OutputFormat::Csv => trace.write_csv(&path),
        OutputFormat::Jsonl => trace.write_jsonl(&path),
    }
}

fn write_model(model: &ModelParams, path: &Path, sink: &mut OutputSink) -> Result<()> {
    sink.track(path);
    let text = serde_json::to_string_pretty(model).expect("model serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_model(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn parse_values(raw: &str) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> =
        raw.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values
        .map_err(|e| Error::InvalidConfig(format!("sweep values `{raw}`: {e}")))?;
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    Ok(values)
}

fn apply_knob(config: &ExperimentConfig, knob: Knob, value: f64) -> Result<ExperimentConfig> {
    let mut config = config.clone();
    let as_count = |value: f64, what: &str| -> Result<usize> {
        if value < 1.0 || value.fract() != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "{what} sweep value {value} is not a positive integer"
            )));
        }
        Ok(value as usize)
    };
    match knob {
        Knob::Gamma => {
            if value < 0.0 {
                return Err(Error::InvalidConfig(format!("gamma {value} must be >= 0")));
            }
            config.schedules.gamma = GammaSchedule::Constant { value };
        }
        Knob::RoundFraction => {
            if !(value > 0.0 && value < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "round fraction {value} must lie in (0, 1)"
                )));
            }
            let t = config.plan.total_rounds;
            let s = ((t as f64 * value).round() as usize).clamp(1, t - 1);
            config.plan.checkpoint_rounds = Some(s);
        }
        Knob::SynSize => config.condensation.samples = as_count(value, "syn_size")?,
        Knob::Clients => config.clients.count = as_count(value, "clients")?,
        Knob::Sigma => {
            if value < 0.0 {
                return Err(Error::InvalidConfig(format!("sigma {value} must be >= 0")));
            }
            let clip_norm = config
                .clients
                .dp
                .map(|dp| dp.clip_norm)
                .unwrap_or(0.05);
            config.clients.dp = Some(DpNoiseConfig {
                clip_norm,
                sigma: value,
            });
        }
    }
    config.validate()?;
    Ok(config)
}

/// One summary row per sweep point: the final-round scores of its trace.
#[derive(Debug, Serialize)]
struct SweepRow {
    knob: String,
    value: f64,
    final_eo: f64,
    final_dp: f64,
    final_cal: f64,
    final_con: f64,
    test_accuracy: f64,
    train_loss: f64,
}

fn sweep(
    config: &ExperimentConfig,
    knob: Knob,
    values: &[f64],
    out: &Path,
    format: OutputFormat,
    sink: &mut OutputSink,
) -> Result<()> {
    let points: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| apply_knob(config, knob, v))
        .collect::<Result<_>>()?;

    let threads = sweep_threads(points.len())?;
    let results: Vec<Option<Result<ExperimentOutput>>> =
        (0..points.len()).map(|_| None).collect();
    let results = Mutex::new(results);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let result = execute(&points[i]);
                results.lock().expect("no poisoned workers")[i] = Some(result);
            });
        }
    });

    let mut rows = Vec::with_capacity(values.len());
    for (i, slot) in results.into_inner().expect("scope joined").into_iter().enumerate() {
        let output = slot.expect("every point executed")?;
        let stem = out.join(format!("trace_{}_{}", knob.name(), fmt_value(values[i])));
        write_trace(&output.trace, &stem, format, sink)?;
        let last = output.trace.last().expect("T >= 2 rounds ran");
        rows.push(SweepRow {
            knob: knob.name().into(),
            value: values[i],
            final_eo: last.bias_eo,
            final_dp: last.bias_dp,
            final_cal: last.bias_cal,
            final_con: last.bias_con,
            test_accuracy: last.test_accuracy,
            train_loss: last.train_loss,
        });
    }

    let summary = out.join("sweep_summary.csv");
    sink.track(&summary);
    let mut writer = csv::Writer::from_path(&summary).map_err(|e| Error::Csv {
        path: summary.display().to_string(),
        message: e.to_string(),
    })?;
    for row in &rows {
        writer.serialize(row).map_err(|e| Error::Csv {
            path: summary.display().to_string(),
            message: e.to_string(),
        })?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(summary.display().to_string(), e))
}

fn fmt_value(value: f64) -> String {
    format!("{value}").replace('.', "p").replace('-', "m")
}

fn sweep_threads(points: usize) -> Result<usize> {
    let cap = match std::env::var("FEDFAIR_THREADS") {
        Ok(raw) => raw.parse::<usize>().ok().filter(|&t| t >= 1).ok_or_else(|| {
            Error::InvalidConfig(format!("FEDFAIR_THREADS=`{raw}` is not a positive integer"))
        })?,
        Err(_) => std::thread::available_parallelism()
            .map(|p| p.get())
            .unwrap_or(1),
    };
    Ok(cap.min(points).max(1))
}

/// Run only the checkpoint phase of the config, then condense.
fn build_synthetic(config: &ExperimentConfig) -> Result<crate::condensation::SyntheticDataset> {
    let built = config.build()?;
    let plain = RoundPlan {
        calibrator: CalibratorKind::None,
        ..built.experiment.plan.clone()
    };
    let initial = ModelParams::init_xavier(
        built.experiment.model_shape.clone(),
        built.experiment.init_seed,
    );
    let mut state = ServerState::new(initial, built.experiment.noise_seed);
    for t in 1..=plan_s(&plain) {
        run_round(
            &mut state,
            &plain,
            &built.experiment.condensation,
            &built.experiment.schedules,
            &built.clients,
            t,
        )?;
    }
    state.store.freeze();
    datasyn(&state.store, &built.experiment.condensation)
}

fn plan_s(plan: &RoundPlan) -> usize {
    plan.checkpoint_rounds
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    accuracy: f64,
    eo: f64,
    dp: f64,
    cal: f64,
    con: f64,
}

fn score_model(params: &ModelParams, config: &ExperimentConfig) -> Result<MetricsReport> {
    let built = config.build()?;
    let eval = &built.eval;
    if params.shape.input_dim != eval.num_features() {
        return Err(Error::DimensionMismatch {
            context: "metrics model input",
            expected: eval.num_features(),
            actual: params.shape.input_dim,
        });
    }
    let k = config.eval_neighbor_k.min(eval.len().saturating_sub(1)).max(1);
    let neighbors = NeighborGraph::build(&eval.features, k)?;
    let threshold = config.threshold;
    Ok(MetricsReport {
        accuracy: accuracy(params, eval, threshold)?,
        eo: bias_score(FairnessMetricKind::Eo, params, eval, threshold, None)?,
        dp: bias_score(FairnessMetricKind::Dp, params, eval, threshold, None)?,
        cal: bias_score(FairnessMetricKind::Cal, params, eval, threshold, None)?,
        con: bias_score(FairnessMetricKind::Con, params, eval, threshold, Some(&neighbors))?,
    })
}
