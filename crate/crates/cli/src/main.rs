//! `sparsegrad`: train, evaluate, compare and self-check from the command line.
//!
//! Exit codes: 0 on success, 1 on validation or I/O errors, 2 on numeric
//! failures. Logs go to standard error; results go to files in the output
//! directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sparsegrad_experiments::checkpoint::Checkpoint;
use sparsegrad_experiments::checks::{self, CheckLine};
use sparsegrad_experiments::data::{generate, write_dataset, DatasetKind};
use sparsegrad_experiments::output::{write_diagnostic, write_run, write_value};
use sparsegrad_experiments::{
    compare_methods, evaluate_model, load_config, load_data, run, run_sweep, Aggregation, ExperimentConfig,
    ExperimentError, GenDataConfig,
};

#[derive(Debug, Parser)]
#[command(name = "sparsegrad", version, about = "Differentiable sparsification experiments")]
struct Cli {
    /// Worker threads for sweeps and comparisons (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one config, or one run per lambda of its sweep.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// `key=value` applied after the file, e.g. `lambda=0.05`.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Recompute the metrics of a saved checkpoint.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Applied to the checkpoint's config, e.g. `data.path=...`.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Autodiff against central finite differences for every op.
    GradCheck {
        #[arg(long, default_value_t = checks::GRAD_POINTS)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Closed-form prox steps against a grid-search minimizer.
    ProxCheck {
        #[arg(long, default_value_t = checks::PROX_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Line sums and scale invariance of Sinkhorn and balanced normalization.
    SinkhornCheck {
        #[arg(long, default_value_t = checks::SINKHORN_MATRICES)]
        matrices: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train several configs over seeds and tabulate their final metrics.
    Compare {
        #[arg(long = "config", required = true, num_args = 1)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
        /// Applied to every config.
        #[arg(long = "override")]
        overrides: Vec<String>,
        /// Comma-separated seeds; empty uses each config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = AggregationArg::Median)]
        aggregation: AggregationArg,
    },
    /// Write a synthetic dataset as `<name>.csv` plus a `<name>.json` sidecar.
    GenData {
        /// Dataset kind; read from `--config` when omitted.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        /// JSON file with `kind`, `seed` and generator parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
        /// File stem; defaults to the kind.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value`, e.g. `traffic.nodes=30`.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    Median,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Classify,
    Wiring,
    TrafficGraph,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Classify => DatasetKind::Classify,
            KindArg::Wiring => DatasetKind::Wiring,
            KindArg::TrafficGraph => DatasetKind::TrafficGraph,
        }
    }
}

/// Why a command failed, and where to leave a diagnostic.
struct Failure {
    error: ExperimentError,
    /// Config and output directory of a failed run.
    run: Option<(ExperimentConfig, PathBuf)>,
}

impl From<ExperimentError> for Failure {
    fn from(error: ExperimentError) -> Self {
        Failure { error, run: None }
    }
}

enum Outcome {
    Ok,
    /// A check exceeded its tolerance, a numeric failure.
    ChecksFailed,
}

fn exit_code(error: &ExperimentError) -> u8 {
    if error.is_numeric() {
        2
    } else {
        1
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
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => {
            eprintln!("error: check exceeded its tolerance");
            ExitCode::from(2)
        }
        Err(Failure { error, run }) => {
            eprintln!("error: {error}");
            if let Some((config, dir)) = run {
                if let Err(e) = write_diagnostic(&dir, &config, &error) {
                    eprintln!("error: could not write diagnostic: {e}");
                }
            }
            ExitCode::from(exit_code(&error))
        }
    }
}

fn execute(command: Command) -> Result<Outcome, Failure> {
    match command {
        Command::Train { config, output_dir, overrides } => train(&config, &output_dir, &overrides),
        Command::Eval { config, output_dir, overrides } => eval(&config, &output_dir, &overrides),
        Command::GradCheck { points, seed, output_dir } => {
            report("grad-check", &checks::grad_check(points, seed)?, output_dir.as_deref())
        }
        Command::ProxCheck { instances, seed, output_dir } => {
            report("prox-check", &checks::prox_check(instances, seed)?, output_dir.as_deref())
        }
        Command::SinkhornCheck { matrices, seed, output_dir } => {
            report("sinkhorn-check", &checks::sinkhorn_check(matrices, seed)?, output_dir.as_deref())
        }
        Command::Compare { configs, output_dir, overrides, seeds, aggregation } => {
            let configs = configs.iter().map(|p| load_config(p, &overrides)).collect::<Result<Vec<_>, _>>()?;
            let aggregation = match aggregation {
                AggregationArg::Median => Aggregation::Median,
                AggregationArg::Mean => Aggregation::Mean,
            };
            eprintln!("comparing {} configs", configs.len());
            let table = compare_methods(&configs, &seeds, aggregation)?;
            for row in &table.rows {
                eprintln!(
                    "{:?} lambda={} nonzero={} eval-error={:.4} lr-k1={:?}",
                    row.method, row.lambda, row.nonzero_count, row.eval_error, row.lr_score_k1
                );
            }
            write_value(&output_dir.join("comparison.json"), &table)?;
            Ok(Outcome::Ok)
        }
        Command::GenData { kind, config, output_dir, name, seed, overrides } => {
            let base = match (&config, kind) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
                    let mut c: GenDataConfig =
                        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
                    if let Some(k) = kind {
                        c.kind = k.into();
                    }
                    c
                }
                (None, Some(k)) => GenDataConfig::new(k.into()),
                (None, None) => return Err(ExperimentError::Config("gen-data needs --kind or --config".into()).into()),
            };
            let mut gen = base.resolve(&overrides)?;
            if let Some(s) = seed {
                gen.seed = s;
            }
            let stem = name.unwrap_or_else(|| {
                serde_json::to_value(gen.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_else(|| "dataset".into())
            });
            let prefix = output_dir.join(stem);
            write_dataset(&prefix, &generate(&gen)?, gen.seed, gen.params()?)?;
            eprintln!("wrote {}.csv and {}.json", prefix.display(), prefix.display());
            Ok(Outcome::Ok)
        }
    }
}

fn train(config_path: &Path, output_dir: &Path, overrides: &[String]) -> Result<Outcome, Failure> {
    let config = load_config(config_path, overrides)?;
    let failed = |error: ExperimentError| Failure { error, run: Some((config.clone(), output_dir.to_path_buf())) };
    if config.sweep.is_empty() {
        eprintln!("training {:?} / {:?} with lambda {}", config.harness, config.method, config.lambda());
        let output = run(&config).map_err(failed)?;
        let summary = write_run(output_dir, &output)?;
        log_final(&summary.final_metrics);
    } else {
        eprintln!("training {:?} / {:?} over lambdas {:?}", config.harness, config.method, config.sweep);
        for output in run_sweep(&config).map_err(failed)? {
            let dir = output_dir.join(format!("lambda-{}", output.config.lambda()));
            let summary = write_run(&dir, &output)?;
            eprint!("lambda {}: ", output.config.lambda());
            log_final(&summary.final_metrics);
        }
    }
    Ok(Outcome::Ok)
}

fn log_final(m: &sparsegrad_experiments::MetricsRecord) {
    eprintln!(
        "epoch {} train-loss {:.5} eval-error {:.4} test-error {:.4} nonzero {}/{}",
        m.epoch, m.train_loss, m.eval_error, m.test_error, m.nonzero_count, m.total_count
    );
}

fn eval(checkpoint_path: &Path, output_dir: &Path, overrides: &[String]) -> Result<Outcome, Failure> {
    let mut checkpoint = Checkpoint::load(checkpoint_path)?;
    for o in overrides {
        checkpoint.config.apply_override(o)?;
    }
    checkpoint.config.validate()?;
    let data = load_data(&checkpoint.config)?;
    let model = checkpoint.restore(&data)?;
    let metrics = evaluate_model(&checkpoint.config, &model, &data)?;
    log_final(&metrics);
    write_value(&output_dir.join("eval.json"), &metrics)?;
    Ok(Outcome::Ok)
}

fn report(name: &str, lines: &[CheckLine], output_dir: Option<&Path>) -> Result<Outcome, Failure> {
    for l in lines {
        let status = if l.passed() { "ok" } else { "FAIL" };
        println!(
            "{name} {:<28} cases {:>4}  worst {:.3e}  tol {:.0e}  {status}",
            l.name, l.cases, l.worst, l.tolerance
        );
    }
    if let Some(dir) = output_dir {
        write_value(&dir.join(format!("{name}.json")), &lines)?;
    }
    Ok(if checks::all_passed(lines) { Outcome::Ok } else { Outcome::ChecksFailed })
}
