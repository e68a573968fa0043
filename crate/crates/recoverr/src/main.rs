use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use recoverr::formats::{pct, write_json, write_jsonl};
use recoverr::harness::{load_run, load_world, report_tables, run_calibration, run_eval, Models};
use recoverr::recoverr_core::recoverr::RecoverrTrace;
use recoverr::recoverr_core::simworld::{gen_dataset, SchemaSource, SchemaSpec, SimDatasetSpec};
use recoverr::replay::replay_trace;
use recoverr::{select_threshold_from_artifacts, RunConfig};

#[derive(Parser)]
#[command(name = "recoverr", version, about = "Selective visual question answering with evidence-verified abstentions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set recoverr.delta_min=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.set)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the confidence estimator and select the threshold for `r`.
    Calibrate(ConfigArgs),
    /// Select a threshold from stored calibration samples.
    SelectThreshold {
        #[command(flatten)]
        config: ConfigArgs,
        /// Risk tolerance; defaults to the configured `r`.
        #[arg(long)]
        r: Option<f64>,
    },
    /// Evaluate the configured method on the dataset (resumes partial runs).
    Run(ConfigArgs),
    /// Synthetic world tools.
    Simulate {
        #[command(subcommand)]
        command: SimulateCommand,
    },
    /// Build metric tables and curves from finished runs.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long, default_value = "report")]
        out: PathBuf,
        /// Calibration artifacts directory whose reliability bins to export.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Audit a verification trace step by step.
    ReplayTrace {
        trace: PathBuf,
        /// Synthetic world to recompute entailments against.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(short, long)]
        quiet: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaKind {
    Demo,
    Random,
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// Generate worlds and calibration/test instance files.
    Gen {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_calibration: usize,
        #[arg(long, default_value_t = 10_000)]
        n_test: usize,
        #[arg(long, default_value_t = 0.0)]
        distractor_ratio: f64,
        #[arg(long, value_enum, default_value_t = SchemaKind::Random)]
        schema: SchemaKind,
        #[arg(long, default_value_t = 8)]
        n_derived: usize,
        #[arg(long, default_value_t = 6)]
        n_distractors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn calibrate(args: &ConfigArgs) -> Result<()> {
    let config = args.load()?;
    let models = Models::from_config(&config, None)?;
    let out = run_calibration(&config, &models)?;
    println!(
        "calibrated on {} samples (fit {}, threshold {})",
        out.samples, out.fit_on, out.threshold_on
    );
    println!("ECE before {:.4}, after {:.4}", out.before.ece, out.after.ece);
    print_threshold(&out.threshold);
    Ok(())
}

fn print_threshold(t: &recoverr::formats::ThresholdDocument) {
    let risk = t.risk.map_or("-".to_string(), |r| format!("{:.1}%", 100.0 * r));
    println!(
        "r = {}: gamma = {:.6}, coverage {:.1}%, risk {risk} on {} samples",
        t.r,
        t.gamma,
        100.0 * t.coverage,
        t.selected_on
    );
}

fn run(args: &ConfigArgs) -> Result<()> {
    let config = args.load()?;
    let models = Models::from_config(&config, None)?;
    let out = run_eval(&config, &models)?;
    match &out.metrics {
        Some(m) => {
            let risk = m.risk.map_or("-".to_string(), |r| format!("{:.1}", pct(r)));
            println!(
                "{} r = {}: n {}  coverage {:.1}  risk {risk}  phi1 {:.1}  recovered {}  failed closed {}",
                config.method.as_str(),
                config.r,
                m.n,
                pct(m.coverage),
                pct(m.effective_reliability),
                m.recovered,
                m.failed_closed
            );
            println!("records in {}", config.paths.output.display());
        }
        None => println!(
            "stopped after {} new instances ({} of {} done); rerun to resume",
            out.processed,
            out.records.len(),
            out.manifest.n_instances
        ),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_gen(
    out: &Path,
    n_calibration: usize,
    n_test: usize,
    distractor_ratio: f64,
    schema: SchemaKind,
    n_derived: usize,
    n_distractors: usize,
    seed: u64,
) -> Result<()> {
    let spec = SimDatasetSpec {
        n_calibration,
        n_test,
        distractor_ratio,
        schema: match schema {
            SchemaKind::Demo => SchemaSource::Demo,
            SchemaKind::Random => SchemaSource::Random(SchemaSpec {
                n_derived,
                n_distractors,
                ..SchemaSpec::default()
            }),
        },
    };
    let dataset = gen_dataset(&spec, seed)?;
    write_jsonl(&out.join("calibration.jsonl"), &dataset.calibration)?;
    write_jsonl(&out.join("test.jsonl"), &dataset.test)?;
    write_json(&out.join("world.json"), &dataset)?;
    println!(
        "{} worlds, {} calibration and {} test instances in {}",
        dataset.worlds.len(),
        dataset.calibration.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path, calibration: Option<&Path>) -> Result<()> {
    let loaded = runs
        .iter()
        .map(|d| load_run(d).with_context(|| format!("loading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let rep = report_tables(&loaded, out, calibration)?;
    println!("{:<14} {:>5} {:>7} {:>7} {:>7} {:>7}", "method", "r", "R", "phi1", "C", "recall");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
    for row in &rep.rows {
        println!(
            "{:<14} {:>5} {:>7} {:>7.1} {:>7.1} {:>7}",
            row.method,
            row.r,
            opt(row.risk),
            row.phi1,
            row.coverage,
            opt(row.recall)
        );
    }
    for c in &rep.comparisons {
        println!(
            "{} r = {}: coverage {:.1} at risk {:.1}; thresholding alone reaches {:.1} (gain {:.1})",
            c.method, c.r, c.coverage, c.risk, c.vanilla_coverage_at_risk, c.coverage_gain
        );
    }
    println!("tables in {}", out.display());
    Ok(())
}

fn replay(trace: &Path, world: Option<&Path>, quiet: bool) -> Result<bool> {
    let text = std::fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let trace: RecoverrTrace = serde_json::from_str(&text).context("parsing trace")?;
    let world = world.map(load_world).transpose()?;
    let audit = replay_trace(&trace, world.as_ref().map(|w| &w.schema));
    if !quiet {
        print!("{}", audit.narrative);
    }
    if audit.is_consistent() {
        println!(
            "{}: consistent ({} turns, {} reliable, {} relevant, {:?})",
            audit.instance_id, audit.turns, audit.reliable, audit.relevant, audit.terminal
        );
    } else {
        for i in &audit.issues {
            eprintln!("inconsistent: {i}");
        }
    }
    Ok(audit.is_consistent())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::SelectThreshold { config, r } => (|| {
            let cfg = config.load()?;
            let t = select_threshold_from_artifacts(&cfg, r.unwrap_or(cfg.r))?;
            print_threshold(&t);
            Ok(())
        })(),
        Command::Run(args) => run(args),
        Command::Simulate {
            command:
                SimulateCommand::Gen {
                    out,
                    n_calibration,
                    n_test,
                    distractor_ratio,
                    schema,
                    n_derived,
                    n_distractors,
                    seed,
                },
        } => simulate_gen(
            out,
            *n_calibration,
            *n_test,
            *distractor_ratio,
            *schema,
            *n_derived,
            *n_distractors,
            *seed,
        ),
        Command::Report { runs, out, calibration } => report(runs, out, calibration.as_deref()),
        Command::ReplayTrace { trace, world, quiet } => match replay(trace, world.as_deref(), *quiet) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
