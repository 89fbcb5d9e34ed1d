use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aepoison::detector::{Detector, DetectorConfig};
use aepoison::harness::{self, GridOptions, GridSpec, Scenario};
use aepoison::nn::TrainConfig;
use aepoison::poisoning::{self, poison_span, Algorithm, InitMode, PoisonConfig, PoisonProblem};
use aepoison::signals::{self, AttackRange, AttackSpec, SignalSpec};
use aepoison::timeseries::{self, HeaderPolicy, NormStats, SeriesMatrix};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const CONFIG_SCHEMA: u64 = 1;

#[derive(Parser)]
#[command(name = "aepoison", version, about = "Poisoning attacks on autoencoder anomaly detectors")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Override the seed of the loaded configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the detection threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Directory for every output file.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for grid runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series from a signal spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "series.csv")]
        output: String,
        /// Write the noiseless signal instead.
        #[arg(long)]
        clean: bool,
    },
    /// Inject an attack into a series.
    Attack {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Signal spec locating named attack positions.
        #[arg(long)]
        signal: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        feature: usize,
        #[arg(long, default_value = "attacked.csv")]
        output: String,
    },
    /// Train a detector on one or more series.
    Train {
        #[arg(long = "series", required = true)]
        series: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "model.json")]
        output: String,
    },
    /// Score a series with a trained detector.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        series: PathBuf,
        #[arg(long, default_value = "report.json")]
        output: String,
    },
    /// Generate poisoning points for an attack.
    Poison {
        #[arg(long, value_enum, default_value_t = AlgoArg::Interp)]
        algo: AlgoArg,
        #[arg(long, value_enum, default_value_t = InitArg::Benign)]
        init: InitArg,
        /// Synthetic scenario JSON.
        #[arg(long, conflicts_with = "problem")]
        scenario: Option<PathBuf>,
        /// Problem JSON naming series files.
        #[arg(long)]
        problem: Option<PathBuf>,
        /// Attacker settings JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a parameter grid.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        /// Start over instead of resuming from the journal in the output directory.
        #[arg(long)]
        fresh: bool,
    },
    /// Normalize selected columns of a raw CSV.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated column names; all columns when omitted.
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,
        /// Reuse min/max from an earlier run.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        no_header: bool,
        #[arg(long, default_value = "normalized.csv")]
        output: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Interp,
    Backgrad,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Benign,
    Attack,
}

/// Read a JSON config, requiring a matching `schema_version`.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let obj = value
        .as_object_mut()
        .with_context(|| format!("{}: expected a JSON object", path.display()))?;
    match obj.remove("schema_version").and_then(|v| v.as_u64()) {
        Some(CONFIG_SCHEMA) => {}
        Some(v) => bail!("{}: unsupported schema_version {v}", path.display()),
        None => bail!("{}: missing schema_version", path.display()),
    }
    serde_json::from_value(value).with_context(|| format!("decoding {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_series(path: &Path) -> Result<SeriesMatrix> {
    Ok(timeseries::ingest_csv(path, &[], HeaderPolicy::Present)?)
}

#[derive(Deserialize)]
struct TrainFile {
    detector: DetectorConfig,
    train: TrainConfig,
}

/// Poisoning inputs stored as files; paths are relative to the JSON file.
#[derive(Deserialize)]
struct ProblemFile {
    detector: DetectorConfig,
    train_config: TrainConfig,
    train: Vec<PathBuf>,
    #[serde(default)]
    val: Vec<PathBuf>,
    attack: PathBuf,
    benign: PathBuf,
    attack_range: AttackRange,
    /// Rows on each side of the attack covered by a poisoning point.
    margin: usize,
}

fn load_problem(path: &Path, threshold: Option<f64>) -> Result<PoisonProblem> {
    let pf: ProblemFile = load_config(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load = |p: &PathBuf| read_series(&base.join(p));
    let train = pf.train.iter().map(load).collect::<Result<Vec<_>>>()?;
    let val = pf.val.iter().map(load).collect::<Result<Vec<_>>>()?;
    let attack = load(&pf.attack)?;
    let benign = load(&pf.benign)?;
    let mut detector = pf.detector;
    if let Some(t) = threshold {
        detector.threshold = t;
    }
    let span = poison_span(pf.attack_range, pf.margin, attack.rows(), detector.window.length)?;
    let mut magnitude: f64 = 0.0;
    for t in pf.attack_range.start..pf.attack_range.end.min(attack.rows()) {
        for j in 0..attack.features().min(benign.features()) {
            magnitude = magnitude.max((attack.values()[[t, j]] - benign.values()[[t, j]]).abs());
        }
    }
    let problem = PoisonProblem {
        detector,
        train_cfg: pf.train_config,
        train,
        val,
        attack,
        benign,
        attack_range: pf.attack_range,
        span,
        magnitude,
    };
    problem.validate()?;
    Ok(problem)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    let out = |name: &str| g.out_dir.join(name);
    match cli.command {
        Command::Gen { spec, output, clean } => {
            let mut spec: SignalSpec = load_config(&spec)?;
            if let Some(s) = g.seed {
                spec.seed = s;
            }
            let series = if clean {
                signals::generate_clean(&spec)?
            } else {
                signals::generate(&spec)?
            };
            timeseries::export_csv(&series, out(&output))?;
        }
        Command::Attack {
            series,
            spec,
            signal,
            feature,
            output,
        } => {
            let s = read_series(&series)?;
            let attack: AttackSpec = load_config(&spec)?;
            let signal: Option<SignalSpec> = signal.map(|p| load_config(&p)).transpose()?;
            let (attacked, range) = signals::inject_attack(&s, feature, &attack, signal.as_ref())?;
            timeseries::export_csv(&attacked, out(&output))?;
            write_json(&out("range.json"), &range)?;
        }
        Command::Train { series, config, output } => {
            let tf: TrainFile = load_config(&config)?;
            let mut det = tf.detector;
            if let Some(t) = g.threshold {
                det.threshold = t;
            }
            if let Some(s) = g.seed {
                det.model.init_seed = s;
            }
            let data = series.iter().map(|p| read_series(p)).collect::<Result<Vec<_>>>()?;
            let (detector, outcome) = Detector::fit(&det, &data, &tf.train)?;
            detector.save_json(out(&output))?;
            eprintln!("trained {} steps, final loss {:.6}", outcome.trajectory.steps, outcome.final_loss);
        }
        Command::Score { model, series, output } => {
            let mut detector = Detector::load_json(&model)?;
            if let Some(t) = g.threshold {
                detector.config.threshold = t;
            }
            let report = detector.score(&read_series(&series)?)?;
            write_json(&out(&output), &report)?;
            println!("{} alerts", report.alert_count);
        }
        Command::Poison {
            algo,
            init,
            scenario,
            problem,
            config,
        } => {
            let mut cfg: PoisonConfig = match &config {
                Some(p) => load_config(p)?,
                None => PoisonConfig::default(),
            };
            cfg.init_mode = match init {
                InitArg::Benign => InitMode::Benign,
                InitArg::Attack => InitMode::AttackBased,
            };
            let problem = match (scenario, problem) {
                (Some(path), None) => {
                    let mut sc: Scenario = load_config(&path)?;
                    if let Some(s) = g.seed {
                        sc.seed = s;
                    }
                    if let Some(t) = g.threshold {
                        sc.threshold = t;
                    }
                    cfg.seed = harness::derive_seed(sc.seed, harness::STREAM_POISON, 0);
                    sc.build()?
                }
                (None, Some(path)) => {
                    if let Some(s) = g.seed {
                        cfg.seed = s;
                    }
                    load_problem(&path, g.threshold)?
                }
                _ => bail!("give exactly one of --scenario or --problem"),
            };
            let algorithm = match algo {
                AlgoArg::Interp => Algorithm::Interp,
                AlgoArg::Backgrad => Algorithm::Backgrad,
            };
            let result = poisoning::run_poisoning(&problem, algorithm, &cfg)?;
            write_json(&out("result.json"), &result)?;
            for (i, p) in result.points.iter().enumerate() {
                timeseries::export_csv(&p.values, out(&format!("dp_{i:04}.csv")))?;
            }
            println!(
                "{}: {} poisoning points, {} clean, {} iterations, {:?}",
                if result.success { "success" } else { "failure" },
                result.poison_count(),
                result.clean_pads,
                result.iterations,
                result.termination
            );
        }
        Command::Grid { spec, fresh } => {
            let mut grid: GridSpec = load_config_keep_schema(&spec)?;
            if let Some(s) = g.seed {
                grid.scenario.seed = s;
                grid.axes.seed = None;
            }
            if let Some(t) = g.threshold {
                grid.scenario.threshold = t;
            }
            let journal = out("journal.jsonl");
            if fresh && journal.exists() {
                fs::remove_file(&journal).with_context(|| format!("removing {}", journal.display()))?;
            }
            let opts = GridOptions {
                workers: g.workers,
                journal: Some(journal),
            };
            let runs = harness::run_grid(&grid, &opts)?;
            harness::export(&runs, &g.out_dir)?;
            let ok = runs.iter().filter(|r| r.record.success).count();
            println!("{} runs, {ok} successful", runs.len());
        }
        Command::Ingest {
            input,
            features,
            stats,
            no_header,
            output,
        } => {
            let header = if no_header {
                HeaderPolicy::Absent
            } else {
                HeaderPolicy::Present
            };
            let raw = timeseries::ingest_csv(&input, &features, header)?;
            let base: Option<NormStats> = stats
                .map(|p| -> Result<NormStats> {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(serde_json::from_str(&text)?)
                })
                .transpose()?;
            let (norm, fitted) = timeseries::normalize(&raw, base.as_ref())?;
            timeseries::export_csv(&norm, out(&output))?;
            write_json(&out("stats.json"), &fitted)?;
        }
    }
    Ok(())
}

/// Grid specs carry `schema_version` as a field of their own.
fn load_config_keep_schema(path: &Path) -> Result<GridSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: GridSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source, so skip repeats.
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
