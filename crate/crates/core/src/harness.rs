//! Synthetic experiment cells, grid runs and result export.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, ResidualMode};
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, TrainConfig};
use crate::poisoning::{poison_span, run_poisoning, Algorithm, InitMode, PoisonConfig, PoisonProblem, PoisonResult, Termination};
use crate::signals::{self, AttackLocation, AttackSign, AttackSpec, Channel, SignalSpec, Waveform};
use crate::timeseries::WindowConfig;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of random stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(base) ^ stream) ^ index)
}

const STREAM_MODEL: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_ATTACK: u64 = 3;
/// Stream for the attacker's own randomness (clean padding, reservoir).
pub const STREAM_POISON: u64 = 4;
/// Stream expanding a grid cell's seed into per-repetition seeds.
pub const STREAM_REPETITION: u64 = 5;

pub const GRID_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// The whole series is one model input.
    SingleSequence,
    /// The model sees short overlapping subsequences.
    MultiSequence,
}

/// Fixed parameters of one synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub setting: Setting,
    pub waveform: Waveform,
    pub period: usize,
    pub signal_length: usize,
    pub channels: Vec<Channel>,
    pub noise_std: f64,
    /// Noise on the validation and attacked series; `noise_std` when unset.
    pub eval_noise_std: Option<f64>,
    pub training_size: usize,
    pub val_size: usize,
    pub location: AttackLocation,
    pub magnitude: f64,
    pub duration: usize,
    pub sign: AttackSign,
    pub cycle: usize,
    pub clip: Option<f64>,
    /// Window length in the multi-sequence setting.
    pub subsequence_length: usize,
    pub stride: usize,
    pub threshold: f64,
    pub residual_mode: ResidualMode,
    pub learning_rate: f64,
    pub train_iterations: usize,
    pub stop_loss: f64,
    pub init_scale: f64,
    /// Context around the attack covered by a poisoning point; one period
    /// when unset.
    pub margin: Option<usize>,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            setting: Setting::MultiSequence,
            waveform: Waveform::Sine,
            period: 40,
            signal_length: 100,
            channels: vec![Channel::default()],
            noise_std: 0.05,
            eval_noise_std: None,
            training_size: 10,
            val_size: 5,
            location: AttackLocation::SinBottom,
            magnitude: 0.2,
            duration: 5,
            sign: AttackSign::Positive,
            cycle: 1,
            clip: None,
            subsequence_length: 2,
            stride: 1,
            threshold: 0.2,
            residual_mode: ResidualMode::PerPointAbs,
            learning_rate: 0.5,
            train_iterations: 2000,
            stop_loss: 0.01,
            init_scale: 0.5,
            margin: None,
            seed: 0,
        }
    }
}

impl Scenario {
    /// Whole-series model. Validation and attacked series are noiseless and
    /// training runs a fixed number of epochs; see the README for why.
    pub fn single_sequence() -> Self {
        Self {
            setting: Setting::SingleSequence,
            period: 50,
            eval_noise_std: Some(0.0),
            learning_rate: 1.0,
            train_iterations: 60,
            stop_loss: 1e-4,
            init_scale: 0.05,
            ..Self::default()
        }
    }

    /// Overlapping length-2 subsequences, trained until the loss drops below
    /// 0.01. Evaluation series carry the training noise, so the clean
    /// detector false-alarms on many seeds; see [`Scenario::first_valid_seed`].
    pub fn multi_sequence() -> Self {
        Self::default()
    }

    pub fn window_length(&self) -> usize {
        match self.setting {
            Setting::SingleSequence => self.signal_length,
            Setting::MultiSequence => self.subsequence_length,
        }
    }

    fn signal(&self, seed: u64, noise_std: f64) -> SignalSpec {
        SignalSpec {
            waveform: self.waveform,
            period: self.period,
            length: self.signal_length,
            amplitude: 1.0,
            noise_std,
            channels: self.channels.clone(),
            seed,
            phase: 0,
        }
    }

    pub fn attack_spec(&self) -> AttackSpec {
        AttackSpec {
            sign: self.sign,
            cycle: self.cycle,
            clip: self.clip,
            ..AttackSpec::new(self.location, self.magnitude, self.duration)
        }
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let window = WindowConfig::new(self.window_length(), self.stride)?;
        let model = ModelConfig {
            init_seed: derive_seed(self.seed, STREAM_MODEL, 0),
            init_scale: self.init_scale,
            ..ModelConfig::autoencoder(self.channels.len() * window.length)
        };
        let cfg = DetectorConfig {
            model,
            window,
            threshold: self.threshold,
            residual_mode: self.residual_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.train_iterations,
            stop_loss: self.stop_loss,
            record_trajectory: false,
        }
    }

    /// Alerts the clean detector raises on validation data and on the test
    /// series before the attack is injected. A nonzero count means the
    /// detector false-alarms, so concealment is undefined for this data.
    pub fn false_alarms(&self) -> Result<usize> {
        let problem = Scenario {
            magnitude: 0.0,
            clip: None,
            ..self.clone()
        }
        .build()?;
        let base = crate::poisoning::train_test(&problem, &[], None, &PoisonConfig::default(), false)?;
        Ok(base.alerts.val + base.alerts.attack)
    }

    /// First seed in `seed..seed + tries` whose clean detector raises no
    /// false alarms. Only clean data is inspected, never the attack.
    pub fn first_valid_seed(&self, tries: usize) -> Result<Option<u64>> {
        for s in self.seed..self.seed + tries as u64 {
            let sc = Scenario {
                seed: s,
                ..self.clone()
            };
            if sc.false_alarms()? == 0 {
                return Ok(Some(s));
            }
        }
        Ok(None)
    }

    /// Generate data, inject the attack and assemble the poisoning problem.
    pub fn build(&self) -> Result<PoisonProblem> {
        if self.training_size == 0 {
            return Err(Error::InvalidConfig("training size must be positive".into()));
        }
        let detector = self.detector_config()?;
        let eval_noise = self.eval_noise_std.unwrap_or(self.noise_std);
        let series = |stream, count: usize, noise| -> Result<Vec<_>> {
            (0..count)
                .map(|i| signals::generate(&self.signal(derive_seed(self.seed, stream, i as u64), noise)))
                .collect()
        };
        let train = series(STREAM_TRAIN, self.training_size, self.noise_std)?;
        let val = series(STREAM_VAL, self.val_size, eval_noise)?;
        let spec = self.signal(derive_seed(self.seed, STREAM_ATTACK, 0), eval_noise);
        let observed = signals::generate(&spec)?;
        let attack_spec = self.attack_spec();
        let (attack, range) = signals::inject_attack(&observed, 0, &attack_spec, Some(&spec))?;
        let benign = signals::generate_clean(&spec)?;
        let l = detector.window.length;
        let span = match self.setting {
            Setting::SingleSequence => poison_span(range, self.signal_length, self.signal_length, l)?,
            Setting::MultiSequence => poison_span(range, self.margin.unwrap_or(self.period), self.signal_length, l)?,
        };
        let problem = PoisonProblem {
            detector,
            train_cfg: self.train_config(),
            train,
            val,
            attack,
            benign,
            attack_range: range,
            span,
            magnitude: attack_spec.effective_magnitude(),
        };
        problem.validate()?;
        Ok(problem)
    }
}

/// Values to sweep; an unset axis takes the base scenario's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub training_size: Option<Vec<usize>>,
    pub magnitude: Option<Vec<f64>>,
    pub location: Option<Vec<AttackLocation>>,
    pub signal_length: Option<Vec<usize>>,
    pub subsequence_length: Option<Vec<usize>>,
    pub train_iterations: Option<Vec<usize>>,
    pub adversarial_iterations: Option<Vec<usize>>,
    pub algorithm: Option<Vec<Algorithm>>,
    pub init_mode: Option<Vec<InitMode>>,
    pub seed: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub poison: PoisonConfig,
    pub axes: GridAxes,
    pub repetitions: usize,
    /// Upper bound on cells times repetitions.
    pub budget: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            schema_version: GRID_SCHEMA,
            scenario: Scenario::default(),
            poison: PoisonConfig::default(),
            axes: GridAxes::default(),
            repetitions: 1,
            budget: 1000,
        }
    }
}

/// Coordinates of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub training_size: usize,
    pub magnitude: f64,
    pub location: AttackLocation,
    pub signal_length: usize,
    pub subsequence_length: usize,
    pub train_iterations: usize,
    pub adversarial_iterations: usize,
    pub algorithm: Algorithm,
    pub init_mode: InitMode,
    pub seed: u64,
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, default: T) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![default]),
        Some(v) if v.is_empty() => Err(Error::InvalidConfig(format!("grid axis `{name}` is empty"))),
        Some(v) => Ok(v.clone()),
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != GRID_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported grid schema version {} (expected {GRID_SCHEMA})",
                self.schema_version
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be positive".into()));
        }
        self.poison.validate()?;
        let runs = self.cells()?.len() * self.repetitions;
        if runs > self.budget {
            return Err(Error::InvalidConfig(format!("grid needs {runs} runs, budget is {}", self.budget)));
        }
        Ok(())
    }

    /// Cartesian product of the axes, first axis slowest.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let a = &self.axes;
        let b = &self.scenario;
        let sizes = axis("training_size", &a.training_size, b.training_size)?;
        let mags = axis("magnitude", &a.magnitude, b.magnitude)?;
        let locs = axis("location", &a.location, b.location)?;
        let lens = axis("signal_length", &a.signal_length, b.signal_length)?;
        let subs = axis("subsequence_length", &a.subsequence_length, b.subsequence_length)?;
        let epochs = axis("train_iterations", &a.train_iterations, b.train_iterations)?;
        let adv = axis("adversarial_iterations", &a.adversarial_iterations, self.poison.max_iters)?;
        let algos = axis("algorithm", &a.algorithm, Algorithm::Interp)?;
        let inits = axis("init_mode", &a.init_mode, self.poison.init_mode)?;
        let seeds = axis("seed", &a.seed, b.seed)?;
        let mut cells = Vec::new();
        for &training_size in &sizes {
            for &magnitude in &mags {
                for &location in &locs {
                    for &signal_length in &lens {
                        for &subsequence_length in &subs {
                            for &train_iterations in &epochs {
                                for &adversarial_iterations in &adv {
                                    for &algorithm in &algos {
                                        for &init_mode in &inits {
                                            for &seed in &seeds {
                                                cells.push(Cell {
                                                    training_size,
                                                    magnitude,
                                                    location,
                                                    signal_length,
                                                    subsequence_length,
                                                    train_iterations,
                                                    adversarial_iterations,
                                                    algorithm,
                                                    init_mode,
                                                    seed,
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }

    /// Seed of repetition `rep` of a cell: `derive_seed(cell.seed, STREAM_REPETITION, rep)`.
    pub fn run_seed(cell: &Cell, rep: usize) -> u64 {
        derive_seed(cell.seed, STREAM_REPETITION, rep as u64)
    }

    /// The scenario and attacker configuration of one run.
    pub fn materialize(&self, cell: &Cell, rep: usize) -> (Scenario, PoisonConfig) {
        let seed = Self::run_seed(cell, rep);
        let scenario = Scenario {
            training_size: cell.training_size,
            magnitude: cell.magnitude,
            location: cell.location,
            signal_length: cell.signal_length,
            subsequence_length: cell.subsequence_length,
            train_iterations: cell.train_iterations,
            seed,
            ..self.scenario.clone()
        };
        let poison = PoisonConfig {
            max_iters: cell.adversarial_iterations,
            init_mode: cell.init_mode,
            seed: derive_seed(seed, STREAM_POISON, 0),
            ..self.poison.clone()
        };
        (scenario, poison)
    }
}

/// One flat row of grid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub training_size: usize,
    pub magnitude: f64,
    pub location: String,
    pub signal_length: usize,
    pub subsequence_length: usize,
    pub train_iterations: usize,
    pub adversarial_iterations: usize,
    pub algorithm: Algorithm,
    pub init_mode: InitMode,
    pub seed: u64,
    pub repetition: usize,
    pub run_seed: u64,
    pub achieved_magnitude: f64,
    pub poison_point_count: usize,
    pub clean_pads: usize,
    pub optimization_iterations: usize,
    pub baseline_alerts: usize,
    pub success: bool,
    pub termination: Option<Termination>,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

impl MetricsRecord {
    fn new(cell: &Cell, rep: usize, outcome: &std::result::Result<PoisonResult, String>, wall: f64) -> Self {
        let ok = outcome.as_ref().ok();
        Self {
            training_size: cell.training_size,
            magnitude: cell.magnitude,
            location: cell.location.to_string(),
            signal_length: cell.signal_length,
            subsequence_length: cell.subsequence_length,
            train_iterations: cell.train_iterations,
            adversarial_iterations: cell.adversarial_iterations,
            algorithm: cell.algorithm,
            init_mode: cell.init_mode,
            seed: cell.seed,
            repetition: rep,
            run_seed: GridSpec::run_seed(cell, rep),
            achieved_magnitude: ok.map_or(0.0, |r| r.achieved_magnitude),
            poison_point_count: ok.map_or(0, |r| r.poison_count()),
            clean_pads: ok.map_or(0, |r| r.clean_pads),
            optimization_iterations: ok.map_or(0, |r| r.iterations),
            baseline_alerts: ok.map_or(0, |r| r.baseline_alerts.total()),
            success: ok.is_some_and(|r| r.success),
            termination: ok.map(|r| r.termination),
            error: outcome.as_ref().err().cloned(),
            wall_time_secs: wall,
        }
    }
}

/// A grid record together with the full poisoning result, when one exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub cell: Cell,
    pub record: MetricsRecord,
    pub result: Option<PoisonResult>,
}

impl GridRun {
    fn key(&self) -> String {
        run_key(&self.cell, self.record.repetition)
    }
}

fn run_key(cell: &Cell, rep: usize) -> String {
    serde_json::to_string(&(cell, rep)).expect("cells serialize")
}

/// Run one repetition of one cell. Failures end up in the record.
pub fn run_cell(spec: &GridSpec, cell: &Cell, rep: usize) -> GridRun {
    let started = Instant::now();
    let (scenario, poison) = spec.materialize(cell, rep);
    let outcome = scenario
        .build()
        .and_then(|problem| run_poisoning(&problem, cell.algorithm, &poison))
        .map_err(|e| e.to_string());
    let record = MetricsRecord::new(cell, rep, &outcome, started.elapsed().as_secs_f64());
    GridRun {
        cell: cell.clone(),
        record,
        result: outcome.ok(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    /// JSON-lines file that receives each finished run and is read back on resume.
    pub journal: Option<PathBuf>,
}

fn load_journal(path: &Path) -> Result<HashMap<String, GridRun>> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(Error::io(path, e)),
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn last line from an interrupted run is simply recomputed.
        if let Ok(run) = serde_json::from_str::<GridRun>(&line) {
            done.insert(run.key(), run);
        }
    }
    Ok(done)
}

fn sort_runs(runs: &mut [GridRun]) {
    runs.sort_by(|a, b| {
        let (x, y) = (&a.record, &b.record);
        x.training_size
            .cmp(&y.training_size)
            .then(x.magnitude.total_cmp(&y.magnitude))
            .then(x.location.cmp(&y.location))
            .then(x.signal_length.cmp(&y.signal_length))
            .then(x.subsequence_length.cmp(&y.subsequence_length))
            .then(x.train_iterations.cmp(&y.train_iterations))
            .then(x.adversarial_iterations.cmp(&y.adversarial_iterations))
            .then(x.algorithm.to_string().cmp(&y.algorithm.to_string()))
            .then(x.init_mode.to_string().cmp(&y.init_mode.to_string()))
            .then(x.seed.cmp(&y.seed))
            .then(x.repetition.cmp(&y.repetition))
    });
}

/// Run every (cell, repetition) of the grid in parallel. With a journal,
/// finished runs are appended as they complete and skipped on the next call.
pub fn run_grid(spec: &GridSpec, opts: &GridOptions) -> Result<Vec<GridRun>> {
    spec.validate()?;
    let cells = spec.cells()?;
    let mut done = match &opts.journal {
        Some(path) => load_journal(path)?,
        None => HashMap::new(),
    };
    let mut finished = Vec::new();
    let mut pending = Vec::new();
    for cell in &cells {
        for rep in 0..spec.repetitions {
            match done.remove(&run_key(cell, rep)) {
                Some(run) => finished.push(run),
                None => pending.push((cell, rep)),
            }
        }
    }
    let journal = match &opts.journal {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some((path.clone(), Mutex::new(f)))
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let fresh: Vec<Result<GridRun>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&(cell, rep)| {
                let run = run_cell(spec, cell, rep);
                if let Some((path, file)) = &journal {
                    let mut line = serde_json::to_string(&run)?;
                    line.push('\n');
                    let mut f = file.lock().expect("journal lock");
                    f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))?;
                }
                Ok(run)
            })
            .collect()
    });
    for run in fresh {
        finished.push(run?);
    }
    sort_runs(&mut finished);
    Ok(finished)
}

/// Ascending magnitude sweep settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub step: f64,
    /// Largest magnitude tried.
    pub max_magnitude: f64,
    /// Keep going after the first failure. The default stops early, which
    /// assumes larger attacks are never easier to hide.
    pub exhaustive: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            max_magnitude: 1.0,
            exhaustive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub magnitude: f64,
    pub result: Option<PoisonResult>,
    pub error: Option<String>,
}

impl SweepPoint {
    pub fn success(&self) -> bool {
        self.result.as_ref().is_some_and(|r| r.success)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeSweep {
    pub max_magnitude: f64,
    pub points: Vec<SweepPoint>,
}

/// Largest magnitude on the grid `step, 2·step, …` that poisoning reaches
/// for this scenario; 0 when the first step already fails.
pub fn max_poisonable_magnitude(
    scenario: &Scenario,
    algorithm: Algorithm,
    cfg: &PoisonConfig,
    sweep: &SweepConfig,
) -> Result<MagnitudeSweep> {
    if !(sweep.step > 0.0 && sweep.step.is_finite()) {
        return Err(Error::InvalidConfig("sweep step must be positive".into()));
    }
    let steps = (sweep.max_magnitude / sweep.step + 1e-9).floor() as usize;
    let mut best = 0.0;
    let mut points = Vec::new();
    for i in 1..=steps {
        // Rounded so that 3 × 0.05 prints as 0.15.
        let magnitude = ((i as f64 * sweep.step) * 1e9).round() / 1e9;
        let sc = Scenario {
            magnitude,
            ..scenario.clone()
        };
        let outcome = sc.build().and_then(|p| run_poisoning(&p, algorithm, cfg));
        let point = match outcome {
            Ok(r) => SweepPoint {
                magnitude,
                result: Some(r),
                error: None,
            },
            Err(e) => SweepPoint {
                magnitude,
                result: None,
                error: Some(e.to_string()),
            },
        };
        let ok = point.success();
        points.push(point);
        if ok {
            best = magnitude;
        } else if !sweep.exhaustive {
            break;
        }
    }
    Ok(MagnitudeSweep {
        max_magnitude: best,
        points,
    })
}

/// One point of a plot series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

fn series_label(r: &MetricsRecord) -> String {
    format!("{}/{}/{}", r.algorithm, r.init_mode, r.location)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean poison count of successful runs against magnitude, one series per training size.
pub fn points_vs_magnitude(records: &[MetricsRecord]) -> Vec<PlotPoint> {
    let mut groups: BTreeMap<(String, usize, u64), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.success) {
        let key = (series_label(r), r.training_size, r.magnitude.to_bits());
        groups.entry(key).or_default().push(r.poison_point_count as f64);
    }
    let mut out: Vec<PlotPoint> = groups
        .into_iter()
        .map(|((label, k, m), v)| PlotPoint {
            series: format!("{label}/k={k}"),
            x: f64::from_bits(m),
            y: mean(&v),
        })
        .collect();
    out.sort_by(|a, b| a.series.cmp(&b.series).then(a.x.total_cmp(&b.x)));
    out
}

/// Largest successful magnitude against training size.
pub fn max_magnitude_vs_size(records: &[MetricsRecord]) -> Vec<PlotPoint> {
    let mut groups: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for r in records {
        let best = groups.entry((series_label(r), r.training_size)).or_insert(0.0);
        if r.success && r.magnitude > *best {
            *best = r.magnitude;
        }
    }
    groups
        .into_iter()
        .map(|((series, k), y)| PlotPoint { series, x: k as f64, y })
        .collect()
}

/// Mean optimization iterations against magnitude, per algorithm and size.
pub fn iterations_vs_magnitude(records: &[MetricsRecord]) -> Vec<PlotPoint> {
    let mut groups: BTreeMap<(String, usize, u64), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        let key = (series_label(r), r.training_size, r.magnitude.to_bits());
        groups.entry(key).or_default().push(r.optimization_iterations as f64);
    }
    let mut out: Vec<PlotPoint> = groups
        .into_iter()
        .map(|((label, k, m), v)| PlotPoint {
            series: format!("{label}/k={k}"),
            x: f64::from_bits(m),
            y: mean(&v),
        })
        .collect();
    out.sort_by(|a, b| a.series.cmp(&b.series).then(a.x.total_cmp(&b.x)));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportPaths {
    pub records_csv: PathBuf,
    pub runs_json: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `records.csv`, `runs.json` and one CSV per plot family into `dir`.
pub fn export(runs: &[GridRun], dir: &Path) -> Result<ExportPaths> {
    if runs.is_empty() {
        return Err(Error::Empty("no records to export".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<MetricsRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let records_csv = dir.join("records.csv");
    csv_file(&records_csv, &records)?;
    let runs_json = dir.join("runs.json");
    let f = File::create(&runs_json).map_err(|e| Error::io(&runs_json, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, runs)?;
    w.flush().map_err(|e| Error::io(&runs_json, e))?;
    let mut plots = Vec::new();
    for (name, rows) in [
        ("plot_points_vs_magnitude.csv", points_vs_magnitude(&records)),
        ("plot_max_magnitude_vs_size.csv", max_magnitude_vs_size(&records)),
        ("plot_iterations.csv", iterations_vs_magnitude(&records)),
    ] {
        let path = dir.join(name);
        if rows.is_empty() {
            // Header only, so downstream scripts find the file.
            fs::write(&path, "series,x,y\n").map_err(|e| Error::io(&path, e))?;
        } else {
            csv_file(&path, &rows)?;
        }
        plots.push(path);
    }
    Ok(ExportPaths {
        records_csv,
        runs_json,
        plots,
    })
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
