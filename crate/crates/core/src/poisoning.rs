//! Poisoning of an online-retrained detector.
//!
//! The attacker owns a target attack series and feeds the detector a
//! sequence of poisoning points. Each point is a short series covering the
//! attack footprint plus context. A point is only usable if the detector
//! that is live when it arrives (trained on the clean data plus all earlier
//! points) raises no alert on it. After retraining, the attack must pass
//! while validation data stays alert-free.
//!
//! Two generators are provided: an interpolation from the benign signal
//! toward the attack, and a gradient method that differentiates the attack
//! loss through the whole gradient-descent training run by walking the
//! weight trajectory backwards with Hessian-vector products.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{self, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams, TrainConfig, TrainTrajectory};
use crate::signals::AttackRange;
use crate::timeseries::SeriesMatrix;

pub const RESULT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Interp,
    Backgrad,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Interp => "interp",
            Algorithm::Backgrad => "backgrad",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum RetrainMode {
    /// Poisoning points are appended to the full training set.
    #[default]
    Append,
    /// A fixed-size random subset of old data plus the newest point.
    Reservoir { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Start from the unattacked signal.
    #[default]
    Benign,
    /// Descend the detector loss from the attack until it stops alerting.
    AttackBased,
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMode::Benign => "benign",
            InitMode::AttackBased => "attack-based",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Evaluate each reverse step at the stored weights `w_{t-1}` (exact).
    #[default]
    Checkpointed,
    /// Recover earlier weights by re-adding the gradient step.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianScope {
    /// Second-order terms over the whole training batch.
    #[default]
    FullBatch,
    /// Second-order terms from the candidate's windows only.
    CandidateOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GoalMet,
    LambdaFloor,
    IterBudget,
    OverPoisonUnrecoverable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoisonConfig {
    /// Step size of the gradient method.
    pub adv_learning_rate: f64,
    pub decay: f64,
    pub lambda_eps: f64,
    pub max_iters: usize,
    /// Initial interpolation rate; capped at 2 (a rate of 2 jumps onto the attack).
    pub interp_rate: f64,
    pub interp_eps: f64,
    /// Clean sequences that may be added when validation starts alerting.
    /// `None` means the training-set size.
    pub clean_pad_budget: Option<usize>,
    pub retrain_mode: RetrainMode,
    pub init_mode: InitMode,
    pub grad_mode: GradMode,
    pub hessian_scope: HessianScope,
    /// Decay λ after this many accepted steps without attack-loss progress.
    /// Zero disables.
    pub stall_patience: usize,
    pub init_max_steps: usize,
    pub init_step: f64,
    /// Optional clamp applied to every candidate value.
    pub value_bounds: Option<[f64; 2]>,
    /// Retrain from the previous weights instead of the seeded init.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            adv_learning_rate: 0.05,
            decay: 0.9,
            lambda_eps: 1e-5,
            max_iters: 200,
            interp_rate: 1.0,
            interp_eps: 1e-7,
            clean_pad_budget: None,
            retrain_mode: RetrainMode::Append,
            init_mode: InitMode::Benign,
            grad_mode: GradMode::Checkpointed,
            hessian_scope: HessianScope::FullBatch,
            stall_patience: 1,
            init_max_steps: 500,
            init_step: 0.01,
            value_bounds: None,
            warm_start: false,
            seed: 0,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay {} must lie in (0, 1)", self.decay));
        }
        if !(self.lambda_eps > 0.0) || !(self.adv_learning_rate > self.lambda_eps) {
            return bad(format!(
                "adversarial learning rate {} must exceed lambda_eps {} > 0",
                self.adv_learning_rate, self.lambda_eps
            ));
        }
        if !(self.interp_rate > 0.0) || !(self.interp_eps > 0.0) {
            return bad("interpolation rate and eps must be positive".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.init_step > 0.0) {
            return bad(format!("init step {} must be positive", self.init_step));
        }
        if let RetrainMode::Reservoir { size } = self.retrain_mode {
            if size < 2 {
                return bad("reservoir size must be at least 2".into());
            }
        }
        if let Some([lo, hi]) = self.value_bounds {
            if !(lo < hi) {
                return bad(format!("value bounds [{lo}, {hi}] are empty"));
            }
        }
        Ok(())
    }
}

/// Everything fixed for one poisoning run.
#[derive(Debug, Clone)]
pub struct PoisonProblem {
    pub detector: DetectorConfig,
    pub train_cfg: TrainConfig,
    pub train: Vec<SeriesMatrix>,
    pub val: Vec<SeriesMatrix>,
    /// Series carrying the attack.
    pub attack: SeriesMatrix,
    /// Benign counterpart of `attack`, used for benign initialization and
    /// for measuring reached magnitude.
    pub benign: SeriesMatrix,
    pub attack_range: AttackRange,
    /// Rows of `attack` covered by one poisoning point.
    pub span: AttackRange,
    /// Requested (clipped) attack magnitude.
    pub magnitude: f64,
}

impl PoisonProblem {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train_cfg.validate()?;
        if self.train.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let n = self.detector.features();
        for s in self.train.iter().chain(&self.val).chain([&self.attack, &self.benign]) {
            if s.features() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: s.features(),
                });
            }
        }
        if self.benign.rows() != self.attack.rows() {
            return Err(Error::DimensionMismatch {
                expected: self.attack.rows(),
                actual: self.benign.rows(),
            });
        }
        let rows = self.attack.rows();
        for r in [self.attack_range, self.span] {
            if r.start >= r.end || r.end > rows {
                return Err(Error::RangeOverflow {
                    start: r.start,
                    end: r.end,
                    rows,
                });
            }
        }
        if self.span.start > self.attack_range.start || self.span.end < self.attack_range.end {
            return Err(Error::InvalidConfig("poison span must contain the attack range".into()));
        }
        if self.span.len() < self.detector.window.length {
            return Err(Error::WindowTooLong {
                length: self.detector.window.length,
                rows: self.span.len(),
            });
        }
        Ok(())
    }

    pub fn attack_span(&self) -> Result<SeriesMatrix> {
        self.attack.slice_rows(self.span.start, self.span.end)
    }

    pub fn benign_span(&self) -> Result<SeriesMatrix> {
        self.benign.slice_rows(self.span.start, self.span.end)
    }

    /// Largest deviation of a span-shaped point from the benign signal over
    /// the attack rows.
    pub fn deviation(&self, point: &SeriesMatrix) -> f64 {
        let b = self.benign.values();
        let p = point.values();
        let mut d: f64 = 0.0;
        for t in self.attack_range.start..self.attack_range.end {
            let r = t - self.span.start;
            for j in 0..b.ncols() {
                d = d.max((p[[r, j]] - b[[t, j]]).abs());
            }
        }
        d
    }
}

/// Rows a poisoning point covers: the attack range padded by `margin` on
/// both sides, clamped to the series and widened to at least one window.
pub fn poison_span(range: AttackRange, margin: usize, rows: usize, window: usize) -> Result<AttackRange> {
    if range.end > rows || range.start >= range.end {
        return Err(Error::RangeOverflow {
            start: range.start,
            end: range.end,
            rows,
        });
    }
    if window > rows {
        return Err(Error::WindowTooLong { length: window, rows });
    }
    let mut start = range.start.saturating_sub(margin);
    let mut end = (range.end + margin).min(rows);
    while end - start < window {
        if end < rows {
            end += 1;
        } else {
            start -= 1;
        }
    }
    Ok(AttackRange { start, end })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointKind {
    Poison,
    CleanPad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPoint {
    pub values: SeriesMatrix,
    pub kind: PointKind,
    pub iteration_born: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AlertBreakdown {
    pub val: usize,
    pub attack: usize,
    /// Alerts on the accepted points and the candidate.
    pub poisons: usize,
}

impl AlertBreakdown {
    pub fn total(&self) -> usize {
        self.val + self.attack + self.poisons
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// λ for the gradient method, the interpolation rate otherwise.
    pub step_size: f64,
    pub accepted: bool,
    pub committed: bool,
    pub candidate_alerts: usize,
    pub alerts: Option<AlertBreakdown>,
    pub attack_loss: Option<f64>,
    pub clean_pads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonResult {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub init_mode: InitMode,
    /// Attack-based initialization did not converge and benign data was used.
    pub init_fallback: bool,
    pub points: Vec<PoisonPoint>,
    pub clean_pads: usize,
    pub iterations: usize,
    pub success: bool,
    pub requested_magnitude: f64,
    pub achieved_magnitude: f64,
    pub termination: Termination,
    pub baseline_alerts: AlertBreakdown,
    pub final_alerts: Option<AlertBreakdown>,
    pub log: Vec<IterationLog>,
    pub wall_time_secs: f64,
}

impl PoisonResult {
    pub fn poison_count(&self) -> usize {
        self.points.iter().filter(|p| p.kind == PointKind::Poison).count()
    }

    /// JSON with the timing field zeroed, for reproducibility comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.wall_time_secs = 0.0;
        Ok(serde_json::to_string_pretty(&c)?)
    }
}

/// Windows of the candidate inside a training batch.
#[derive(Debug, Clone)]
struct CandidateRows {
    rows: Vec<(usize, usize)>,
    shape: (usize, usize),
}

/// A retrained detector together with what the attacker observes.
#[derive(Debug, Clone)]
pub struct TrainTest {
    pub params: ModelParams,
    pub trajectory: TrainTrajectory,
    pub final_loss: f64,
    pub alerts: AlertBreakdown,
    pub candidate_alerts: usize,
    pub attack_loss: f64,
    batch: Array2<f64>,
    candidate: Option<CandidateRows>,
}

fn reservoir_rng(seed: u64, pool: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (pool as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn training_set<'a>(
    problem: &'a PoisonProblem,
    poison_set: &'a [PoisonPoint],
    candidate: Option<&'a SeriesMatrix>,
    cfg: &PoisonConfig,
) -> Vec<&'a SeriesMatrix> {
    let mut pool: Vec<&SeriesMatrix> = problem.train.iter().chain(poison_set.iter().map(|p| &p.values)).collect();
    if let RetrainMode::Reservoir { size } = cfg.retrain_mode {
        let keep = size - usize::from(candidate.is_some());
        if pool.len() > keep {
            let mut rng = reservoir_rng(cfg.seed, pool.len());
            let mut idx = rand::seq::index::sample(&mut rng, pool.len(), keep).into_vec();
            idx.sort_unstable();
            pool = idx.into_iter().map(|i| pool[i]).collect();
        }
    }
    pool.extend(candidate);
    pool
}

fn train_test_from(
    problem: &PoisonProblem,
    start: &ModelParams,
    poison_set: &[PoisonPoint],
    candidate: Option<&SeriesMatrix>,
    cfg: &PoisonConfig,
    record: bool,
) -> Result<TrainTest> {
    let det = &problem.detector;
    let set = training_set(problem, poison_set, candidate, cfg);
    let batch = detector::training_batch(set.iter().copied(), &det.window)?;
    let candidate_rows = match candidate {
        Some(c) => {
            let offset = batch.nrows() - det.window.count(c.rows())?;
            Some(CandidateRows {
                rows: detector::window_rows(c.rows(), &det.window, offset)?,
                shape: c.values().dim(),
            })
        }
        None => None,
    };
    let train_cfg = TrainConfig {
        record_trajectory: record,
        ..problem.train_cfg.clone()
    };
    let outcome = nn::train(start, batch.view(), &train_cfg)?;
    let params = outcome.params;
    let val = detector::count_alerts(&params, &problem.val, det)?;
    let attack = detector::score(&params, &problem.attack, det)?.alert_count;
    let mut poisons = detector::count_alerts(&params, poison_set.iter().map(|p| &p.values), det)?;
    let candidate_alerts = match candidate {
        Some(c) => detector::score(&params, c, det)?.alert_count,
        None => 0,
    };
    poisons += candidate_alerts;
    let attack_loss = detector::series_objective(&params, &problem.attack, det)?;
    Ok(TrainTest {
        params,
        trajectory: outcome.trajectory,
        final_loss: outcome.final_loss,
        alerts: AlertBreakdown { val, attack, poisons },
        candidate_alerts,
        attack_loss,
        batch,
        candidate: candidate_rows,
    })
}

/// Retrain from the seeded initialization on `train ∪ poison_set ∪
/// {candidate}` and count alerts on validation, the attack series and every
/// poisoning input.
pub fn train_test(
    problem: &PoisonProblem,
    poison_set: &[PoisonPoint],
    candidate: Option<&SeriesMatrix>,
    cfg: &PoisonConfig,
    record: bool,
) -> Result<TrainTest> {
    let init = ModelParams::init(&problem.detector.model)?;
    train_test_from(problem, &init, poison_set, candidate, cfg, record)
}

/// Retrain on the points of a finished run in the same configuration that
/// produced its last model.
pub fn replay(problem: &PoisonProblem, result: &PoisonResult, cfg: &PoisonConfig) -> Result<TrainTest> {
    match result.points.split_last() {
        Some((last, prefix)) => train_test(problem, prefix, Some(&last.values), cfg, false),
        None => train_test(problem, &[], None, cfg, false),
    }
}

/// Weights visited when walking a recorded trajectory backwards:
/// `w_{T-1}, ..., w_0`.
pub fn reverse_weights(trajectory: &TrainTrajectory) -> Result<impl Iterator<Item = &[f64]>> {
    if !trajectory.is_recorded() {
        return Err(Error::Trajectory(format!(
            "{} checkpoints recorded for {} steps",
            trajectory.checkpoints.len(),
            trajectory.steps
        )));
    }
    Ok(trajectory.checkpoints[..trajectory.steps].iter().rev().map(Vec::as_slice))
}

fn candidate_batch(batch: &Array2<f64>, cand: &CandidateRows) -> Array2<f64> {
    let idx: Vec<usize> = cand.rows.iter().map(|&(r, _)| r).collect();
    batch.select(Axis(0), &idx)
}

/// Gradient of the attack loss at the end of training with respect to the
/// candidate's values.
///
/// The adjoint of the final weights is walked back through every gradient
/// step; each step contributes `-α · ∂²𝓛/∂x∂w · dw` to the candidate and
/// updates `dw` with `-α · ∂²𝓛/∂w² · dw`.
pub fn get_poison_grad(
    tt: &TrainTest,
    attack: &SeriesMatrix,
    det: &DetectorConfig,
    mode: GradMode,
    scope: HessianScope,
) -> Result<Array2<f64>> {
    let cand = tt
        .candidate
        .as_ref()
        .ok_or_else(|| Error::Trajectory("training run has no candidate".into()))?;
    let alpha = tt.trajectory.learning_rate;
    let l = det.window.length;
    let n = cand.shape.1;
    let mut dw = detector::series_objective_grads(&tt.params, attack, det)?.grad_w;
    let mut dy = Array2::<f64>::zeros(cand.shape);

    // Candidate rows only enter the loss through their own windows, so the
    // restricted scope just drops the other rows and rescales the mean.
    let sub;
    let (hess_batch, local_rows, scale): (ArrayView2<f64>, Vec<(usize, usize)>, f64) = match scope {
        HessianScope::FullBatch => (tt.batch.view(), cand.rows.clone(), 1.0),
        HessianScope::CandidateOnly => {
            sub = candidate_batch(&tt.batch, cand);
            let rows = cand.rows.iter().enumerate().map(|(i, &(_, s))| (i, s)).collect();
            (sub.view(), rows, sub.nrows() as f64 / tt.batch.nrows() as f64)
        }
    };

    let step = |w: &[f64], dw: &mut Vec<f64>, dy: &mut Array2<f64>| -> Result<Vec<f64>> {
        let p = tt.params.with_flat(w.to_vec())?;
        let h = p.hvp(hess_batch, dw)?;
        for &(r, s) in &local_rows {
            let row = h.xw.row(r);
            for k in 0..l {
                for j in 0..n {
                    dy[[s + k, j]] -= alpha * scale * row[k * n + j];
                }
            }
        }
        for (d, v) in dw.iter_mut().zip(&h.ww) {
            *d -= alpha * scale * v;
        }
        Ok(h.grad_w)
    };

    match mode {
        GradMode::Checkpointed => {
            for w in reverse_weights(&tt.trajectory)? {
                step(w, &mut dw, &mut dy)?;
            }
        }
        GradMode::Literal => {
            let mut w = tt.params.flat().to_vec();
            for _ in 0..tt.trajectory.steps {
                let g = step(&w, &mut dw, &mut dy)?;
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi += alpha * gi;
                }
            }
        }
    }
    Ok(dy)
}

/// Starting poison and how it was obtained.
#[derive(Debug, Clone)]
pub struct InitPoison {
    pub values: SeriesMatrix,
    pub fell_back: bool,
    pub steps: usize,
}

/// Initial poisoning point over the poison span.
///
/// Attack-based mode starts from the attack and takes normalized steps down
/// the detector's reconstruction loss until the point raises no alerts,
/// which yields the closest alert-free values to the attack along that path.
pub fn init_poison(problem: &PoisonProblem, params: &ModelParams, cfg: &PoisonConfig) -> Result<InitPoison> {
    let benign = problem.benign_span()?;
    if cfg.init_mode == InitMode::Benign {
        return Ok(InitPoison {
            values: benign,
            fell_back: false,
            steps: 0,
        });
    }
    let det = &problem.detector;
    let mut y = problem.attack_span()?;
    for steps in 0..=cfg.init_max_steps {
        if detector::score(params, &y, det)?.alert_count == 0 {
            return Ok(InitPoison {
                values: y,
                fell_back: false,
                steps,
            });
        }
        if steps == cfg.init_max_steps {
            break;
        }
        let g = detector::series_objective_grads(params, &y, det)?.grad_series;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(gmax > 0.0) {
            break;
        }
        let next = clamp(&y.values().to_owned() - &(g * (cfg.init_step / gmax)), cfg);
        y = y.with_values(next)?;
    }
    Ok(InitPoison {
        values: benign,
        fell_back: true,
        steps: cfg.init_max_steps,
    })
}

fn clamp(mut v: Array2<f64>, cfg: &PoisonConfig) -> Array2<f64> {
    if let Some([lo, hi]) = cfg.value_bounds {
        v.mapv_inplace(|x| x.clamp(lo, hi));
    }
    v
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Mutable state shared by both generators.
struct Session<'a> {
    problem: &'a PoisonProblem,
    cfg: &'a PoisonConfig,
    init: ModelParams,
    last: Option<ModelParams>,
    /// Model trained on `train ∪ points`, keyed by `points.len()`.
    base: Option<(usize, ModelParams)>,
    points: Vec<PoisonPoint>,
    pad_rng: ChaCha8Rng,
    pads: usize,
    pad_budget: usize,
    log: Vec<IterationLog>,
}

impl<'a> Session<'a> {
    fn new(problem: &'a PoisonProblem, cfg: &'a PoisonConfig) -> Result<Self> {
        problem.validate()?;
        cfg.validate()?;
        Ok(Self {
            problem,
            cfg,
            init: ModelParams::init(&problem.detector.model)?,
            last: None,
            base: None,
            points: Vec::new(),
            pad_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            pads: 0,
            pad_budget: cfg.clean_pad_budget.unwrap_or(problem.train.len()),
            log: Vec::new(),
        })
    }

    fn start(&self) -> &ModelParams {
        match (&self.last, self.cfg.warm_start) {
            (Some(p), true) => p,
            _ => &self.init,
        }
    }

    fn train(&mut self, candidate: Option<&SeriesMatrix>, record: bool) -> Result<TrainTest> {
        let tt = train_test_from(self.problem, self.start(), &self.points, candidate, self.cfg, record)?;
        if candidate.is_none() {
            self.base = Some((self.points.len(), tt.params.clone()));
        }
        self.last = Some(tt.params.clone());
        Ok(tt)
    }

    fn base(&mut self) -> Result<ModelParams> {
        match &self.base {
            Some((n, p)) if *n == self.points.len() => Ok(p.clone()),
            _ => Ok(self.train(None, false)?.params),
        }
    }

    /// Alerts the live detector raises on a candidate before retraining.
    fn screen(&mut self, candidate: &SeriesMatrix) -> Result<usize> {
        let base = self.base()?;
        Ok(detector::score(&base, candidate, &self.problem.detector)?.alert_count)
    }

    fn push(&mut self, values: SeriesMatrix, iteration: usize) {
        self.points.push(PoisonPoint {
            values,
            kind: PointKind::Poison,
            iteration_born: iteration,
        });
    }

    /// Record that the model `tt`, trained with `candidate` last, is also the
    /// model for the point set after committing that candidate.
    fn adopt(&mut self, tt: &TrainTest) {
        if self.cfg.retrain_mode == RetrainMode::Append {
            self.base = Some((self.points.len(), tt.params.clone()));
        }
    }

    fn pad(&mut self, iteration: usize) -> bool {
        if self.pads >= self.pad_budget {
            return false;
        }
        let i = self.pad_rng.random_range(0..self.problem.train.len());
        self.points.push(PoisonPoint {
            values: self.problem.train[i].clone(),
            kind: PointKind::CleanPad,
            iteration_born: iteration,
        });
        self.pads += 1;
        true
    }

    /// Train with the candidate, padding with clean data while validation
    /// alerts. `None` when the padding budget runs out.
    fn train_clean(&mut self, candidate: &SeriesMatrix, record: bool, iteration: usize) -> Result<Option<TrainTest>> {
        loop {
            let tt = self.train(Some(candidate), record)?;
            if tt.alerts.val == 0 {
                return Ok(Some(tt));
            }
            if !self.pad(iteration) {
                return Ok(None);
            }
        }
    }

    fn baseline(&mut self) -> Result<AlertBreakdown> {
        let base = self.base()?;
        let det = &self.problem.detector;
        Ok(AlertBreakdown {
            val: detector::count_alerts(&base, &self.problem.val, det)?,
            attack: detector::score(&base, &self.problem.attack, det)?.alert_count,
            poisons: 0,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        algorithm: Algorithm,
        init: &InitPoison,
        baseline: AlertBreakdown,
        iterations: usize,
        termination: Termination,
        final_alerts: Option<AlertBreakdown>,
        current: Option<&SeriesMatrix>,
        started: Instant,
    ) -> PoisonResult {
        let success = termination == Termination::GoalMet;
        let achieved = if success {
            self.problem.magnitude
        } else {
            current
                .map(|c| self.problem.deviation(c))
                .unwrap_or(0.0)
                .min(self.problem.magnitude)
        };
        PoisonResult {
            schema_version: RESULT_SCHEMA,
            algorithm,
            init_mode: self.cfg.init_mode,
            init_fallback: init.fell_back,
            clean_pads: self.pads,
            points: self.points,
            iterations,
            success,
            requested_magnitude: self.problem.magnitude,
            achieved_magnitude: achieved,
            termination,
            baseline_alerts: baseline,
            final_alerts,
            log: self.log,
            wall_time_secs: started.elapsed().as_secs_f64(),
        }
    }
}

fn passes(a: &AlertBreakdown) -> bool {
    a.val == 0 && a.attack == 0
}

/// Gradient-based poisoning.
///
/// Each iteration steps the candidate against the normalized poison
/// gradient. A step the live detector accepts replaces the candidate; a
/// rejected step commits the last good candidate to the point set and
/// shrinks λ. The run ends when retraining with the candidate lets the
/// attack through with no alerts anywhere, when λ reaches its floor, or when
/// the iteration budget is spent.
pub fn poison_backgrad(problem: &PoisonProblem, init: &InitPoison, cfg: &PoisonConfig) -> Result<PoisonResult> {
    let started = Instant::now();
    let mut s = Session::new(problem, cfg)?;
    let baseline = s.baseline()?;
    if passes(&baseline) {
        return Ok(s.finish(Algorithm::Backgrad, init, baseline, 0, Termination::GoalMet, Some(baseline), None, started));
    }
    let mut y = init.values.clone();
    if s.screen(&y)? > 0 {
        return Err(Error::InvalidConfig("initial poison raises alerts".into()));
    }
    let record = cfg.grad_mode == GradMode::Checkpointed;
    let Some(mut cur) = s.train_clean(&y, record, 0)? else {
        return Ok(s.finish(Algorithm::Backgrad, init, baseline, 0, Termination::OverPoisonUnrecoverable, None, Some(&y), started));
    };
    let mut lambda = cfg.adv_learning_rate;
    let mut committed = false;
    let mut stalled = 0;
    let mut iters = 0;
    let termination = loop {
        if cur.alerts.total() == 0 {
            if !committed {
                s.push(y.clone(), iters);
            }
            break Termination::GoalMet;
        }
        if iters == cfg.max_iters {
            break Termination::IterBudget;
        }
        iters += 1;
        let g = get_poison_grad(&cur, &problem.attack, &problem.detector, cfg.grad_mode, cfg.hessian_scope)?;
        let gmax = max_abs(&g);
        if !(gmax > 0.0 && gmax.is_finite()) {
            break Termination::LambdaFloor;
        }
        let y_new = y.with_values(clamp(&y.values() - &(g * (lambda / gmax)), cfg))?;
        let screened = s.screen(&y_new)?;
        let mut entry = IterationLog {
            iteration: iters,
            step_size: lambda,
            accepted: false,
            committed: false,
            candidate_alerts: screened,
            alerts: None,
            attack_loss: None,
            clean_pads: s.pads,
        };
        if screened == 0 {
            let Some(next) = s.train_clean(&y_new, record, iters)? else {
                entry.clean_pads = s.pads;
                s.log.push(entry);
                break Termination::OverPoisonUnrecoverable;
            };
            entry.accepted = true;
            entry.alerts = Some(next.alerts);
            entry.attack_loss = Some(next.attack_loss);
            entry.clean_pads = s.pads;
            if next.attack_loss < cur.attack_loss {
                stalled = 0;
                lambda = cfg.adv_learning_rate;
            } else {
                stalled += 1;
                if cfg.stall_patience > 0 && stalled >= cfg.stall_patience {
                    stalled = 0;
                    lambda *= cfg.decay;
                }
            }
            y = y_new;
            cur = next;
            committed = false;
            s.log.push(entry);
            if lambda <= cfg.lambda_eps {
                break Termination::LambdaFloor;
            }
        } else {
            if !committed {
                s.push(y.clone(), iters);
                s.adopt(&cur);
                committed = true;
                entry.committed = true;
                if cfg.retrain_mode != RetrainMode::Append {
                    let prefix_len = s.points.len() - 1;
                    let last = s.points.pop().expect("just pushed");
                    cur = train_test_from(problem, s.start(), &s.points[..prefix_len], Some(&last.values), cfg, record)?;
                    s.points.push(last);
                }
            }
            s.log.push(entry);
            lambda *= cfg.decay;
            if lambda <= cfg.lambda_eps {
                break Termination::LambdaFloor;
            }
        }
    };
    let final_alerts = Some(cur.alerts);
    Ok(s.finish(Algorithm::Backgrad, init, baseline, iters, termination, final_alerts, Some(&y), started))
}

/// Interpolative poisoning: move from the initial point toward the attack
/// by a fraction of the remaining gap, shrinking the fraction whenever the
/// live detector alerts on the proposal.
pub fn poison_interp(problem: &PoisonProblem, init: &InitPoison, cfg: &PoisonConfig) -> Result<PoisonResult> {
    let started = Instant::now();
    let mut s = Session::new(problem, cfg)?;
    let baseline = s.baseline()?;
    if passes(&baseline) {
        return Ok(s.finish(Algorithm::Interp, init, baseline, 0, Termination::GoalMet, Some(baseline), None, started));
    }
    let target = problem.attack_span()?;
    let mut y = init.values.clone();
    if s.screen(&y)? > 0 {
        return Err(Error::InvalidConfig("initial poison raises alerts".into()));
    }
    let mut rate = cfg.interp_rate.min(2.0);
    let mut iters = 0;
    let mut final_alerts = None;
    let termination = loop {
        let step = (&target.values() - &y.values()) * (rate / 2.0);
        if max_abs(&step) <= cfg.interp_eps {
            break Termination::LambdaFloor;
        }
        if iters == cfg.max_iters {
            break Termination::IterBudget;
        }
        iters += 1;
        let y_new = y.with_values(clamp(&y.values() + &step, cfg))?;
        let screened = s.screen(&y_new)?;
        let mut entry = IterationLog {
            iteration: iters,
            step_size: rate,
            accepted: false,
            committed: false,
            candidate_alerts: screened,
            alerts: None,
            attack_loss: None,
            clean_pads: s.pads,
        };
        if screened > 0 {
            rate *= cfg.decay;
            s.log.push(entry);
            continue;
        }
        let Some(next) = s.train_clean(&y_new, false, iters)? else {
            entry.clean_pads = s.pads;
            s.log.push(entry);
            break Termination::OverPoisonUnrecoverable;
        };
        s.push(y_new.clone(), iters);
        s.adopt(&next);
        y = y_new;
        rate = (rate / cfg.decay).min(2.0);
        entry.accepted = true;
        entry.committed = true;
        entry.alerts = Some(next.alerts);
        entry.attack_loss = Some(next.attack_loss);
        entry.clean_pads = s.pads;
        s.log.push(entry);
        final_alerts = Some(next.alerts);
        if next.alerts.total() == 0 {
            break Termination::GoalMet;
        }
    };
    Ok(s.finish(Algorithm::Interp, init, baseline, iters, termination, final_alerts, Some(&y), started))
}

/// Train the clean detector, pick the initial point and run `algorithm`.
pub fn run_poisoning(problem: &PoisonProblem, algorithm: Algorithm, cfg: &PoisonConfig) -> Result<PoisonResult> {
    problem.validate()?;
    let base = train_test(problem, &[], None, cfg, false)?;
    let init = init_poison(problem, &base.params, cfg)?;
    match algorithm {
        Algorithm::Interp => poison_interp(problem, &init, cfg),
        Algorithm::Backgrad => poison_backgrad(problem, &init, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_margins_and_widening() {
        let r = AttackRange { start: 40, end: 45 };
        assert_eq!(poison_span(r, 10, 100, 2).unwrap(), AttackRange { start: 30, end: 55 });
        assert_eq!(poison_span(r, 50, 100, 2).unwrap(), AttackRange { start: 0, end: 95 });
        assert_eq!(poison_span(r, 0, 100, 100).unwrap(), AttackRange { start: 0, end: 100 });
        let tail = AttackRange { start: 97, end: 100 };
        assert_eq!(poison_span(tail, 0, 100, 5).unwrap(), AttackRange { start: 95, end: 100 });
        assert!(poison_span(AttackRange { start: 90, end: 101 }, 0, 100, 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PoisonConfig::default().validate().is_ok());
        for bad in [
            PoisonConfig { decay: 1.0, ..Default::default() },
            PoisonConfig { adv_learning_rate: 1e-6, ..Default::default() },
            PoisonConfig { max_iters: 0, ..Default::default() },
            PoisonConfig { value_bounds: Some([1.0, 0.0]), ..Default::default() },
            PoisonConfig { retrain_mode: RetrainMode::Reservoir { size: 1 }, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_json_defaults() {
        let c: PoisonConfig = serde_json::from_str(r#"{"adv_learning_rate": 0.2}"#).unwrap();
        assert_eq!(c.adv_learning_rate, 0.2);
        assert_eq!(c.decay, 0.9);
        let r: RetrainMode = serde_json::from_str(r#"{"mode": "reservoir", "size": 12}"#).unwrap();
        assert_eq!(r, RetrainMode::Reservoir { size: 12 });
    }
}
