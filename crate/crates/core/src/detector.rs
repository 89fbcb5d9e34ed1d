//! Autoencoder anomaly detector over long series.
//!
//! A series is cut into overlapping windows, every window is reconstructed
//! by the model and each time step's prediction is the mean over the windows
//! covering it. When the stride leaves trailing rows uncovered, one extra
//! window aligned to the end of the series is added so every row has a
//! prediction.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ModelConfig, ModelParams, TrainConfig, TrainOutcome};
use crate::timeseries::{SeriesMatrix, WindowConfig};

/// Default alert threshold on the per-point residual.
pub const DEFAULT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    /// Largest absolute feature deviation at each time step.
    #[default]
    PerPointAbs,
    /// Mean squared error of each window, reported at the window start.
    WindowMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub model: ModelConfig,
    pub window: WindowConfig,
    pub threshold: f64,
    #[serde(default)]
    pub residual_mode: ResidualMode,
}

impl DetectorConfig {
    /// Default autoencoder for `features` columns and the given window.
    pub fn new(features: usize, window: WindowConfig) -> Self {
        Self {
            model: ModelConfig::autoencoder(features * window.length),
            window,
            threshold: DEFAULT_THRESHOLD,
            residual_mode: ResidualMode::PerPointAbs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.model.validate()?;
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!("threshold {} must be > 0", self.threshold)));
        }
        if !self.model.input_size.is_multiple_of(self.window.length) {
            return Err(Error::InvalidConfig(format!(
                "model input {} is not a multiple of window length {}",
                self.model.input_size, self.window.length
            )));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.model.input_size / self.window.length
    }

    fn check_series(&self, series: &SeriesMatrix) -> Result<()> {
        self.validate()?;
        if series.features() != self.features() {
            return Err(Error::DimensionMismatch {
                expected: self.features(),
                actual: series.features(),
            });
        }
        if series.rows() < self.window.length {
            return Err(Error::WindowTooLong {
                length: self.window.length,
                rows: series.rows(),
            });
        }
        Ok(())
    }
}

/// Window starts used for scoring: the regular sliding windows, plus extra
/// windows wherever the stride leaves rows uncovered (gaps when the stride
/// exceeds the window, and the tail of the series).
pub fn wrapper_starts(rows: usize, window: &WindowConfig) -> Result<Vec<usize>> {
    let l = window.length;
    let mut out = Vec::new();
    let mut covered = 0;
    for s in window.starts(rows)? {
        while covered < s {
            let c = covered.min(rows - l);
            out.push(c);
            covered = c + l;
        }
        out.push(s);
        covered = s + l;
    }
    if covered < rows {
        out.push(rows - l);
    }
    Ok(out)
}

fn flatten_windows(values: ArrayView2<f64>, starts: &[usize], length: usize) -> Array2<f64> {
    let n = values.ncols();
    let mut out = Array2::zeros((starts.len(), length * n));
    for (i, &s) in starts.iter().enumerate() {
        let mut row = out.row_mut(i);
        for (dst, src) in row.iter_mut().zip(values.slice(s![s..s + length, ..]).iter()) {
            *dst = *src;
        }
    }
    out
}

/// Stack the regular sliding windows of every series into one training batch.
pub fn training_batch<'a>(
    series: impl IntoIterator<Item = &'a SeriesMatrix>,
    window: &WindowConfig,
) -> Result<Array2<f64>> {
    let series: Vec<&SeriesMatrix> = series.into_iter().collect();
    let first = series.first().ok_or_else(|| Error::Empty("training set".into()))?;
    let n = first.features();
    let mut blocks = Vec::with_capacity(series.len());
    for s in series {
        if s.features() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: s.features(),
            });
        }
        blocks.push(flatten_windows(s.values(), &window.starts(s.rows())?, window.length));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::InvalidSeries(e.to_string()))
}

/// Row positions of `series` windows inside a batch built by
/// [`training_batch`], as `(batch_row, start)` pairs.
pub fn window_rows(rows: usize, window: &WindowConfig, batch_offset: usize) -> Result<Vec<(usize, usize)>> {
    Ok(window
        .starts(rows)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| (batch_offset + i, s))
        .collect())
}

struct WrapperPass {
    starts: Vec<usize>,
    /// Per-window reconstructions, one flattened window per row.
    predictions: Array2<f64>,
    combined: Array2<f64>,
    cover: Vec<f64>,
}

fn wrapper_pass(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<(WrapperPass, Array2<f64>)> {
    cfg.check_series(series)?;
    let l = cfg.window.length;
    let n = series.features();
    let starts = wrapper_starts(series.rows(), &cfg.window)?;
    let batch = flatten_windows(series.values(), &starts, l);
    let predictions = params.forward_batch(batch.view())?;
    let mut combined = Array2::zeros(series.values().dim());
    let mut cover = vec![0.0; series.rows()];
    for (i, &s) in starts.iter().enumerate() {
        let p = predictions.row(i);
        for r in 0..l {
            cover[s + r] += 1.0;
            for j in 0..n {
                combined[[s + r, j]] += p[r * n + j];
            }
        }
    }
    for (t, mut row) in combined.rows_mut().into_iter().enumerate() {
        row /= cover[t];
    }
    Ok((
        WrapperPass {
            starts,
            predictions,
            combined,
            cover,
        },
        batch,
    ))
}

/// Per-step prediction: mean of every covering window's reconstruction.
pub fn reconstruct_series(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<SeriesMatrix> {
    let (pass, _) = wrapper_pass(params, series, cfg)?;
    series.with_values(pass.combined)
}

/// Alerts raised on one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertReport {
    pub residuals: Vec<f64>,
    pub threshold: f64,
    pub alert_count: usize,
    pub alert_indices: Vec<usize>,
}

impl AlertReport {
    pub fn from_residuals(residuals: Vec<f64>, threshold: f64) -> Self {
        let alert_indices: Vec<usize> = residuals
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > threshold)
            .map(|(i, _)| i)
            .collect();
        Self {
            alert_count: alert_indices.len(),
            alert_indices,
            residuals,
            threshold,
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Same residuals, different threshold.
    pub fn rethreshold(&self, threshold: f64) -> Self {
        Self::from_residuals(self.residuals.clone(), threshold)
    }
}

pub fn residuals(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<Vec<f64>> {
    let (pass, batch) = wrapper_pass(params, series, cfg)?;
    let obs = series.values();
    Ok(match cfg.residual_mode {
        ResidualMode::PerPointAbs => pass
            .combined
            .rows()
            .into_iter()
            .zip(obs.rows())
            .map(|(p, o)| p.iter().zip(o.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .collect(),
        ResidualMode::WindowMse => {
            let mut r = vec![0.0; series.rows()];
            let regular = cfg.window.starts(series.rows())?;
            for (i, &s) in pass.starts.iter().enumerate() {
                if regular.binary_search(&s).is_err() {
                    continue;
                }
                let (p, x) = (pass.predictions.row(i), batch.row(i));
                r[s] = p.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
            }
            r
        }
    })
}

/// The alert function: residuals above the threshold count as alerts.
pub fn score(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<AlertReport> {
    Ok(AlertReport::from_residuals(residuals(params, series, cfg)?, cfg.threshold))
}

/// Total alerts over several series.
pub fn count_alerts<'a>(
    params: &ModelParams,
    series: impl IntoIterator<Item = &'a SeriesMatrix>,
    cfg: &DetectorConfig,
) -> Result<usize> {
    series
        .into_iter()
        .map(|s| score(params, s, cfg).map(|r| r.alert_count))
        .sum()
}

/// Value and gradients of the series reconstruction objective
/// `mean((combined - observed)^2)`.
#[derive(Debug, Clone)]
pub struct SeriesObjective {
    pub value: f64,
    pub grad_w: Vec<f64>,
    pub grad_series: Array2<f64>,
}

struct ObjectiveParts {
    value: f64,
    grad_w: Vec<f64>,
    direct: Array2<f64>,
    starts: Vec<usize>,
    window_grads: Array2<f64>,
}

fn objective_parts(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<ObjectiveParts> {
    let (pass, batch) = wrapper_pass(params, series, cfg)?;
    let l = cfg.window.length;
    let n = series.features();
    let scale = 2.0 / series.values().len() as f64;
    let err = &pass.combined - &series.values();
    let value = err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64;

    let mut d_out = Array2::zeros(pass.predictions.dim());
    for (i, &s) in pass.starts.iter().enumerate() {
        let mut row = d_out.row_mut(i);
        for r in 0..l {
            for j in 0..n {
                row[r * n + j] = scale * err[[s + r, j]] / pass.cover[s + r];
            }
        }
    }
    let tape = params.tape(batch.view())?;
    let (grad_w, window_grads) = params.backprop(&tape, d_out);
    Ok(ObjectiveParts {
        value,
        grad_w,
        direct: err.mapv(|e| -scale * e),
        starts: pass.starts,
        window_grads,
    })
}

fn scatter(target: &mut Array2<f64>, row: ndarray::ArrayView1<f64>, start: usize, l: usize) {
    let n = target.ncols();
    for r in 0..l {
        for j in 0..n {
            target[[start + r, j]] += row[r * n + j];
        }
    }
}

pub fn series_objective(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<f64> {
    let (pass, _) = wrapper_pass(params, series, cfg)?;
    let err = &pass.combined - &series.values();
    Ok(err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64)
}

pub fn series_objective_grads(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<SeriesObjective> {
    let parts = objective_parts(params, series, cfg)?;
    let mut grad = parts.direct;
    for (i, &s) in parts.starts.iter().enumerate() {
        scatter(&mut grad, parts.window_grads.row(i), s, cfg.window.length);
    }
    Ok(SeriesObjective {
        value: parts.value,
        grad_w: parts.grad_w,
        grad_series: grad,
    })
}

/// Gradient of the series objective with respect to every cell.
pub fn series_objective_grad(params: &ModelParams, series: &SeriesMatrix, cfg: &DetectorConfig) -> Result<SeriesMatrix> {
    let g = series_objective_grads(params, series, cfg)?;
    series.with_values(g.grad_series)
}

/// The series gradient split into the direct residual term and one
/// contribution per covering window (each scattered to full series shape).
pub fn series_objective_grad_parts(
    params: &ModelParams,
    series: &SeriesMatrix,
    cfg: &DetectorConfig,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let parts = objective_parts(params, series, cfg)?;
    let shape = series.values().dim();
    let per_window = parts
        .starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut g = Array2::zeros(shape);
            scatter(&mut g, parts.window_grads.row(i), s, cfg.window.length);
            g
        })
        .collect();
    Ok((parts.direct, per_window))
}

/// A trained detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ModelParams,
}

impl Detector {
    /// Train from the seeded initialization on the windows of `train`.
    pub fn fit(config: &DetectorConfig, train: &[SeriesMatrix], train_cfg: &TrainConfig) -> Result<(Self, TrainOutcome)> {
        config.validate()?;
        let batch = training_batch(train, &config.window)?;
        let init = ModelParams::init(&config.model)?;
        let outcome = nn::train(&init, batch.view(), train_cfg)?;
        Ok((
            Self {
                config: config.clone(),
                params: outcome.params.clone(),
            },
            outcome,
        ))
    }

    pub fn score(&self, series: &SeriesMatrix) -> Result<AlertReport> {
        score(&self.params, series, &self.config)
    }

    pub fn reconstruct(&self, series: &SeriesMatrix) -> Result<SeriesMatrix> {
        reconstruct_series(&self.params, series, &self.config)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = DetectorCheckpoint {
            schema_version: CHECKPOINT_SCHEMA,
            config: self.config.clone(),
            params: self.params.flat().to_vec(),
        };
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &ckpt)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: DetectorCheckpoint = serde_json::from_reader(BufReader::new(f))?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint schema {}",
                ckpt.schema_version
            )));
        }
        ckpt.config.validate()?;
        let params = ModelParams::from_flat(&ckpt.config.model, ckpt.params)?;
        Ok(Self {
            config: ckpt.config,
            params,
        })
    }
}

const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DetectorCheckpoint {
    schema_version: u32,
    config: DetectorConfig,
    params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;

    /// Default tanh autoencoder over 1-feature windows of length 2.
    fn small_detector(stride: usize) -> (ModelParams, DetectorConfig) {
        let model = ModelConfig {
            inflation_factor: 1,
            init_scale: 0.5,
            ..ModelConfig::autoencoder(2)
        };
        let cfg = DetectorConfig {
            model: model.clone(),
            window: WindowConfig::new(2, stride).unwrap(),
            threshold: 0.2,
            residual_mode: ResidualMode::PerPointAbs,
        };
        (ModelParams::init(&model).unwrap(), cfg)
    }

    fn ramp(t: usize) -> SeriesMatrix {
        SeriesMatrix::from_column(&(0..t).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn wrapper_starts_cover_tail() {
        let w = WindowConfig::new(3, 2).unwrap();
        assert_eq!(wrapper_starts(8, &w).unwrap(), vec![0, 2, 4, 5]);
        assert_eq!(wrapper_starts(7, &w).unwrap(), vec![0, 2, 4]);
        let gap = WindowConfig::new(3, 4).unwrap();
        assert_eq!(wrapper_starts(10, &gap).unwrap(), vec![0, 3, 4, 7]);
    }

    #[test]
    fn single_window_equals_model_output() {
        let (p, cfg) = small_detector(1);
        let s = SeriesMatrix::from_column(&[0.3, -0.4]).unwrap();
        let rec = reconstruct_series(&p, &s, &cfg).unwrap();
        let direct = p.forward(&[0.3, -0.4]).unwrap();
        assert_eq!(rec.values().column(0).to_vec(), direct);
    }

    #[test]
    fn interior_point_is_mean_of_two_windows() {
        let (p, cfg) = small_detector(1);
        let s = SeriesMatrix::from_column(&[0.3, -0.4, 0.8]).unwrap();
        let rec = reconstruct_series(&p, &s, &cfg).unwrap();
        let a = p.forward(&[0.3, -0.4]).unwrap();
        let b = p.forward(&[-0.4, 0.8]).unwrap();
        let v = rec.values();
        assert_eq!(v[[0, 0]], a[0]);
        assert!((v[[1, 0]] - 0.5 * (a[1] + b[0])).abs() < 1e-15);
        assert_eq!(v[[2, 0]], b[1]);
    }

    #[test]
    fn non_overlapping_windows_concatenate() {
        let (p, mut cfg) = small_detector(2);
        cfg.window = WindowConfig::new(2, 2).unwrap();
        let s = ramp(8);
        let rec = reconstruct_series(&p, &s, &cfg).unwrap();
        for w in 0..4 {
            let x: Vec<f64> = s.values().column(0).iter().skip(2 * w).take(2).copied().collect();
            let y = p.forward(&x).unwrap();
            assert_eq!(rec.values()[[2 * w, 0]], y[0]);
            assert_eq!(rec.values()[[2 * w + 1, 0]], y[1]);
        }
    }

    #[test]
    fn residual_threshold_counting() {
        let r = AlertReport::from_residuals(vec![0.1, 0.25, 0.15], 0.2);
        assert_eq!(r.alert_count, 1);
        assert_eq!(r.alert_indices, vec![1]);
        assert_eq!(r.rethreshold(0.3).alert_count, 0);
    }

    #[test]
    fn linear_identity_model_scores_zero() {
        // Identity on inputs with two equal features.
        let model = ModelConfig {
            input_size: 2,
            code_size: 1,
            inflation_factor: 1,
            activation: Activation::Linear,
            ..ModelConfig::autoencoder(2)
        };
        let mut flat = vec![0.0; model.param_count()];
        flat[0] = 1.0;
        flat[3] = 1.0;
        flat[6] = 0.5;
        flat[7] = 0.5;
        flat[9] = 1.0;
        flat[10] = 1.0;
        flat[13] = 1.0;
        flat[16] = 1.0;
        let p = ModelParams::from_flat(&model, flat).unwrap();
        let cfg = DetectorConfig {
            model,
            window: WindowConfig::new(1, 1).unwrap(),
            threshold: 0.2,
            residual_mode: ResidualMode::PerPointAbs,
        };
        let s = SeriesMatrix::from_array(array![[0.5, 0.5], [-3.0, -3.0], [2.0, 2.0]]).unwrap();
        assert_eq!(reconstruct_series(&p, &s, &cfg).unwrap(), s);
        let report = score(&p, &s, &cfg).unwrap();
        assert_eq!(report.alert_count, 0);
        assert!(report.residuals.iter().all(|&r| r == 0.0));
        let g = series_objective_grad(&p, &s, &cfg).unwrap();
        assert!(g.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn window_mse_mode_reports_at_starts() {
        let (p, mut cfg) = small_detector(1);
        cfg.residual_mode = ResidualMode::WindowMse;
        let s = ramp(5);
        let r = residuals(&p, &s, &cfg).unwrap();
        assert_eq!(r.len(), 5);
        assert_eq!(r[4], 0.0);
        let x: Vec<f64> = s.values().column(0).iter().take(2).copied().collect();
        let y = p.forward(&x).unwrap();
        let mse = ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)) / 2.0;
        assert!((r[0] - mse).abs() < 1e-15);
    }

    #[test]
    fn short_series_rejected() {
        let (p, cfg) = small_detector(1);
        let s = SeriesMatrix::from_column(&[0.3]).unwrap();
        assert!(matches!(score(&p, &s, &cfg), Err(Error::WindowTooLong { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (p, cfg) = small_detector(1);
        let d = Detector { config: cfg, params: p };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        d.save_json(&path).unwrap();
        assert_eq!(Detector::load_json(&path).unwrap(), d);
    }

    #[test]
    fn training_batch_rows() {
        let w = WindowConfig::new(2, 1).unwrap();
        let b = training_batch(&[ramp(5), ramp(3)], &w).unwrap();
        assert_eq!(b.dim(), (6, 2));
        assert_eq!(window_rows(3, &w, 4).unwrap(), vec![(4, 0), (5, 1)]);
    }
}
