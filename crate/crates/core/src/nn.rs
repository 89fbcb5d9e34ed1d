//! Dense undercomplete autoencoder with exact first derivatives,
//! Hessian-vector products and a full-batch gradient-descent trainer that can
//! record its weight trajectory.
//!
//! Parameter vector layout is layer-major; within a layer the `fan_out x
//! fan_in` weight matrix comes first (row-major), followed by the bias.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Sigmoid => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Linear => {}
        }
    }

    /// First derivative expressed through the activation output.
    #[inline]
    fn d1(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }

    /// Second derivative expressed through the activation output.
    #[inline]
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Sigmoid => a * (1.0 - a) * (1.0 - 2.0 * a),
            Activation::Linear => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Flattened window size `N * l`.
    pub input_size: usize,
    pub code_size: usize,
    pub inflation_factor: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub activation: Activation,
    pub output_activation: Activation,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl ModelConfig {
    /// Inflation factor 2, input-to-code ratio 2, one encoder and one
    /// decoder layer, tanh hidden units and a linear output.
    pub fn autoencoder(input_size: usize) -> Self {
        Self {
            input_size,
            code_size: (input_size / 2).max(1),
            inflation_factor: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            activation: Activation::Tanh,
            output_activation: Activation::Linear,
            init_seed: 0,
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_size == 0 || self.code_size == 0 {
            return bad("input and code sizes must be positive".into());
        }
        if self.code_size >= self.input_size {
            return bad(format!(
                "code size {} must be smaller than input size {}",
                self.code_size, self.input_size
            ));
        }
        if self.inflation_factor == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("inflation factor and layer counts must be positive".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init scale {} must be >= 0", self.init_scale));
        }
        Ok(())
    }

    pub fn inflated_size(&self) -> usize {
        self.inflation_factor * self.input_size
    }

    /// Unit counts from input to output, e.g. `[n, 2n, n/2, 2n, n]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let n = self.input_size;
        let wide = self.inflated_size();
        let code = self.code_size;
        let mut sizes = vec![n, wide];
        for k in 1..=self.encoder_layers {
            sizes.push(wide - k * (wide - code) / self.encoder_layers);
        }
        for k in 1..=self.decoder_layers {
            sizes.push(code + k * (wide - code) / self.decoder_layers);
        }
        sizes.push(n);
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layout(&self) -> Vec<Layer> {
        let sizes = self.layer_sizes();
        let last = sizes.len() - 2;
        let mut offset = 0;
        sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                    act: if k == last {
                        self.output_activation
                    } else {
                        self.activation
                    },
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
    act: Activation,
}

impl Layer {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    fn weights<'a>(&self, flat: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.fan_out, self.fan_in), &flat[self.offset..self.bias_offset()])
            .expect("layout matches parameter vector")
    }

    fn bias<'a>(&self, flat: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&flat[self.bias_offset()..self.bias_offset() + self.fan_out])
    }
}

/// Activations of every layer for one batch; `acts[0]` is the input.
pub(crate) struct Tape {
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub(crate) fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape has at least the input")
    }
}

/// Weights plus the configuration that fixes their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    config: ModelConfig,
    flat: Vec<f64>,
}

/// Hessian-vector products for one direction over the weights.
#[derive(Debug, Clone)]
pub struct HvpResult {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    /// `(d/dw d/dw L) v`
    pub ww: Vec<f64>,
    /// `(d/dx d/dw L) v`, one row per window.
    pub xw: Array2<f64>,
}

impl ModelParams {
    /// Uniform weights in `[-init_scale, init_scale]`, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut flat = vec![0.0; config.param_count()];
        let s = config.init_scale;
        for layer in config.layout() {
            for w in &mut flat[layer.offset..layer.bias_offset()] {
                *w = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            }
        }
        Ok(Self {
            config: config.clone(),
            flat,
        })
    }

    pub fn from_flat(config: &ModelConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(Error::DimensionMismatch {
                expected: config.param_count(),
                actual: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self {
            config: config.clone(),
            flat,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.config.layer_sizes().len() - 1
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.config.layout()[layer].weights(&self.flat)
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        self.config.layout()[layer].bias(&self.flat)
    }

    /// Copy with a different parameter vector of the same layout.
    pub fn with_flat(&self, flat: Vec<f64>) -> Result<Self> {
        Self::from_flat(&self.config, flat)
    }

    fn check_batch(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.nrows() == 0 {
            return Err(Error::Empty("batch".into()));
        }
        if batch.ncols() != self.config.input_size {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_size,
                actual: batch.ncols(),
            });
        }
        Ok(())
    }

    fn check_direction(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.flat.len() {
            return Err(Error::DimensionMismatch {
                expected: self.flat.len(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, window: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, window.len()), window).map_err(|e| Error::InvalidSeries(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&batch)?;
        let mut tape = forward_tape(&self.config.layout(), &self.flat, batch);
        Ok(tape.acts.pop().expect("non-empty tape"))
    }

    pub(crate) fn tape(&self, batch: ArrayView2<f64>) -> Result<Tape> {
        self.check_batch(&batch)?;
        Ok(forward_tape(&self.config.layout(), &self.flat, batch))
    }

    /// Backpropagate `d_out = dJ/d(output)` through a recorded tape. Returns
    /// the weight gradient and the gradient reaching the network input.
    pub(crate) fn backprop(&self, tape: &Tape, d_out: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let (g, dx) = backward(&self.config.layout(), &self.flat, tape, d_out, true);
        (g, dx.expect("input gradient requested"))
    }

    /// Mean squared reconstruction error over every window and component.
    pub fn loss(&self, batch: ArrayView2<f64>) -> Result<f64> {
        let out = self.forward_batch(batch)?;
        Ok(mse(&out, &batch))
    }

    pub fn grad_w(&self, batch: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_batch(&batch)?;
        Ok(loss_grad_w(&self.config.layout(), &self.flat, batch).1)
    }

    /// Gradient of the loss with respect to each input window.
    pub fn grad_x(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.loss_and_grads(batch)?.2)
    }

    pub fn loss_and_grads(&self, batch: ArrayView2<f64>) -> Result<(f64, Vec<f64>, Array2<f64>)> {
        self.check_batch(&batch)?;
        let layout = self.config.layout();
        let tape = forward_tape(&layout, &self.flat, batch);
        let (loss, d_out) = mse_head(tape.output(), &batch);
        let direct = d_out.mapv(|v| -v);
        let (g, dx) = backward(&layout, &self.flat, &tape, d_out, true);
        Ok((loss, g, dx.expect("requested") + direct))
    }

    pub fn hvp_ww(&self, batch: ArrayView2<f64>, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.hvp(batch, v)?.ww)
    }

    pub fn hvp_xw(&self, batch: ArrayView2<f64>, v: &[f64]) -> Result<Array2<f64>> {
        Ok(self.hvp(batch, v)?.xw)
    }

    /// Both Hessian-vector products for weight direction `v`, computed by a
    /// forward tangent pass followed by a tangent-augmented backward pass.
    pub fn hvp(&self, batch: ArrayView2<f64>, v: &[f64]) -> Result<HvpResult> {
        self.check_batch(&batch)?;
        self.check_direction(v)?;
        Ok(hvp_pass(&self.config.layout(), &self.flat, batch, v))
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&self.config)?;
        let io = |e| Error::io("<checkpoint>", e);
        out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&header).map_err(io)?;
        out.write_all(&(self.flat.len() as u64).to_le_bytes()).map_err(io)?;
        for v in &self.flat {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::InvalidConfig("not a model checkpoint".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(io)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header).map_err(io)?;
        let config: ModelConfig = serde_json::from_slice(&header)?;
        input.read_exact(&mut len).map_err(io)?;
        let count = u64::from_le_bytes(len) as usize;
        if count != config.param_count() {
            return Err(Error::DimensionMismatch {
                expected: config.param_count(),
                actual: count,
            });
        }
        let mut flat = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            input.read_exact(&mut buf).map_err(io)?;
            flat.push(f64::from_le_bytes(buf));
        }
        Self::from_flat(&config, flat)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AEPMODL1";

fn fill<D: ndarray::Dimension>(dst: &mut [f64], src: &ndarray::Array<f64, D>) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s;
    }
}

fn forward_tape(layout: &[Layer], flat: &[f64], x: ArrayView2<f64>) -> Tape {
    let mut acts = Vec::with_capacity(layout.len() + 1);
    acts.push(x.to_owned());
    for layer in layout {
        let mut z = acts.last().expect("input pushed").dot(&layer.weights(flat).t());
        z += &layer.bias(flat);
        layer.act.apply(&mut z);
        acts.push(z);
    }
    Tape { acts }
}

fn mse(out: &Array2<f64>, target: &ArrayView2<f64>) -> f64 {
    let mut s = 0.0;
    Zip::from(out).and(target).for_each(|&o, &t| s += (o - t) * (o - t));
    s / out.len() as f64
}

/// Loss value and `dL/d(output)` for reconstruction MSE.
fn mse_head(out: &Array2<f64>, target: &ArrayView2<f64>) -> (f64, Array2<f64>) {
    let c = 2.0 / out.len() as f64;
    let mut s = 0.0;
    let mut d = out.clone();
    Zip::from(&mut d).and(target).for_each(|o, &t| {
        let diff = *o - t;
        s += diff * diff;
        *o = c * diff;
    });
    (s / out.len() as f64, d)
}

fn backward(
    layout: &[Layer],
    flat: &[f64],
    tape: &Tape,
    mut d_a: Array2<f64>,
    need_input: bool,
) -> (Vec<f64>, Option<Array2<f64>>) {
    let mut grad = vec![0.0; flat.len()];
    for (k, layer) in layout.iter().enumerate().rev() {
        let a_out = &tape.acts[k + 1];
        let a_in = &tape.acts[k];
        let act = layer.act;
        Zip::from(&mut d_a).and(a_out).for_each(|d, &a| *d *= act.d1(a));
        let dz = d_a;
        let gw = dz.t().dot(a_in);
        let gb = dz.sum_axis(Axis(0));
        let wo = layer.offset;
        fill(&mut grad[wo..layer.bias_offset()], &gw);
        fill(&mut grad[layer.bias_offset()..layer.bias_offset() + layer.fan_out], &gb);
        if k == 0 && !need_input {
            return (grad, None);
        }
        d_a = dz.dot(&layer.weights(flat));
    }
    (grad, Some(d_a))
}

fn loss_grad_w(layout: &[Layer], flat: &[f64], batch: ArrayView2<f64>) -> (f64, Vec<f64>) {
    let tape = forward_tape(layout, flat, batch);
    let (loss, d_out) = mse_head(tape.output(), &batch);
    let (g, _) = backward(layout, flat, &tape, d_out, false);
    (loss, g)
}

fn hvp_pass(layout: &[Layer], flat: &[f64], x: ArrayView2<f64>, v: &[f64]) -> HvpResult {
    let tape = forward_tape(layout, flat, x);
    let rows = x.nrows();

    // Forward tangents: r_z[k] = R(Z_{k+1}), r_a[k] = R(A_k).
    let mut r_a: Vec<Array2<f64>> = Vec::with_capacity(layout.len() + 1);
    let mut r_z: Vec<Array2<f64>> = Vec::with_capacity(layout.len());
    r_a.push(Array2::zeros((rows, x.ncols())));
    for (k, layer) in layout.iter().enumerate() {
        let w = layer.weights(flat);
        let vw = layer.weights(v);
        let mut rz = r_a[k].dot(&w.t()) + tape.acts[k].dot(&vw.t());
        rz += &layer.bias(v);
        let mut ra = rz.clone();
        let act = layer.act;
        Zip::from(&mut ra).and(&tape.acts[k + 1]).for_each(|r, &a| *r *= act.d1(a));
        r_z.push(rz);
        r_a.push(ra);
    }

    let out = tape.output();
    let (loss, mut d_a) = mse_head(out, &x);
    let c = 2.0 / out.len() as f64;
    let mut r_d_a = r_a[layout.len()].mapv(|r| c * r);
    let r_direct = r_d_a.mapv(|r| -r);

    let mut grad = vec![0.0; flat.len()];
    let mut ww = vec![0.0; flat.len()];
    for (k, layer) in layout.iter().enumerate().rev() {
        let a_out = &tape.acts[k + 1];
        let a_in = &tape.acts[k];
        let act = layer.act;
        // r_dz = r_da * f'(z) + da * f''(z) * r_z ; dz = da * f'(z)
        Zip::from(&mut r_d_a)
            .and(&d_a)
            .and(a_out)
            .and(&r_z[k])
            .for_each(|rd, &d, &a, &rz| *rd = *rd * act.d1(a) + d * act.d2(a) * rz);
        Zip::from(&mut d_a).and(a_out).for_each(|d, &a| *d *= act.d1(a));
        let (dz, r_dz) = (d_a, r_d_a);

        let gw = dz.t().dot(a_in);
        let r_gw = r_dz.t().dot(a_in) + dz.t().dot(&r_a[k]);
        let gb = dz.sum_axis(Axis(0));
        let r_gb = r_dz.sum_axis(Axis(0));
        let (wo, bo) = (layer.offset, layer.bias_offset());
        fill(&mut grad[wo..bo], &gw);
        fill(&mut ww[wo..bo], &r_gw);
        fill(&mut grad[bo..bo + layer.fan_out], &gb);
        fill(&mut ww[bo..bo + layer.fan_out], &r_gb);

        let w = layer.weights(flat);
        d_a = dz.dot(&w);
        r_d_a = r_dz.dot(&w) + dz.dot(&layer.weights(v));
    }

    HvpResult {
        loss,
        grad_w: grad,
        ww,
        xw: r_d_a + r_direct,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default = "default_stop_loss")]
    pub stop_loss: f64,
    #[serde(default)]
    pub record_trajectory: bool,
}

fn default_stop_loss() -> f64 {
    0.01
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(self.stop_loss > 0.0) {
            return Err(Error::InvalidConfig(format!("stop loss {} must be > 0", self.stop_loss)));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Weight checkpoints `w_0 ..= w_T` of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrajectory {
    pub learning_rate: f64,
    /// Number of gradient steps actually taken.
    pub steps: usize,
    /// Empty unless recording was requested; otherwise `steps + 1` entries.
    pub checkpoints: Vec<Vec<f64>>,
}

impl TrainTrajectory {
    pub fn is_recorded(&self) -> bool {
        self.checkpoints.len() == self.steps + 1
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trajectory: TrainTrajectory,
    pub final_loss: f64,
}

/// Full-batch gradient descent `w <- w - lr * grad` until the loss drops
/// below `stop_loss` or `max_epochs` steps have been taken.
pub fn train(params: &ModelParams, data: ArrayView2<f64>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.check_batch(&data)?;
    let layout = params.config.layout();
    let mut w = params.flat.clone();
    let mut checkpoints = Vec::new();
    if cfg.record_trajectory {
        checkpoints.push(w.clone());
    }
    let mut steps = 0;
    loop {
        let (loss, g) = loss_grad_w(&layout, &w, data);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: steps, loss });
        }
        if loss < cfg.stop_loss || steps == cfg.max_epochs {
            return Ok(TrainOutcome {
                params: ModelParams {
                    config: params.config.clone(),
                    flat: w,
                },
                trajectory: TrainTrajectory {
                    learning_rate: cfg.learning_rate,
                    steps,
                    checkpoints,
                },
                final_loss: loss,
            });
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= cfg.learning_rate * gi;
        }
        steps += 1;
        if cfg.record_trajectory {
            checkpoints.push(w.clone());
        }
    }
}

/// Stack equally sized flattened windows into a batch.
pub fn stack_rows(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let first = rows.first().ok_or_else(|| Error::Empty("rows".into()))?;
    let mut out = Array2::zeros((rows.len(), first.len()));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != first.len() {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                actual: r.len(),
            });
        }
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 2,
            code_size: 1,
            inflation_factor: 1,
            init_seed: 3,
            init_scale: 0.8,
            ..ModelConfig::autoencoder(2)
        }
    }

    #[test]
    fn layer_sizes_follow_defaults() {
        assert_eq!(ModelConfig::autoencoder(2).layer_sizes(), vec![2, 4, 1, 4, 2]);
        assert_eq!(ModelConfig::autoencoder(100).layer_sizes(), vec![100, 200, 50, 200, 100]);
        let mut deep = ModelConfig::autoencoder(8);
        deep.encoder_layers = 2;
        deep.decoder_layers = 2;
        assert_eq!(deep.layer_sizes(), vec![8, 16, 10, 4, 10, 16, 8]);
        assert_eq!(tiny().param_count(), 19);
    }

    #[test]
    fn rejects_overcomplete_code() {
        let mut cfg = ModelConfig::autoencoder(4);
        cfg.code_size = 4;
        assert!(ModelParams::init(&cfg).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::autoencoder(6);
        let a = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, ModelParams::init(&cfg).unwrap());
        assert!(a.flat().iter().all(|w| w.abs() <= 0.1));
        for k in 0..a.layer_count() {
            assert!(a.bias(k).iter().all(|&b| b == 0.0));
        }
        let mut zero = cfg.clone();
        zero.init_scale = 0.0;
        assert!(ModelParams::init(&zero).unwrap().flat().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut cfg = ModelConfig::autoencoder(4);
        cfg.init_scale = 0.0;
        let p = ModelParams::init(&cfg).unwrap();
        assert_eq!(p.forward(&[0.3, -1.0, 2.0, 0.5]).unwrap(), vec![0.0; 4]);
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn loss_basics() {
        let mut cfg = ModelConfig::autoencoder(4);
        cfg.init_scale = 0.0;
        let p = ModelParams::init(&cfg).unwrap();
        assert_eq!(p.loss(Array2::ones((3, 4)).view()).unwrap(), 1.0);
        assert!(p.loss(Array2::zeros((0, 4)).view()).is_err());

        let q = ModelParams::init(&ModelConfig::autoencoder(2)).unwrap();
        let b = array![[0.1, 0.2], [0.5, -0.3], [-1.0, 0.7]];
        let rev = array![[-1.0, 0.7], [0.5, -0.3], [0.1, 0.2]];
        assert!((q.loss(b.view()).unwrap() - q.loss(rev.view()).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn linear_identity_has_zero_gradient() {
        // 2 -> 2 -> 1 -> 2 -> 2 linear net reproducing inputs on the line x = y.
        let mut cfg = tiny();
        cfg.activation = Activation::Linear;
        let mut flat = vec![0.0; cfg.param_count()];
        // layer 0: identity 2x2
        flat[0] = 1.0;
        flat[3] = 1.0;
        // layer 1 (offset 6): code = (x0 + x1) / 2
        flat[6] = 0.5;
        flat[7] = 0.5;
        // layer 2 (offset 9): 1 -> 2, both ones
        flat[9] = 1.0;
        flat[10] = 1.0;
        // layer 3 (offset 13): identity 2x2
        flat[13] = 1.0;
        flat[16] = 1.0;
        let p = ModelParams::from_flat(&cfg, flat).unwrap();
        let b = array![[0.3, 0.3], [-0.7, -0.7]];
        assert_eq!(p.forward_batch(b.view()).unwrap(), b);
        assert_eq!(p.loss(b.view()).unwrap(), 0.0);
        let (_, gw, gx) = p.loss_and_grads(b.view()).unwrap();
        assert!(gw.iter().map(|g| g * g).sum::<f64>().sqrt() <= 1e-10);
        assert!(gx.iter().all(|g| g.abs() <= 1e-10));
    }

    #[test]
    fn repeated_windows_scale_input_gradient() {
        let p = ModelParams::init(&tiny()).unwrap();
        let one = array![[0.4, -0.2]];
        let three = array![[0.4, -0.2], [0.4, -0.2], [0.4, -0.2]];
        let g1 = p.grad_x(one.view()).unwrap();
        let g3 = p.grad_x(three.view()).unwrap();
        for r in g3.rows() {
            for (a, b) in r.iter().zip(g1.row(0)) {
                assert!((3.0 * a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hvp_is_linear() {
        let p = ModelParams::init(&tiny()).unwrap();
        let b = array![[0.4, -0.2], [0.9, 0.1]];
        let n = p.len();
        let v1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let v2: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let h1 = p.hvp(b.view(), &v1).unwrap();
        let h2 = p.hvp(b.view(), &v2).unwrap();
        let hm = p.hvp(b.view(), &mix).unwrap();
        for i in 0..n {
            assert!((hm.ww[i] - (2.0 * h1.ww[i] - 0.5 * h2.ww[i])).abs() < 1e-10);
        }
        for ((m, a), b2) in hm.xw.iter().zip(h1.xw.iter()).zip(h2.xw.iter()) {
            assert!((m - (2.0 * a - 0.5 * b2)).abs() < 1e-10);
        }
        assert!(p.hvp(b.view(), &v1[1..]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p = ModelParams::init(&ModelConfig::autoencoder(2)).unwrap();
        let data = array![[0.5, 0.9], [-0.3, 0.2]];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 7,
            stop_loss: 1e-9,
            record_trajectory: true,
        };
        let out = train(&p, data.view(), &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.trajectory.steps, 7);
        assert!(out.trajectory.is_recorded());

        let stop_now = TrainConfig { stop_loss: 10.0, ..cfg };
        assert_eq!(train(&p, data.view(), &stop_now).unwrap().trajectory.steps, 0);
    }

    #[test]
    fn divergence_is_reported() {
        let p = ModelParams::init(&ModelConfig::autoencoder(2)).unwrap();
        let data = array![[50.0, 90.0], [-30.0, 20.0]];
        let cfg = TrainConfig {
            learning_rate: 1e6,
            max_epochs: 200,
            stop_loss: 1e-12,
            record_trajectory: false,
        };
        assert!(matches!(train(&p, data.view(), &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn binary_checkpoint_round_trip() {
        let p = ModelParams::init(&ModelConfig::autoencoder(4)).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(ModelParams::read_binary(buf.as_slice()).unwrap(), p);
        assert!(ModelParams::read_binary(&buf[..10]).is_err());
    }
}
