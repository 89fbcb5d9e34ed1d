//! Synthetic periodic signals and attack injection.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::SeriesMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    Sine,
    Cosine,
    /// +1 on the first half of each period, -1 on the second.
    Square,
    /// Linear ramp from -1 to 1 over each period.
    Sawtooth,
}

impl Waveform {
    /// Unit waveform at fractional phase `x` in `[0, 1)`.
    fn unit(self, x: f64) -> f64 {
        match self {
            Waveform::Sine => (2.0 * PI * x).sin(),
            Waveform::Cosine => (2.0 * PI * x).cos(),
            Waveform::Square => {
                if x < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Waveform::Sawtooth => -1.0 + 2.0 * x,
        }
    }
}

/// Linear map `scale * base + offset` producing one output feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Channel {
    fn default() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub waveform: Waveform,
    pub period: usize,
    pub length: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_channels")]
    pub channels: Vec<Channel>,
    #[serde(default)]
    pub seed: u64,
    /// Phase offset in time steps; 0 keeps every sequence period-aligned.
    #[serde(default)]
    pub phase: usize,
}

fn one() -> f64 {
    1.0
}

fn default_channels() -> Vec<Channel> {
    vec![Channel::default()]
}

impl SignalSpec {
    pub fn sine(period: usize, length: usize) -> Self {
        Self {
            waveform: Waveform::Sine,
            period,
            length,
            amplitude: 1.0,
            noise_std: 0.0,
            channels: default_channels(),
            seed: 0,
            phase: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::InvalidConfig(format!("period {} must be >= 2", self.period)));
        }
        if self.length < self.period {
            return Err(Error::InvalidConfig(format!(
                "length {} shorter than period {}",
                self.length, self.period
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("at least one channel required".into()));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidConfig("amplitude must be finite".into()));
        }
        Ok(())
    }

    /// Noiseless base waveform at time step `i`.
    pub fn base(&self, i: usize) -> f64 {
        let x = ((i + self.phase) % self.period) as f64 / self.period as f64;
        self.amplitude * self.waveform.unit(x)
    }

    /// Noiseless value of `channel` at step `i`.
    pub fn clean_value(&self, channel: usize, i: usize) -> f64 {
        let c = self.channels[channel];
        c.scale * self.base(i) + c.offset
    }
}

fn build(spec: &SignalSpec, noisy: bool) -> Result<SeriesMatrix> {
    spec.validate()?;
    let n = spec.channels.len();
    let mut values = Array2::zeros((spec.length, n));
    for i in 0..spec.length {
        for j in 0..n {
            values[[i, j]] = spec.clean_value(j, i);
        }
    }
    if noisy && spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for j in 0..n {
            for i in 0..spec.length {
                values[[i, j]] += normal.sample(&mut rng);
            }
        }
    }
    SeriesMatrix::from_array(values)
}

/// Generate the noisy multichannel signal; deterministic under `spec.seed`.
pub fn generate(spec: &SignalSpec) -> Result<SeriesMatrix> {
    build(spec, true)
}

/// The same signal without noise.
pub fn generate_clean(spec: &SignalSpec) -> Result<SeriesMatrix> {
    build(spec, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackLocation {
    SinTop,
    SinBottom,
    SinSide,
    #[serde(rename = "INDEX")]
    Index(usize),
}

impl std::fmt::Display for AttackLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackLocation::SinTop => write!(f, "SIN_TOP"),
            AttackLocation::SinBottom => write!(f, "SIN_BOTTOM"),
            AttackLocation::SinSide => write!(f, "SIN_SIDE"),
            AttackLocation::Index(i) => write!(f, "INDEX_{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackSign {
    /// Direction of the clean signal at the anchor (positive at zero).
    #[default]
    AwayFromZero,
    Positive,
    Negative,
}

/// Offset profile over the attack duration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackShape {
    /// `magnitude` at every attacked step.
    #[default]
    Constant,
    /// Explicit non-negative offset per step (e.g. a ramp); length must equal
    /// the duration. `magnitude` is ignored.
    Steps(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub location: AttackLocation,
    pub magnitude: f64,
    pub duration: usize,
    #[serde(default)]
    pub sign: AttackSign,
    #[serde(default)]
    pub clip: Option<f64>,
    /// Period in which a named anchor is placed (anchor + cycle * period).
    #[serde(default)]
    pub cycle: usize,
    #[serde(default)]
    pub shape: AttackShape,
}

impl AttackSpec {
    pub fn new(location: AttackLocation, magnitude: f64, duration: usize) -> Self {
        Self {
            location,
            magnitude,
            duration,
            sign: AttackSign::default(),
            clip: None,
            cycle: 0,
            shape: AttackShape::Constant,
        }
    }

    pub fn validate(&self, length: usize) -> Result<()> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::InvalidConfig(format!("magnitude {} must be >= 0", self.magnitude)));
        }
        if self.duration == 0 || self.duration > length {
            return Err(Error::InvalidConfig(format!(
                "duration {} must be in 1..={length}",
                self.duration
            )));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c <= self.magnitude) {
                return Err(Error::InvalidConfig(format!(
                    "clip {c} must be in (0, magnitude={}]",
                    self.magnitude
                )));
            }
        }
        if let AttackShape::Steps(steps) = &self.shape {
            if steps.len() != self.duration || steps.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(Error::InvalidConfig(
                    "step offsets must be non-negative with one entry per attacked step".into(),
                ));
            }
        }
        Ok(())
    }

    /// `min(magnitude, clip)`.
    pub fn effective_magnitude(&self) -> f64 {
        match self.clip {
            Some(c) => self.magnitude.min(c),
            None => self.magnitude,
        }
    }

    fn offset_at(&self, k: usize) -> f64 {
        let raw = match &self.shape {
            AttackShape::Constant => self.magnitude,
            AttackShape::Steps(s) => s[k],
        };
        match self.clip {
            Some(c) => raw.min(c),
            None => raw,
        }
    }
}

/// Half-open index range `[start, end)` of attacked time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackRange {
    pub start: usize,
    pub end: usize,
}

impl AttackRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Index of the named location within the first period of the noiseless
/// base waveform (ties break toward the earliest index).
pub fn anchor_index(spec: &SignalSpec, location: AttackLocation) -> Result<usize> {
    spec.validate()?;
    let p = spec.period;
    let base: Vec<f64> = (0..p).map(|i| spec.base(i)).collect();
    const TIE: f64 = 1e-12;
    let first_best = |score: &dyn Fn(usize) -> f64| -> usize {
        let best = (0..p).map(score).fold(f64::NEG_INFINITY, f64::max);
        (0..p).find(|&i| score(i) >= best - TIE).unwrap_or(0)
    };
    match location {
        AttackLocation::SinTop => Ok(first_best(&|i| base[i])),
        AttackLocation::SinBottom => Ok(first_best(&|i| -base[i])),
        AttackLocation::SinSide => Ok(first_best(&|i| (base[(i + 1) % p] - base[(i + p - 1) % p]).abs())),
        AttackLocation::Index(i) if i < spec.length => Ok(i),
        AttackLocation::Index(i) => Err(Error::RangeOverflow {
            start: i,
            end: i + 1,
            rows: spec.length,
        }),
    }
}

/// Offset `target_feature` over the attack range. Named locations need the
/// generating `signal`; an explicit index does not.
pub fn inject_attack(
    series: &SeriesMatrix,
    target_feature: usize,
    attack: &AttackSpec,
    signal: Option<&SignalSpec>,
) -> Result<(SeriesMatrix, AttackRange)> {
    if target_feature >= series.features() {
        return Err(Error::InvalidConfig(format!(
            "target feature {target_feature} out of {} features",
            series.features()
        )));
    }
    attack.validate(series.rows())?;
    let anchor = match (attack.location, signal) {
        (AttackLocation::Index(i), _) => i,
        (loc, Some(spec)) => anchor_index(spec, loc)? + attack.cycle * spec.period,
        (loc, None) => {
            return Err(Error::InvalidConfig(format!("location {loc} needs the signal spec")));
        }
    };
    let range = AttackRange {
        start: anchor,
        end: anchor + attack.duration,
    };
    if range.end > series.rows() {
        return Err(Error::RangeOverflow {
            start: range.start,
            end: range.end,
            rows: series.rows(),
        });
    }
    let direction = match attack.sign {
        AttackSign::Positive => 1.0,
        AttackSign::Negative => -1.0,
        AttackSign::AwayFromZero => {
            let clean = match signal {
                Some(spec) if target_feature < spec.channels.len() => spec.clean_value(target_feature, anchor),
                _ => series.values()[[anchor, target_feature]],
            };
            if clean < 0.0 {
                -1.0
            } else {
                1.0
            }
        }
    };
    let mut values = series.values().to_owned();
    for (k, t) in (range.start..range.end).enumerate() {
        values[[t, target_feature]] += direction * attack.offset_at(k);
    }
    Ok((series.with_values(values)?, range))
}
