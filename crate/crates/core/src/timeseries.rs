//! Multivariate time series: normalization, sliding windows, subsampling and
//! CSV ingestion/export.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `T x N` series of feature vectors sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMatrix {
    values: Array2<f64>,
    feature_names: Vec<String>,
    dt: f64,
}

impl SeriesMatrix {
    pub fn new(values: Array2<f64>, feature_names: Vec<String>, dt: f64) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidSeries(format!("shape {rows}x{cols} is empty")));
        }
        if feature_names.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                actual: feature_names.len(),
            });
        }
        let unique: HashSet<&String> = feature_names.iter().collect();
        if unique.len() != cols {
            return Err(Error::InvalidSeries("duplicate feature names".into()));
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidSeries(format!("non-finite value {v} at ({r}, {c})")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidSeries(format!("sampling interval {dt} must be positive")));
        }
        Ok(Self {
            values,
            feature_names,
            dt,
        })
    }

    /// Series with generated feature names `f0, f1, ...` and `dt = 1`.
    pub fn from_array(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|j| format!("f{j}")).collect();
        Self::new(values, names, 1.0)
    }

    /// Single-feature series.
    pub fn from_column(values: &[f64]) -> Result<Self> {
        let arr = Array2::from_shape_vec((values.len(), 1), values.to_vec())
            .map_err(|e| Error::InvalidSeries(e.to_string()))?;
        Self::from_array(arr)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn features(&self) -> usize {
        self.values.ncols()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Same metadata, new values of identical shape. Values are validated.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Self::new(values, self.feature_names.clone(), self.dt)
    }

    /// Rows `start..end` as a new series.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows() {
            return Err(Error::RangeOverflow {
                start,
                end,
                rows: self.rows(),
            });
        }
        Self::new(
            self.values.slice(s![start..end, ..]).to_owned(),
            self.feature_names.clone(),
            self.dt,
        )
    }

    /// Largest absolute element-wise difference to `other` (shapes must match).
    pub fn max_abs_diff(&self, other: &SeriesMatrix) -> Result<f64> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Per-feature min/max used for min-max scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(series: &SeriesMatrix) -> Self {
        let v = series.values();
        let min = v
            .axis_iter(Axis(1))
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let max = v
            .axis_iter(Axis(1))
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Indices of constant features (`min == max`).
    pub fn degenerate(&self) -> Vec<usize> {
        self.min
            .iter()
            .zip(&self.max)
            .enumerate()
            .filter(|(_, (lo, hi))| lo == hi)
            .map(|(j, _)| j)
            .collect()
    }

    fn check(&self, series: &SeriesMatrix) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::DimensionMismatch {
                expected: self.min.len(),
                actual: self.max.len(),
            });
        }
        if self.dim() != series.features() {
            return Err(Error::DimensionMismatch {
                expected: series.features(),
                actual: self.dim(),
            });
        }
        if let Some(j) = (0..self.dim()).find(|&j| !(self.min[j] <= self.max[j])) {
            return Err(Error::InvalidConfig(format!(
                "normalization base for feature {j} has min > max"
            )));
        }
        Ok(())
    }
}

/// Min-max scale every feature to `[0, 1]` of `base` (or of the series' own
/// range). Values outside the base range are not clipped; constant features
/// map to 0.
pub fn normalize(series: &SeriesMatrix, base: Option<&NormStats>) -> Result<(SeriesMatrix, NormStats)> {
    let stats = match base {
        Some(b) => b.clone(),
        None => NormStats::fit(series),
    };
    stats.check(series)?;
    let mut out = series.values().to_owned();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let (lo, hi) = (stats.min[j], stats.max[j]);
        let span = hi - lo;
        if span == 0.0 {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - lo) / span);
        }
    }
    Ok((series.with_values(out)?, stats))
}

/// Inverse of [`normalize`] for non-degenerate features (constant features
/// come back as their base value).
pub fn denormalize(series: &SeriesMatrix, stats: &NormStats) -> Result<SeriesMatrix> {
    stats.check(series)?;
    let mut out = series.values().to_owned();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let (lo, hi) = (stats.min[j], stats.max[j]);
        col.mapv_inplace(|v| v * (hi - lo) + lo);
    }
    series.with_values(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub length: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowConfig {
    pub fn new(length: usize, stride: usize) -> Result<Self> {
        let cfg = Self { length, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "window length ({}) and stride ({}) must be positive",
                self.length, self.stride
            )));
        }
        Ok(())
    }

    /// `floor((rows - length) / stride) + 1`.
    pub fn count(&self, rows: usize) -> Result<usize> {
        self.validate()?;
        if self.length > rows {
            return Err(Error::WindowTooLong {
                length: self.length,
                rows,
            });
        }
        Ok((rows - self.length) / self.stride + 1)
    }

    pub fn starts(&self, rows: usize) -> Result<Vec<usize>> {
        let n = self.count(rows)?;
        Ok((0..n).map(|i| i * self.stride).collect())
    }
}

/// Sliding `length x N` windows starting at `0, stride, 2*stride, ...`.
pub fn window(series: &SeriesMatrix, cfg: &WindowConfig) -> Result<Vec<Array2<f64>>> {
    let starts = cfg.starts(series.rows())?;
    Ok(starts
        .into_iter()
        .map(|i| series.values.slice(s![i..i + cfg.length, ..]).to_owned())
        .collect())
}

/// Keep every `factor`-th row starting at row 0.
pub fn subsample(series: &SeriesMatrix, factor: usize) -> Result<SeriesMatrix> {
    if factor == 0 {
        return Err(Error::InvalidConfig("subsample factor must be >= 1".into()));
    }
    let values = series.values.slice(s![..;factor, ..]).to_owned();
    SeriesMatrix::new(values, series.feature_names.clone(), series.dt * factor as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeaderPolicy {
    /// First row holds feature names.
    #[default]
    Present,
    /// No header; columns are named `c0, c1, ...`.
    Absent,
}

/// Read selected numeric columns from a CSV file. An empty selection keeps
/// every column. Row numbers in errors count data rows from 1.
pub fn ingest_csv(path: impl AsRef<Path>, selection: &[String], header: HeaderPolicy) -> Result<SeriesMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header == HeaderPolicy::Present)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));

    let mut records = reader.records().peekable();
    let columns: Vec<String> = match header {
        HeaderPolicy::Present => reader_headers(path)?,
        HeaderPolicy::Absent => match records.peek() {
            Some(Ok(r)) => (0..r.len()).map(|j| format!("c{j}")).collect(),
            Some(Err(_)) => Vec::new(),
            None => return Err(Error::Empty(path.display().to_string())),
        },
    };

    let selected: Vec<(usize, String)> = if selection.is_empty() {
        columns.iter().cloned().enumerate().collect()
    } else {
        selection
            .iter()
            .map(|name| {
                columns
                    .iter()
                    .position(|c| c == name)
                    .map(|j| (j, name.clone()))
                    .ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect::<Result<_>>()?
    };

    let mut data = Vec::new();
    let mut rows = 0usize;
    for (i, record) in records.enumerate() {
        let record = record?;
        let row = i + 1;
        for (j, name) in &selected {
            let cell = record.get(*j).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    row,
                    column: name.clone(),
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty(path.display().to_string()));
    }
    let values = Array2::from_shape_vec((rows, selected.len()), data)
        .map_err(|e| Error::InvalidSeries(e.to_string()))?;
    SeriesMatrix::new(values, selected.into_iter().map(|(_, n)| n).collect(), 1.0)
}

fn reader_headers(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader.headers()?;
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Empty(path.display().to_string()));
    }
    Ok(headers.iter().map(str::to_string).collect())
}

/// Shortest decimal string that round-trips the value rounded to 9
/// significant digits.
pub fn format_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

pub fn write_csv<W: Write>(series: &SeriesMatrix, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(series.feature_names())?;
    for row in series.values().rows() {
        writer.write_record(row.iter().map(|&v| format_sig9(v)))?;
    }
    writer.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn export_csv(series: &SeriesMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(series, file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn col(v: &[f64]) -> SeriesMatrix {
        SeriesMatrix::from_column(v).unwrap()
    }

    #[test]
    fn rejects_bad_series() {
        assert!(SeriesMatrix::from_array(Array2::zeros((0, 1))).is_err());
        assert!(SeriesMatrix::from_array(array![[1.0, f64::NAN]]).is_err());
        assert!(SeriesMatrix::new(array![[1.0, 2.0]], vec!["a".into(), "a".into()], 1.0).is_err());
        assert!(SeriesMatrix::new(array![[1.0, 2.0]], vec!["a".into()], 1.0).is_err());
    }

    #[test]
    fn normalize_maps_endpoints() {
        let (n, stats) = normalize(&col(&[0.0, 5.0, 10.0]), None).unwrap();
        assert_eq!(n.values().column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(stats.min, vec![0.0]);
        assert_eq!(stats.max, vec![10.0]);
    }

    #[test]
    fn normalize_does_not_clip() {
        let base = NormStats {
            min: vec![0.0],
            max: vec![10.0],
        };
        let (n, _) = normalize(&col(&[12.0]), Some(&base)).unwrap();
        assert!((n.values()[[0, 0]] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn test_split_reuses_train_stats() {
        let train = col(&[1.0, 3.0, 2.0]);
        let test = col(&[0.0, 4.0]);
        let (_, train_stats) = normalize(&train, None).unwrap();
        let (_, test_stats) = normalize(&test, Some(&train_stats)).unwrap();
        assert_eq!(train_stats, test_stats);
    }

    #[test]
    fn degenerate_feature_maps_to_zero() {
        let s = SeriesMatrix::from_array(array![[1.0, 7.0], [2.0, 7.0]]).unwrap();
        let (n, stats) = normalize(&s, None).unwrap();
        assert_eq!(stats.degenerate(), vec![1]);
        assert_eq!(n.values().column(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_dimension_mismatch() {
        let base = NormStats {
            min: vec![0.0, 0.0],
            max: vec![1.0, 1.0],
        };
        assert!(matches!(
            normalize(&col(&[1.0]), Some(&base)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn window_counts_and_contents() {
        let s = col(&(0..100).map(f64::from).collect::<Vec<_>>());
        let cfg = WindowConfig::new(2, 1).unwrap();
        assert_eq!(window(&s, &cfg).unwrap().len(), 99);

        let s = col(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let w = window(&s, &cfg).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[0], array![[0.0], [1.0]]);

        let long = WindowConfig::new(6, 1).unwrap();
        assert!(matches!(window(&s, &long), Err(Error::WindowTooLong { .. })));
        assert!(WindowConfig::new(0, 1).is_err());
    }

    #[test]
    fn subsample_rows_and_dt() {
        let s = col(&(0..10).map(f64::from).collect::<Vec<_>>());
        let sub = subsample(&s, 5).unwrap();
        assert_eq!(sub.values().column(0).to_vec(), vec![0.0, 5.0]);
        assert_eq!(sub.dt(), 5.0);
        assert_eq!(subsample(&s, 1).unwrap(), s);
        assert!(subsample(&s, 0).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.1), "0.1");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(-1.25e-7), "-0.000000125");
        assert_eq!(format_sig9(0.0), "0");
    }
}
