//! Scores and analysis: MAE, ensemble CRPS, fractions skill score, PDF
//! histograms, Pearson correlation, area averages and variance-quartile
//! stratification of errors. Everything here is a pure function with a
//! fixed summation order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("fields of {} and {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty field".into()));
    }
    Ok(())
}

fn check_finite(name: &str, v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{name} has a non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Mean absolute difference.
pub fn mae(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_pair(pred, truth)?;
    check_finite("prediction", pred)?;
    check_finite("truth", truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrpsVariant {
    /// `mean_k |X_k - y| - 1/(2N^2) sum_kl |X_k - X_l|`
    #[default]
    Standard,
    /// Spread term divided by `2N(N-1)` instead (unbiased for finite ensembles).
    Fair,
}

/// `sum_{k,l} |x_k - x_l|` through the sorted-order identity
/// `2 sum_i (2i - N + 1) x_(i)`.
fn pairwise_abs_sum(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    2.0 * sorted.iter().enumerate().map(|(i, &x)| (2.0 * i as f64 - n + 1.0) * x).sum::<f64>()
}

/// CRPS of one point forecast ensemble against a scalar observation.
pub fn crps_point(members: &[f64], obs: f64, variant: CrpsVariant) -> Result<f64> {
    let n = members.len();
    if n == 0 {
        return Err(Error::Data("CRPS needs at least one member".into()));
    }
    let skill = members.iter().map(|x| (x - obs).abs()).sum::<f64>() / n as f64;
    let mut s = members.to_vec();
    s.sort_by(f64::total_cmp);
    let pairs = pairwise_abs_sum(&s);
    let spread = match variant {
        CrpsVariant::Standard => pairs / (2.0 * (n * n) as f64),
        CrpsVariant::Fair if n > 1 => pairs / (2.0 * (n * (n - 1)) as f64),
        CrpsVariant::Fair => 0.0,
    };
    Ok(skill - spread)
}

/// Grid-averaged ensemble CRPS. `members` holds one field per member.
pub fn crps_ensemble(members: &[&[f32]], obs: &[f32], variant: CrpsVariant) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Data("CRPS needs at least one member".into()));
    }
    for m in members {
        check_pair(m, obs)?;
        check_finite("ensemble member", m)?;
    }
    check_finite("observation", obs)?;
    let mut buf = vec![0.0f64; members.len()];
    let mut total = 0.0;
    for (j, &y) in obs.iter().enumerate() {
        for (b, m) in buf.iter_mut().zip(members) {
            *b = m[j] as f64;
        }
        total += crps_point(&buf, y as f64, variant)?;
    }
    Ok(total / obs.len() as f64)
}

/// Window means of a 0/1 field, each cell averaging only the in-grid part of
/// its `window x window` neighbourhood.
fn fractions(binary: &[f64], rows: usize, cols: usize, window: usize) -> Vec<f64> {
    let mut sat = vec![0.0f64; (rows + 1) * (cols + 1)];
    for r in 0..rows {
        for c in 0..cols {
            sat[(r + 1) * (cols + 1) + c + 1] =
                binary[r * cols + c] + sat[r * (cols + 1) + c + 1] + sat[(r + 1) * (cols + 1) + c]
                    - sat[r * (cols + 1) + c];
        }
    }
    let h = window / 2;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let (r0, r1) = (r.saturating_sub(h), (r + h + 1).min(rows));
        for c in 0..cols {
            let (c0, c1) = (c.saturating_sub(h), (c + h + 1).min(cols));
            let s = sat[r1 * (cols + 1) + c1] - sat[r0 * (cols + 1) + c1] - sat[r1 * (cols + 1) + c0]
                + sat[r0 * (cols + 1) + c0];
            out[r * cols + c] = s / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    out
}

/// Fractions skill score of `pred` against `truth`. An event is a value at
/// or above `threshold`. Returns 1 when neither field has any event.
pub fn fss(pred: &Field<f32>, truth: &Field<f32>, threshold: f64, window: usize) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!("fss on {:?} and {:?}", pred.shape(), truth.shape())));
    }
    let (rows, cols) = pred.shape();
    if window % 2 == 0 {
        return Err(Error::Config(format!("FSS window must be odd, got {window}")));
    }
    if window > rows.min(cols) {
        return Err(Error::Config(format!("FSS window {window} exceeds the {rows}x{cols} grid")));
    }
    let bin = |f: &Field<f32>| -> Vec<f64> {
        f.as_slice().iter().map(|&v| if v as f64 >= threshold { 1.0 } else { 0.0 }).collect()
    };
    let pf = fractions(&bin(pred), rows, cols, window);
    let po = fractions(&bin(truth), rows, cols, window);
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in pf.iter().zip(&po) {
        num += (a - b) * (a - b);
        den += a * a + b * b;
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Density per bin such that `sum density * width = 1` over the values that
/// fall inside the edges and are at least `cutoff`.
pub fn pdf_histogram(values: &[f32], edges: &[f64], cutoff: Option<f64>) -> Result<Vec<f64>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("histogram edges must be strictly increasing with at least two entries".into()));
    }
    let nb = edges.len() - 1;
    let mut counts = vec![0usize; nb];
    let last = edges[nb];
    for &v in values {
        let v = v as f64;
        if !v.is_finite() || cutoff.is_some_and(|c| v < c) || v < edges[0] || v > last {
            continue;
        }
        // Bins are [e_i, e_{i+1}); the top edge belongs to the last bin.
        let i = edges.partition_point(|&e| e <= v).saturating_sub(1).min(nb - 1);
        counts[i] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("no values inside the histogram range after the cutoff".into()));
    }
    Ok(counts.iter().zip(edges.windows(2)).map(|(&c, w)| c as f64 / (total as f64 * (w[1] - w[0]))).collect())
}

/// Product-moment correlation over grid points.
pub fn pearson(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = pred.len() as f64;
    let ma = pred.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = truth.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&a, &b) in pred.iter().zip(truth) {
        let (da, db) = (a as f64 - ma, b as f64 - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("correlation undefined for a constant field".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Unweighted regional mean.
pub fn area_average(field: &Field<f32>) -> f64 {
    field.as_slice().iter().map(|&v| v as f64).sum::<f64>() / field.len() as f64
}

/// Regional mean with `cos(latitude)` weights; `lats` holds one latitude
/// in degrees per row.
pub fn area_average_weighted(field: &Field<f32>, lats: &[f64]) -> Result<f64> {
    if lats.len() != field.rows() {
        return Err(Error::Shape(format!("{} latitudes for {} rows", lats.len(), field.rows())));
    }
    let (mut s, mut w) = (0.0, 0.0);
    for (r, lat) in lats.iter().enumerate() {
        let wr = lat.to_radians().cos();
        for c in 0..field.cols() {
            s += wr * field.get(r, c) as f64;
        }
        w += wr * field.cols() as f64;
    }
    if w <= 0.0 {
        return Err(Error::Numeric("latitude weights sum to zero".into()));
    }
    Ok(s / w)
}

/// Grid points split into four groups by ensemble variance quartile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGroups {
    /// Variance at the 75th, 50th and 25th percentiles (nearest rank).
    pub thresholds: [f64; 3],
    /// MAE75-100, MAE50-75, MAE25-50, MAE0-25.
    pub mae: [f64; 4],
    /// Points per group, in the same order as `mae`.
    pub sizes: [usize; 4],
    /// Group of each grid point: 0 for the top quarter (75-100) through 3 for the bottom.
    pub group: Vec<u8>,
}

impl UncertaintyGroups {
    pub const LABELS: [&'static str; 4] = ["MAE75-100", "MAE50-75", "MAE25-50", "MAE0-25"];

    pub fn mask(&self, g: usize) -> Vec<bool> {
        self.group.iter().map(|&k| k as usize == g).collect()
    }
}

/// Nearest-rank percentile position (0-based) in a sorted sample of `n`.
fn rank_index(p: f64, n: usize) -> usize {
    ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1
}

/// Stratifies `abs_error` by quartiles of `variance`. Points are ordered by
/// variance with ties kept in grid order; the point at the nearest-rank 25th,
/// 50th and 75th percentile closes the lower group, so group sizes differ by
/// at most one.
pub fn variance_groups(variance: &[f32], abs_error: &[f32]) -> Result<UncertaintyGroups> {
    check_pair(variance, abs_error)?;
    check_finite("variance", variance)?;
    check_finite("absolute error", abs_error)?;
    let n = variance.len();
    if n < 4 {
        return Err(Error::Data(format!("variance stratification needs at least 4 points, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| variance[a].total_cmp(&variance[b]));
    let cuts = [rank_index(25.0, n), rank_index(50.0, n), rank_index(75.0, n)];
    let mut group = vec![0u8; n];
    let mut sums = [0.0f64; 4];
    let mut sizes = [0usize; 4];
    for (pos, &i) in order.iter().enumerate() {
        let g = if pos <= cuts[0] {
            3
        } else if pos <= cuts[1] {
            2
        } else if pos <= cuts[2] {
            1
        } else {
            0
        };
        group[i] = g as u8;
        sums[g] += abs_error[i] as f64;
        sizes[g] += 1;
    }
    let mut mae = [0.0; 4];
    for g in 0..4 {
        mae[g] = if sizes[g] > 0 { sums[g] / sizes[g] as f64 } else { f64::NAN };
    }
    let t = |k: usize| variance[order[cuts[k]]] as f64;
    Ok(UncertaintyGroups { thresholds: [t(2), t(1), t(0)], mae, sizes, group })
}

/// One scored quantity. `lead_time` is `None` for analysis-time scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variable: String,
    pub level: String,
    pub metric: String,
    pub lead_time: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub split: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// Long-format collection of scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(meta: ReportMeta) -> Self {
        Self { meta, rows: Vec::new() }
    }

    /// Adds a score; non-finite values are rejected.
    pub fn push(
        &mut self,
        variable: &str,
        level: &str,
        metric: &str,
        lead_time: Option<f64>,
        value: f64,
    ) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{metric} for {variable}@{level} is {value}")));
        }
        self.rows.push(MetricRow {
            variable: variable.into(),
            level: level.into(),
            metric: metric.into(),
            lead_time,
            value,
        });
        Ok(())
    }

    pub fn get(&self, variable: &str, level: &str, metric: &str, lead_time: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variable == variable && r.level == level && r.metric == metric && r.lead_time == lead_time)
            .map(|r| r.value)
    }

    /// Rows of one metric whose lead time is set, as `(variable, level) -> [(lead, value)]`.
    pub fn curve(&self, variable: &str, level: &str, metric: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variable == variable && r.level == level && r.metric == metric)
            .filter_map(|r| r.lead_time.map(|t| (t, r.value)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,level,metric,lead_time,value\n");
        for r in &self.rows {
            let lt = r.lead_time.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.variable, r.level, r.metric, lt, r.value);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
