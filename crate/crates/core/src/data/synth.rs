//! Synthetic paired coarse/fine datasets with known ground truth.
//!
//! Every non-static channel on the fine grid is
//!
//! ```text
//! mean + std * ( sqrt(f) * sign * T  +  sqrt(1 - f) * M * G )
//! ```
//!
//! where `T` is a fixed terrain-locked field sharing its Fourier phases with the
//! orography, `G` a fresh Gaussian random field per sample, `M` a fixed smooth
//! amplitude map (making small-scale variability spatially heterogeneous) and
//! `f` the terrain fraction. `T` and `G` share the channel's spectral slope.
//! Radar-like channels are a rectified function of a moisture channel. Coarse
//! inputs are block means of the fine truth plus optional white noise.

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetManifest, DatasetWriter, Split};
use super::norm::NormMode;
use super::variables::{Level, VariableSpec, VariableTable};
use crate::error::{Error, Result};
use crate::grid::{block_coarsen_slice, GridPair};

/// Spectral slope of "surface-like" rough fields (2D power spectrum ~ k^-slope).
pub const ROUGH_SLOPE: f64 = 2.5;
/// Spectral slope of the smoothest (uppermost) pressure-level fields.
pub const SMOOTH_SLOPE_TOP: f64 = 4.5;
/// Spectral slope of the lowest pressure-level fields.
pub const SMOOTH_SLOPE_BOTTOM: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Rough,
    Smooth,
    Radar,
    Terrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub kind: SynthKind,
    pub slope: f64,
    pub mean: f64,
    pub std: f64,
    pub terrain_fraction: f64,
    pub terrain_sign: f64,
}

/// Physical-looking means and spreads plus a spectral class for a variable.
pub fn channel_profile(spec: &VariableSpec) -> ChannelProfile {
    let (kind, slope, terrain_fraction) = match spec.level {
        Level::Static => (SynthKind::Terrain, ROUGH_SLOPE, 0.0),
        _ if spec.fixed_range.is_some() || spec.name == "radar" => (SynthKind::Radar, 0.0, 0.0),
        Level::Pressure(p) => {
            let depth = (p.min(925) as f64 / 925.0).clamp(0.0, 1.0);
            let slope = SMOOTH_SLOPE_TOP + (SMOOTH_SLOPE_BOTTOM - SMOOTH_SLOPE_TOP) * depth;
            (SynthKind::Smooth, slope, 0.6 + 0.2 * depth)
        }
        _ => (SynthKind::Rough, ROUGH_SLOPE, 0.8),
    };
    let p = match spec.level {
        Level::Pressure(p) => p as f64,
        _ => 1000.0,
    };
    let (mean, std, terrain_sign) = match (spec.name.as_str(), spec.level) {
        ("orography", _) => (1000.0, 800.0, 1.0),
        ("t", Level::Height2m) => (288.0, 6.0, -1.0),
        ("t", _) => (218.0 + 0.075 * p, 4.0, -1.0),
        ("u", _) => (5.0, 6.0, 1.0),
        ("v", _) => (0.0, 6.0, 1.0),
        ("z", _) => (44330.0 * (1.0 - (p / 1013.25).powf(0.19)), 40.0, 1.0),
        ("q", _) => (0.012 * (p / 1000.0).powi(3), 0.003 * (p / 1000.0).powi(3), -1.0),
        ("tcwv", _) => (30.0, 10.0, -1.0),
        ("msl", _) => (101300.0, 800.0, 1.0),
        ("sp", _) => (95000.0, 1500.0, -1.0),
        _ => (0.0, 1.0, 1.0),
    };
    ChannelProfile { kind, slope, mean, std, terrain_fraction, terrain_sign }
}

/// The default desk-scale plan: two rough surface channels, three smooth
/// pressure-level channels, one radar-like output and static orography.
pub fn default_synthetic_table() -> VariableTable {
    let spec = |name: &str, level: Level, i: bool, o: bool| VariableSpec {
        name: name.into(),
        level,
        in_input: i,
        in_output: o,
        residual_pair: None,
        fixed_range: None,
    };
    let mut specs = vec![
        spec("t", Level::Height2m, true, true),
        spec("u", Level::Height10m, true, true),
        spec("z", Level::Pressure(500), true, true),
        spec("t", Level::Pressure(850), true, true),
        spec("q", Level::Pressure(700), true, true),
        spec("radar", Level::Surface, false, true),
        spec("orography", Level::Static, true, false),
    ];
    specs[5].fixed_range = Some(super::variables::RADAR_RANGE_DBZ);
    VariableTable::new(specs).expect("default synthetic table is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Std of white noise added to coarse inputs, in units of each channel's std.
    pub error_level: f64,
    pub norm_mode: NormMode,
}

/// 2D FFT helper working on a row-major complex buffer.
pub(crate) struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    row_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            col_fwd: planner.plan_fft_forward(rows),
            row_inv: planner.plan_fft_inverse(cols),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    fn run(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let (r, c) = (self.rows, self.cols);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        row.process(buf);
        let mut t = vec![Complex::new(0.0, 0.0); r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = buf[i * c + j];
            }
        }
        col.process(&mut t);
        for i in 0..r {
            for j in 0..c {
                buf[i * c + j] = t[j * r + i];
            }
        }
    }

    pub(crate) fn forward(&self, buf: &mut [Complex<f64>]) {
        self.run(buf, false);
    }

    pub(crate) fn inverse(&self, buf: &mut [Complex<f64>]) {
        self.run(buf, true);
        let s = 1.0 / (self.rows * self.cols) as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

/// Radial wavenumber in cycles per grid cell for FFT bin (i, j).
pub(crate) fn wavenumber(i: usize, j: usize, rows: usize, cols: usize) -> f64 {
    let fy = i.min(rows - i) as f64 / rows as f64;
    let fx = j.min(cols - j) as f64 / cols as f64;
    (fx * fx + fy * fy).sqrt()
}

fn white_spectrum(fft: &Fft2, rng: &mut ChaCha8Rng) -> Vec<Complex<f64>> {
    let n = fft.rows * fft.cols;
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    fft.forward(&mut buf);
    buf
}

/// Shapes a white spectrum to power ~ k^-slope and returns the standardised real field.
fn shaped_field(fft: &Fft2, white: &[Complex<f64>], slope: f64) -> Vec<f64> {
    let (r, c) = (fft.rows, fft.cols);
    let mut buf = white.to_vec();
    for i in 0..r {
        for j in 0..c {
            let k = wavenumber(i, j, r, c);
            let amp = if k == 0.0 { 0.0 } else { k.powf(-slope / 2.0) };
            buf[i * c + j] *= amp;
        }
    }
    fft.inverse(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in &mut out {
        *v = (*v - mean) / std;
    }
    out
}

/// Zero-mean, unit-variance Gaussian random field with power spectrum ~ k^-slope.
pub fn gaussian_random_field(seed: u64, stream: u64, rows: usize, cols: usize, slope: f64) -> Vec<f64> {
    let fft = Fft2::new(rows, cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    shaped_field(&fft, &white_spectrum(&fft, &mut rng), slope)
}

fn timestamp(split: Split, i: usize) -> String {
    let base = match split {
        Split::Train => NaiveDate::from_ymd_opt(2019, 1, 1),
        Split::Val => NaiveDate::from_ymd_opt(2023, 1, 1),
    }
    .unwrap()
    .and_hms_opt(0, 0, 0)
    .unwrap();
    (base + Duration::hours(3 * i as i64)).format("%Y%m%d%H").to_string()
}

const STREAM_OROGRAPHY: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_SAMPLES: u64 = 1 << 20;

/// Static fields shared by every sample of a synthetic dataset.
struct SynthStatics {
    fft: Fft2,
    orography_white: Vec<Complex<f64>>,
    mask: Vec<f64>,
}

impl SynthStatics {
    fn new(seed: u64, rows: usize, cols: usize) -> Self {
        let fft = Fft2::new(rows, cols);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_OROGRAPHY);
        let orography_white = white_spectrum(&fft, &mut rng);
        rng.set_stream(STREAM_MASK);
        let mask_white = white_spectrum(&fft, &mut rng);
        let smooth = shaped_field(&fft, &mask_white, 4.0);
        let mut mask: Vec<f64> = smooth.iter().map(|s| (0.6 * s).exp()).collect();
        let rms = (mask.iter().map(|m| m * m).sum::<f64>() / mask.len() as f64).sqrt();
        for m in &mut mask {
            *m /= rms;
        }
        Self { fft, orography_white, mask }
    }

    fn terrain(&self, slope: f64) -> Vec<f64> {
        shaped_field(&self.fft, &self.orography_white, slope)
    }
}

/// Fine-grid truth of every non-static, non-radar variable for one sample.
fn sample_fields(
    statics: &SynthStatics,
    terrain: &[(usize, Vec<f64>)],
    profiles: &[ChannelProfile],
    seed: u64,
    sample: u64,
) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; profiles.len()];
    for (ch, t) in terrain {
        let p = &profiles[*ch];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_SAMPLES + sample * 1024 + *ch as u64);
        let g = shaped_field(&statics.fft, &white_spectrum(&statics.fft, &mut rng), p.slope);
        let (wt, ws) = (p.terrain_fraction.sqrt(), (1.0 - p.terrain_fraction).sqrt());
        let field = t
            .iter()
            .zip(&g)
            .zip(&statics.mask)
            .map(|((&tv, &gv), &m)| p.mean + p.std * (wt * p.terrain_sign * tv + ws * m * gv))
            .collect();
        out[*ch] = Some(field);
    }
    out
}

/// Channel used to drive radar-like fields: the first moisture-like variable.
fn radar_source(table: &VariableTable, profiles: &[ChannelProfile]) -> Option<usize> {
    let specs = table.specs();
    let generated = |i: usize| matches!(profiles[i].kind, SynthKind::Rough | SynthKind::Smooth);
    ["q", "tcwv"]
        .iter()
        .find_map(|name| (0..specs.len()).find(|&i| specs[i].name == *name && generated(i)))
        .or_else(|| (0..specs.len()).find(|&i| generated(i)))
}

/// Rectified, sparse reflectivity-like field from a driving channel.
fn radar_field(source: &[f64], profile: &ChannelProfile, range: [f64; 2]) -> Vec<f64> {
    source
        .iter()
        .map(|&v| {
            let anomaly = (v - profile.mean) / profile.std;
            (25.0 * (anomaly - 0.8)).clamp(range[0].max(0.0), range[1])
        })
        .collect()
}

/// Generates a synthetic dataset under `root` and fits normalisation
/// statistics on its training split.
pub fn synth_generate(
    root: &std::path::Path,
    opts: &SynthOptions,
    pair: &GridPair,
    table: &VariableTable,
) -> Result<Dataset> {
    let factor = pair.integer_factor().ok_or_else(|| {
        Error::Grid(format!(
            "synthetic data needs an aligned pair with an integer refinement factor; coarse {}x{} fine {}x{}",
            pair.coarse.n_lat, pair.coarse.n_lon, pair.fine.n_lat, pair.fine.n_lon
        ))
    })?;
    if opts.n_train == 0 || opts.n_val == 0 {
        return Err(Error::Config(format!(
            "synthetic dataset needs samples in both splits (train={}, val={})",
            opts.n_train, opts.n_val
        )));
    }
    if !(opts.error_level >= 0.0) {
        return Err(Error::Config(format!("error level must be >= 0, got {}", opts.error_level)));
    }
    let (m, n) = pair.fine.shape();
    let (p, q) = pair.coarse.shape();
    let specs = table.specs();
    let profiles: Vec<ChannelProfile> = specs.iter().map(channel_profile).collect();
    let statics = SynthStatics::new(opts.seed, m, n);
    let mut terrain = Vec::new();
    for (i, prof) in profiles.iter().enumerate() {
        if matches!(prof.kind, SynthKind::Rough | SynthKind::Smooth) {
            terrain.push((i, statics.terrain(prof.slope)));
        }
    }
    let radar_src = radar_source(table, &profiles);

    let mut manifest = DatasetManifest::new(*pair, table.clone());
    manifest.static_blob = None;
    let mut writer = DatasetWriter::create(root, manifest)?;

    if table.n_static() > 0 {
        let mut st = Vec::with_capacity(table.n_static() * m * n);
        for (i, _) in specs.iter().enumerate().filter(|(_, s)| s.level == Level::Static) {
            let prof = &profiles[i];
            let t = statics.terrain(prof.slope);
            st.extend(t.iter().map(|v| (prof.mean + prof.std * v) as f32));
        }
        writer.write_static(&st)?;
    }

    let splits = std::iter::repeat_n(Split::Train, opts.n_train)
        .enumerate()
        .chain(std::iter::repeat_n(Split::Val, opts.n_val).enumerate());
    for (sample, (i_split, split)) in splits.enumerate() {
        let fields = sample_fields(&statics, &terrain, &profiles, opts.seed, sample as u64);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        noise_rng.set_stream(STREAM_SAMPLES + sample as u64 * 1024 + 1023);

        let mut x = Vec::with_capacity(table.n_coarse_inputs() * p * q);
        let mut y = Vec::with_capacity(table.c_out() * m * n);
        for (i, s) in specs.iter().enumerate() {
            let prof = &profiles[i];
            let fine: Option<Vec<f64>> = match prof.kind {
                SynthKind::Terrain => None,
                SynthKind::Radar => {
                    let src =
                        radar_src.ok_or_else(|| Error::Config(format!("no channel available to drive {}", s.key())))?;
                    let range = s.fixed_range.unwrap_or(super::variables::RADAR_RANGE_DBZ);
                    Some(radar_field(fields[src].as_ref().unwrap(), &profiles[src], range))
                }
                _ => fields[i].clone(),
            };
            let Some(fine) = fine else { continue };
            if s.in_input {
                let mut coarse = vec![0.0f64; p * q];
                block_coarsen_slice(&fine, m, n, factor, &mut coarse);
                for v in &mut coarse {
                    if opts.error_level > 0.0 {
                        let e: f64 = StandardNormal.sample(&mut noise_rng);
                        *v += opts.error_level * prof.std * e;
                    }
                    x.push(*v as f32);
                }
            }
            if s.in_output {
                y.extend(fine.iter().map(|&v| v as f32));
            }
        }
        writer.push(&timestamp(split, i_split), split, &x, &y)?;
    }
    let mut ds = writer.finish()?;
    ds.fit_norm_stats(opts.norm_mode)?;
    Ok(ds)
}
