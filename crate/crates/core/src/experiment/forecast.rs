//! Lead-time emulation: coarse inputs are degraded with noise that shares
//! each field's own amplitude spectrum, then downscaled and scored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;

use crate::data::synth::Fft2;
use crate::data::{Dataset, VariableTable};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::verification::{mae, MetricReport, ReportMeta};
use crate::workers::map_ordered;

use super::config::ForecastScenario;

/// Variable name of the scale-normalised all-channel rows.
pub const ALL_CHANNELS: &str = "all";

/// Phase-randomised surrogate of the anomaly of `field` (`rows x cols`):
/// identical amplitude spectrum, phases taken from seeded white noise. The
/// result has zero mean and the anomaly's variance.
pub fn spectral_surrogate(field: &[f32], rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if field.len() != rows * cols || field.is_empty() {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} field", field.len())));
    }
    let fft = Fft2::new(rows, cols);
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / field.len() as f64;
    let mut a: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    fft.forward(&mut a);
    let mut w: Vec<Complex<f64>> = (0..field.len()).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    fft.forward(&mut w);
    // White noise is real, so its phases are Hermitian and the product stays real.
    for (av, wv) in a.iter_mut().zip(&w) {
        let norm = wv.norm();
        let phase = if norm > 0.0 { wv / norm } else { Complex::new(1.0, 0.0) };
        *av = phase * av.norm();
    }
    fft.inverse(&mut a);
    Ok(a.iter().map(|z| z.re).collect())
}

/// Noise stream for one (lead, sample); shared by every scenario so that
/// scenarios differ only in amplitude.
fn noise_rng(seed: u64, lead: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((lead as u64) << 32) | sample as u64);
    rng
}

/// `x' = x + d * s` per coarse channel, `s` the spectral surrogate of the
/// channel's anomaly. `x` is `[c, p, q]` in physical units; channels with a
/// fixed physical range are clamped to it.
pub fn degrade_inputs(x: &Tensor, table: &VariableTable, d: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != table.n_coarse_inputs() {
        return Err(Error::Shape(format!("coarse input {:?} for {} channels", s, table.n_coarse_inputs())));
    }
    let (p, q) = (s[1], s[2]);
    let mut out = x.clone();
    for (c, spec) in table.coarse_inputs().enumerate() {
        let plane = &mut out.data_mut()[c * p * q..(c + 1) * p * q];
        let noise = spectral_surrogate(plane, p, q, rng)?;
        if d == 0.0 {
            continue;
        }
        for (v, e) in plane.iter_mut().zip(&noise) {
            let mut nv = *v as f64 + d * e;
            if let Some(r) = spec.fixed_range {
                nv = nv.clamp(r[0], r[1]);
            }
            *v = nv as f32;
        }
    }
    Ok(out)
}

/// Runs every scenario over `indices` of `ds`. `predict` maps one physical
/// coarse sample `[1, c, p, q]` to the physical fine prediction
/// `[1, c_out, m, n]` (or `[c_out, m, n]`). Rows: per channel
/// `mae:{tag}` and, under variable `all`, the mean scale-normalised MAE
/// `mae_norm:{tag}`, each with the lead time in hours.
pub fn emulate<F>(
    ds: &Dataset,
    indices: &[usize],
    scenarios: &[ForecastScenario],
    seed: u64,
    meta: ReportMeta,
    predict: F,
) -> Result<MetricReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if scenarios.is_empty() {
        return Err(Error::Config("forecast emulation needs at least one scenario".into()));
    }
    for s in scenarios {
        s.validate()?;
    }
    if indices.is_empty() {
        return Err(Error::Data("no samples to emulate".into()));
    }
    let table = ds.table();
    let stats = ds.stats()?;
    let statics_len = ds.pair().fine.shape();
    let plane = statics_len.0 * statics_len.1;
    let co = table.c_out();
    let mut report = MetricReport::new(meta);
    for sc in scenarios {
        for (li, (&lead, &d)) in sc.lead_times.iter().zip(&sc.degradation).enumerate() {
            // Per sample: MAE per output channel.
            let per = map_ordered(indices, |&i| -> Result<Vec<f64>> {
                let x = ds.load_x(i)?;
                let y = ds.load_y(i)?;
                let mut rng = noise_rng(seed, li, i);
                let xd = degrade_inputs(&x, table, d, &mut rng)?;
                let s = xd.shape().to_vec();
                let pred = predict(&xd.reshape(&[1, s[0], s[1], s[2]])?)?;
                if pred.numel() != y.numel() {
                    return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.shape(), y.shape())));
                }
                (0..co)
                    .map(|o| mae(&pred.data()[o * plane..(o + 1) * plane], &y.data()[o * plane..(o + 1) * plane]))
                    .collect()
            });
            let mut sums = vec![0.0; co];
            for r in per {
                for (s, v) in sums.iter_mut().zip(r?) {
                    *s += v;
                }
            }
            let mut norm = 0.0;
            for (o, spec) in table.outputs().enumerate() {
                let v = sums[o] / indices.len() as f64;
                norm += v / stats.outputs[o].scale();
                report.push(&spec.name, &spec.level.to_string(), &format!("mae:{}", sc.tag), Some(lead), v)?;
            }
            report.push(ALL_CHANNELS, "", &format!("mae_norm:{}", sc.tag), Some(lead), norm / co as f64)?;
        }
    }
    Ok(report)
}

/// CSV of the emulated curves with one row per (scenario, lead, channel).
pub fn curves_csv(report: &MetricReport) -> String {
    let mut out = String::from("tag,variable,level,lead_time,mae\n");
    for r in &report.rows {
        let Some(lead) = r.lead_time else { continue };
        let (kind, tag) = r.metric.split_once(':').unwrap_or((r.metric.as_str(), ""));
        if kind == "mae" || kind == "mae_norm" {
            out.push_str(&format!(
                "{tag},{},{},{lead},{}\n",
                r.variable,
                if kind == "mae_norm" { "normalised" } else { &r.level },
                r.value
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_synthetic_table;
    use rustfft::FftPlanner;

    fn power(field: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        // Independent 2D DFT via a flat planner over rows then columns.
        let mut planner = FftPlanner::<f64>::new();
        let fr = planner.plan_fft_forward(cols);
        let fc = planner.plan_fft_forward(rows);
        let mut buf: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for r in buf.chunks_mut(cols) {
            fr.process(r);
        }
        for c in 0..cols {
            let mut col: Vec<Complex<f64>> = (0..rows).map(|r| buf[r * cols + c]).collect();
            fc.process(&mut col);
            for r in 0..rows {
                buf[r * cols + c] = col[r];
            }
        }
        buf.iter().map(|z| z.norm_sqr()).collect()
    }

    #[test]
    fn surrogate_matches_the_anomaly_spectrum() {
        let (rows, cols) = (12, 18);
        let field: Vec<f32> = (0..rows * cols)
            .map(|k| {
                let (r, c) = ((k / cols) as f32, (k % cols) as f32);
                280.0 + 3.0 * (0.4 * r).sin() + 1.5 * (0.9 * c).cos() + 0.1 * ((k * 7) % 5) as f32
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spectral_surrogate(&field, rows, cols, &mut rng).unwrap();
        let mean = field.iter().map(|&v| v as f64).sum::<f64>() / field.len() as f64;
        let anomaly: Vec<f64> = field.iter().map(|&v| v as f64 - mean).collect();
        let (pa, ps) = (power(&anomaly, rows, cols), power(&s, rows, cols));
        let top = pa.iter().cloned().fold(0.0, f64::max);
        for (a, b) in pa.iter().zip(&ps) {
            assert!((a - b).abs() <= 1e-9 * top, "{a} {b}");
        }
        assert!(s.iter().sum::<f64>().abs() < 1e-9);
        assert!(s.iter().zip(&anomaly).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn zero_degradation_is_identity_and_streams_are_shared() {
        let table = default_synthetic_table();
        let c = table.n_coarse_inputs();
        let x = Tensor::new(&[c, 6, 8], (0..c * 48).map(|k| (k % 17) as f32).collect()).unwrap();
        let same = degrade_inputs(&x, &table, 0.0, &mut noise_rng(1, 0, 0)).unwrap();
        assert_eq!(same, x);
        let a = degrade_inputs(&x, &table, 0.3, &mut noise_rng(1, 2, 5)).unwrap();
        let b = degrade_inputs(&x, &table, 0.6, &mut noise_rng(1, 2, 5)).unwrap();
        // Common random numbers: the perturbation scales linearly with d.
        for ((xa, xb), x0) in a.data().iter().zip(b.data()).zip(x.data()) {
            assert!(((xb - x0) - 2.0 * (xa - x0)).abs() < 1e-3);
        }
        let other = degrade_inputs(&x, &table, 0.3, &mut noise_rng(1, 3, 5)).unwrap();
        assert_ne!(other, a);
    }
}
