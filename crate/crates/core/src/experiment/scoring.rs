//! Scoring of aligned regression and ensemble predictions against truth.

use std::fmt::Write as _;

use crate::data::VariableTable;
use crate::diffusion::EnsemblePrediction;
use crate::error::{Error, Result};
use crate::grid::{Field, GridPair};
use crate::nn::Tensor;
use crate::verification::{
    area_average, area_average_weighted, crps_ensemble, fss, mae, pdf_histogram, pearson, variance_groups, CrpsVariant,
    MetricReport, ReportMeta, UncertaintyGroups,
};

use super::config::EvaluateConfig;

/// One validation sample: truth, regression output and ensemble, all in
/// physical units on the fine grid.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub timestamp: String,
    /// `[c_out, m, n]`
    pub truth: Tensor,
    /// `[c_out, m, n]`
    pub regression: Tensor,
    pub ensemble: EnsemblePrediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdfRow {
    pub variable: String,
    pub level: String,
    pub source: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaRow {
    pub variable: String,
    pub level: String,
    pub timestamp: String,
    pub truth: f64,
    pub regression: f64,
    pub ensemble_mean: f64,
}

/// Everything `evaluate` writes.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub pdf: Vec<PdfRow>,
    pub area: Vec<AreaRow>,
    /// Pooled variance groups per output channel.
    pub groups: Vec<UncertaintyGroups>,
    /// Pooled ensemble variance per output channel, aligned with `groups`.
    pub pooled_variance: Vec<Vec<f32>>,
    /// Pooled ensemble-mean absolute error per output channel.
    pub pooled_abs_error: Vec<Vec<f32>>,
}

pub const PDF_SOURCES: [&str; 4] = ["truth", "regression", "single", "ensemble_mean"];

fn plane(t: &Tensor, c: usize, len: usize) -> &[f32] {
    &t.data()[c * len..(c + 1) * len]
}

fn field(t: &Tensor, c: usize, m: usize, n: usize) -> Field<f32> {
    Field::new(m, n, plane(t, c, m * n).to_vec()).expect("plane shape")
}

fn check_samples(samples: &[ScoredSample], c: usize, m: usize, n: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    for s in samples {
        let want = [c, m, n];
        for (name, t) in [("truth", &s.truth), ("regression", &s.regression), ("ensemble mean", &s.ensemble.mean)] {
            if t.shape() != want {
                return Err(Error::Shape(format!("{name} at {} is {:?}, expected {want:?}", s.timestamp, t.shape())));
            }
        }
    }
    Ok(())
}

/// Mean over samples of a per-sample score.
fn pooled_mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for v in values {
        s += v?;
        k += 1;
    }
    Ok(s / k.max(1) as f64)
}

/// Histogram edges shared by every source of one channel.
fn pdf_edges(values: &[&[f32]], range: Option<[f64; 2]>, cutoff: Option<f64>, bins: usize) -> Option<Vec<f64>> {
    let (lo, hi) = match range {
        Some(r) => (cutoff.map_or(r[0], |c| c.max(r[0])), r[1]),
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in values.iter().flat_map(|s| s.iter()) {
                lo = lo.min(*v as f64);
                hi = hi.max(*v as f64);
            }
            (lo, hi)
        }
    };
    if !(hi > lo) {
        return None;
    }
    Some((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
}

/// Scores aligned samples. Metric names:
/// `mae_regression`, `mae_single` (member 0), `mae_ensemble_mean`,
/// `mae_member_mean` (average of per-member MAE), `crps`, `spread`,
/// `pearson_regression`, `pearson_ensemble_mean`, one `MAE75-100` ...
/// `MAE0-25` row per variance group plus `variance_p75/p50/p25`, and for
/// fixed-range channels `fss_{regression,single,ensemble_mean}:t{thr}:w{win}`.
pub fn score_samples(
    samples: &[ScoredSample],
    table: &VariableTable,
    pair: &GridPair,
    cfg: &EvaluateConfig,
    meta: ReportMeta,
) -> Result<Evaluation> {
    let (m, n) = pair.fine.shape();
    let co = table.c_out();
    check_samples(samples, co, m, n)?;
    let len = m * n;
    let lats: Vec<f64> = (0..m).map(|r| pair.fine.lat(r)).collect();
    let mut report = MetricReport::new(meta);
    let mut pdf = Vec::new();
    let mut area = Vec::new();
    let mut groups = Vec::new();
    let mut pooled_variance = Vec::new();
    let mut pooled_abs_error = Vec::new();
    for (o, spec) in table.outputs().enumerate() {
        let (var, lev) = (spec.name.as_str(), spec.level.to_string());
        let push = |r: &mut MetricReport, metric: &str, v: f64| r.push(var, &lev, metric, None, v);

        let reg = pooled_mean(samples.iter().map(|s| mae(plane(&s.regression, o, len), plane(&s.truth, o, len))))?;
        let single = pooled_mean(
            samples.iter().map(|s| mae(&s.ensemble.members.item(0)[o * len..(o + 1) * len], plane(&s.truth, o, len))),
        )?;
        let ens_mean =
            pooled_mean(samples.iter().map(|s| mae(plane(&s.ensemble.mean, o, len), plane(&s.truth, o, len))))?;
        let member_mean = pooled_mean(samples.iter().map(|s| {
            let nm = s.ensemble.n_members();
            pooled_mean(
                (0..nm).map(|k| mae(&s.ensemble.members.item(k)[o * len..(o + 1) * len], plane(&s.truth, o, len))),
            )
        }))?;
        let crps = pooled_mean(samples.iter().map(|s| {
            let nm = s.ensemble.n_members();
            let members: Vec<&[f32]> = (0..nm).map(|k| &s.ensemble.members.item(k)[o * len..(o + 1) * len]).collect();
            crps_ensemble(&members, plane(&s.truth, o, len), CrpsVariant::Standard)
        }))?;
        let spread = pooled_mean(samples.iter().map(|s| {
            let v = plane(&s.ensemble.variance, o, len);
            Ok(v.iter().map(|&x| (x.max(0.0) as f64).sqrt()).sum::<f64>() / len as f64)
        }))?;
        push(&mut report, "mae_regression", reg)?;
        push(&mut report, "mae_single", single)?;
        push(&mut report, "mae_ensemble_mean", ens_mean)?;
        push(&mut report, "mae_member_mean", member_mean)?;
        push(&mut report, "crps", crps)?;
        push(&mut report, "spread", spread)?;

        let all_truth: Vec<f32> = samples.iter().flat_map(|s| plane(&s.truth, o, len).iter().copied()).collect();
        let all_reg: Vec<f32> = samples.iter().flat_map(|s| plane(&s.regression, o, len).iter().copied()).collect();
        let all_mean: Vec<f32> = samples.iter().flat_map(|s| plane(&s.ensemble.mean, o, len).iter().copied()).collect();
        let all_single: Vec<f32> =
            samples.iter().flat_map(|s| s.ensemble.members.item(0)[o * len..(o + 1) * len].iter().copied()).collect();
        for (name, pred) in [("pearson_regression", &all_reg), ("pearson_ensemble_mean", &all_mean)] {
            match pearson(pred, &all_truth) {
                Ok(r) => push(&mut report, name, r)?,
                Err(Error::Numeric(msg)) => log::warn!("{var}@{lev}: {name} skipped ({msg})"),
                Err(e) => return Err(e),
            }
        }

        let variance: Vec<f32> =
            samples.iter().flat_map(|s| plane(&s.ensemble.variance, o, len).iter().copied()).collect();
        let abs_err: Vec<f32> = all_mean.iter().zip(&all_truth).map(|(a, b)| (a - b).abs()).collect();
        let g = variance_groups(&variance, &abs_err)?;
        for (label, v) in UncertaintyGroups::LABELS.iter().zip(g.mae) {
            push(&mut report, label, v)?;
        }
        for (label, v) in ["variance_p75", "variance_p50", "variance_p25"].iter().zip(g.thresholds) {
            push(&mut report, label, v)?;
        }
        groups.push(g);
        pooled_variance.push(variance);
        pooled_abs_error.push(abs_err);

        if spec.fixed_range.is_some() {
            for &thr in &cfg.fss_thresholds {
                for &w in &cfg.fss_windows {
                    if w > m || w > n {
                        continue;
                    }
                    let tag = format!("t{thr}:w{w}");
                    let score = |pick: &dyn Fn(&ScoredSample) -> Field<f32>| {
                        pooled_mean(samples.iter().map(|s| fss(&pick(s), &field(&s.truth, o, m, n), thr, w)))
                    };
                    let r = score(&|s| field(&s.regression, o, m, n))?;
                    let one = score(&|s| {
                        Field::new(m, n, s.ensemble.members.item(0)[o * len..(o + 1) * len].to_vec()).expect("plane")
                    })?;
                    let em = score(&|s| field(&s.ensemble.mean, o, m, n))?;
                    push(&mut report, &format!("fss_regression:{tag}"), r)?;
                    push(&mut report, &format!("fss_single:{tag}"), one)?;
                    push(&mut report, &format!("fss_ensemble_mean:{tag}"), em)?;
                }
            }
        }

        let sources: [&[f32]; 4] = [&all_truth, &all_reg, &all_single, &all_mean];
        let cutoff = spec.fixed_range.and(cfg.pdf_cutoff);
        if let Some(edges) = pdf_edges(&sources, spec.fixed_range, cutoff, cfg.pdf_bins) {
            for (src, vals) in PDF_SOURCES.iter().zip(sources) {
                match pdf_histogram(vals, &edges, cutoff) {
                    Ok(d) => pdf.extend(d.iter().zip(edges.windows(2)).map(|(&density, w)| PdfRow {
                        variable: var.to_string(),
                        level: lev.clone(),
                        source: src,
                        lo: w[0],
                        hi: w[1],
                        density,
                    })),
                    Err(Error::Data(_)) => log::info!("{var}@{lev}: no {src} values above the PDF cutoff"),
                    Err(e) => return Err(e),
                }
            }
        }

        for s in samples {
            let avg = |t: &Tensor| -> Result<f64> {
                let f = field(t, o, m, n);
                if cfg.latitude_weighting {
                    area_average_weighted(&f, &lats)
                } else {
                    Ok(area_average(&f))
                }
            };
            area.push(AreaRow {
                variable: var.to_string(),
                level: lev.clone(),
                timestamp: s.timestamp.clone(),
                truth: avg(&s.truth)?,
                regression: avg(&s.regression)?,
                ensemble_mean: avg(&s.ensemble.mean)?,
            });
        }
    }
    Ok(Evaluation { report, pdf, area, groups, pooled_variance, pooled_abs_error })
}

pub fn pdf_csv(rows: &[PdfRow]) -> String {
    let mut out = String::from("variable,level,source,bin_lo,bin_hi,density\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.variable, r.level, r.source, r.lo, r.hi, r.density);
    }
    out
}

pub fn area_csv(rows: &[AreaRow]) -> String {
    let mut out = String::from("variable,level,timestamp,truth,regression,ensemble_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variable, r.level, r.timestamp, r.truth, r.regression, r.ensemble_mean
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_synthetic_table;
    use crate::grid::{make_grid_pair, Extent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VariableTable, GridPair) {
        let e = Extent::edges(30.0, 32.0, 100.0, 102.0);
        (default_synthetic_table(), make_grid_pair(e, 0.25, e, 0.0625).unwrap())
    }

    fn random_truth(rng: &mut ChaCha8Rng, c: usize, m: usize, n: usize) -> Tensor {
        Tensor::new(&[c, m, n], (0..c * m * n).map(|_| rng.random_range(0.0..40.0)).collect()).unwrap()
    }

    fn sample(rng: &mut ChaCha8Rng, truth: Tensor, nm: usize, noise: f32) -> ScoredSample {
        let s = truth.shape().to_vec();
        let members: Vec<f32> = (0..nm)
            .flat_map(|_| truth.data().iter().map(|&v| v + noise * rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>())
            .collect();
        let members = Tensor::new(&[nm, s[0], s[1], s[2]], members).unwrap();
        ScoredSample {
            timestamp: "t".into(),
            regression: truth.clone(),
            truth,
            ensemble: EnsemblePrediction::from_members(members, (0..nm as u64).collect()).unwrap(),
        }
    }

    #[test]
    fn truth_as_prediction_scores_perfectly() {
        let (table, pair) = setup();
        let (m, n) = pair.fine.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples: Vec<_> = (0..3)
            .map(|_| {
                let t = random_truth(&mut rng, table.c_out(), m, n);
                sample(&mut rng, t, 3, 0.0)
            })
            .collect();
        let ev = score_samples(&samples, &table, &pair, &EvaluateConfig::default(), ReportMeta::default()).unwrap();
        let mut fss_rows = 0;
        for r in &ev.report.rows {
            if r.metric.starts_with("mae_") || r.metric == "crps" {
                assert_eq!(r.value, 0.0, "{r:?}");
            }
            if r.metric.starts_with("fss") {
                fss_rows += 1;
                assert_eq!(r.value, 1.0, "{r:?}");
            }
        }
        assert!(fss_rows > 0);
        assert_eq!(ev.groups.len(), table.c_out());
    }

    #[test]
    fn crps_never_exceeds_member_mae_and_single_member_crps_is_mae() {
        let (table, pair) = setup();
        let (m, n) = pair.fine.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = (0..2)
            .map(|_| {
                let t = random_truth(&mut rng, table.c_out(), m, n);
                sample(&mut rng, t, 5, 3.0)
            })
            .collect();
        let ev = score_samples(&samples, &table, &pair, &EvaluateConfig::default(), ReportMeta::default()).unwrap();
        for spec in table.outputs() {
            let l = spec.level.to_string();
            let crps = ev.report.get(&spec.name, &l, "crps", None).unwrap();
            let mm = ev.report.get(&spec.name, &l, "mae_member_mean", None).unwrap();
            assert!(crps <= mm, "{} {crps} {mm}", spec.name);
        }
        let one: Vec<_> = (0..2)
            .map(|_| {
                let t = random_truth(&mut rng, table.c_out(), m, n);
                sample(&mut rng, t, 1, 3.0)
            })
            .collect();
        let ev = score_samples(&one, &table, &pair, &EvaluateConfig::default(), ReportMeta::default()).unwrap();
        for spec in table.outputs() {
            let l = spec.level.to_string();
            let crps = ev.report.get(&spec.name, &l, "crps", None).unwrap();
            let single = ev.report.get(&spec.name, &l, "mae_single", None).unwrap();
            assert!((crps - single).abs() <= 1e-12 * single.max(1.0));
            assert_eq!(ev.report.get(&spec.name, &l, "spread", None), Some(0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (table, pair) = setup();
        let (m, n) = pair.fine.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_truth(&mut rng, table.c_out(), m, n);
        let mut s = sample(&mut rng, t, 2, 1.0);
        s.regression = Tensor::zeros(&[1, m, n]);
        let err = score_samples(&[s], &table, &pair, &EvaluateConfig::default(), ReportMeta::default());
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(score_samples(&[], &table, &pair, &EvaluateConfig::default(), ReportMeta::default()).is_err());
    }
}
