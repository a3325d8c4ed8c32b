//! Static SVG figures: line curves, variance scatter and field panels.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Field;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("plot {}: {e}", path.display()))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Named polylines on shared axes; series names become legend entries.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| plot_err(path, e))?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Absolute error against ensemble variance, with vertical lines at the
/// variance percentiles. At most `max_points` evenly strided points are drawn.
pub fn variance_scatter(
    path: &Path,
    title: &str,
    variance: &[f32],
    abs_error: &[f32],
    thresholds: &[f64; 3],
    max_points: usize,
) -> Result<()> {
    let stride = (variance.len() / max_points.max(1)).max(1);
    let pts: Vec<(f64, f64)> =
        variance.iter().zip(abs_error).step_by(stride).map(|(&v, &e)| (v as f64, e as f64)).collect();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0).chain(thresholds.iter().copied()));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("ensemble variance")
        .y_desc("absolute error of ensemble mean")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 1, PALETTE[0].mix(0.4).filled())))
        .map_err(|e| plot_err(path, e))?;
    for (k, (&t, name)) in thresholds.iter().zip(["p75", "p50", "p25"]).enumerate() {
        let color = PALETTE[(k + 1) % PALETTE.len()];
        chart
            .draw_series(LineSeries::new([(t, y0), (t, y1)], color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

fn block_mean(f: &Field<f32>, step: usize) -> Field<f32> {
    let (r, c) = f.shape();
    let (rr, cc) = (r.div_ceil(step), c.div_ceil(step));
    Field::from_fn(rr, cc, |i, j| {
        let (mut s, mut k) = (0.0f64, 0usize);
        for a in i * step..((i + 1) * step).min(r) {
            for b in j * step..((j + 1) * step).min(c) {
                s += f.get(a, b) as f64;
                k += 1;
            }
        }
        (s / k as f64) as f32
    })
}

fn ramp(t: f64) -> RGBColor {
    // Blue to white to red.
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let u = t / 0.5;
        RGBColor((40.0 + 215.0 * u) as u8, (80.0 + 175.0 * u) as u8, 255)
    } else {
        let u = (t - 0.5) / 0.5;
        RGBColor(255, (255.0 - 175.0 * u) as u8, (255.0 - 215.0 * u) as u8)
    }
}

/// Side-by-side maps on a shared colour scale, block-averaged so the
/// longest side has at most `max_cells` cells.
pub fn panel_maps(path: &Path, title: &str, panels: &[(String, Field<f32>)], max_cells: usize) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::Data("no panels to draw".into()));
    }
    let reduced: Vec<(String, Field<f32>)> = panels
        .iter()
        .map(|(n, f)| {
            let step = f.rows().max(f.cols()).div_ceil(max_cells.max(1)).max(1);
            (n.clone(), block_mean(f, step))
        })
        .collect();
    let (lo, hi) = bounds(reduced.iter().flat_map(|(_, f)| f.as_slice().iter().map(|&v| v as f64)));
    let k = reduced.len() as u32;
    let root = SVGBackend::new(path, (260 * k + 20, 300)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let root = root.titled(title, ("sans-serif", 18)).map_err(|e| plot_err(path, e))?;
    for (area, (name, f)) in root.split_evenly((1, reduced.len())).iter().zip(&reduced) {
        let (r, c) = f.shape();
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 14))
            .margin(6)
            .build_cartesian_2d(0..c, 0..r)
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series((0..r).flat_map(|i| {
                (0..c).map(move |j| {
                    let v = (f.get(i, j) as f64 - lo) / (hi - lo);
                    // Row 0 is the northernmost row, drawn at the top.
                    Rectangle::new([(j, r - 1 - i), (j + 1, r - i)], ramp(v).filled())
                })
            }))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.svg");
        line_plot(&p, "curves", "lead (h)", "MAE", &[("era5-like".into(), vec![(0.0, 1.0), (24.0, 1.5)])]).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.contains("<svg") && svg.contains("era5-like"));

        let v: Vec<f32> = (0..400).map(|k| k as f32).collect();
        let e: Vec<f32> = (0..400).map(|k| (k % 13) as f32).collect();
        let p = dir.path().join("scatter.svg");
        variance_scatter(&p, "groups", &v, &e, &[300.0, 200.0, 100.0], 100).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 0);

        let f = Field::from_fn(40, 60, |i, j| (i + j) as f32);
        let p = dir.path().join("maps.svg");
        panel_maps(&p, "fields", &[("truth".into(), f.clone()), ("pred".into(), f)], 20).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("<rect"));
    }
}
