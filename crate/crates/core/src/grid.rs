//! Regular latitude/longitude grids, bilinear upsampling and block coarsening.
//!
//! Grid points are cell centres. Row 0 is the northernmost row and columns
//! run west to east; fields are stored row-major.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that an extent is a whole number of cells.
const SPACING_TOL: f64 = 1e-6;

/// Dense row-major 2D field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Field<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("field {rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Field<U> {
        Field { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Geographic extent of a grid. `Edges` gives outer cell boundaries, `Centers`
/// gives the coordinates of the first and last grid points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extent {
    Edges { lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64 },
    Centers { lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64 },
}

impl Extent {
    pub fn edges(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        Extent::Edges { lat_min, lat_max, lon_min, lon_max }
    }

    pub fn centers(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        Extent::Centers { lat_min, lat_max, lon_min, lon_max }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Extent::Edges { lat_min, lat_max, lon_min, lon_max }
            | Extent::Centers { lat_min, lat_max, lon_min, lon_max } => (lat_min, lat_max, lon_min, lon_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Southern cell edge.
    pub lat_min: f64,
    /// Northern cell edge.
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub spacing_lat: f64,
    pub spacing_lon: f64,
}

fn cell_count(span: f64, res: f64, axis: &str) -> Result<usize> {
    let cells = span / res;
    let n = cells.round();
    if n < 1.0 || (cells - n).abs() > SPACING_TOL * cells.max(1.0) {
        return Err(Error::Grid(format!("{axis} span {span} is not a whole number of {res} degree cells")));
    }
    Ok(n as usize)
}

impl GridSpec {
    /// Builds a grid from an extent and a (lat, lon) resolution in degrees.
    pub fn from_extent(extent: Extent, res_lat: f64, res_lon: f64) -> Result<Self> {
        if !(res_lat > 0.0 && res_lon > 0.0) || !res_lat.is_finite() || !res_lon.is_finite() {
            return Err(Error::Grid(format!("resolution must be positive, got ({res_lat}, {res_lon})")));
        }
        let (lat_min, lat_max, lon_min, lon_max) = extent.bounds();
        if !(lat_max > lat_min) || !(lon_max > lon_min) {
            return Err(Error::Grid(format!("empty extent lat [{lat_min}, {lat_max}] lon [{lon_min}, {lon_max}]")));
        }
        let (lat_min, lat_max, lon_min, lon_max, n_lat, n_lon) = match extent {
            Extent::Edges { .. } => (
                lat_min,
                lat_max,
                lon_min,
                lon_max,
                cell_count(lat_max - lat_min, res_lat, "latitude")?,
                cell_count(lon_max - lon_min, res_lon, "longitude")?,
            ),
            Extent::Centers { .. } => (
                lat_min - res_lat / 2.0,
                lat_max + res_lat / 2.0,
                lon_min - res_lon / 2.0,
                lon_max + res_lon / 2.0,
                cell_count(lat_max - lat_min, res_lat, "latitude")? + 1,
                cell_count(lon_max - lon_min, res_lon, "longitude")? + 1,
            ),
        };
        let spec = GridSpec {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            n_lat,
            n_lon,
            spacing_lat: (lat_max - lat_min) / n_lat as f64,
            spacing_lon: (lon_max - lon_min) / n_lon as f64,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat < 2 || self.n_lon < 2 {
            return Err(Error::Grid(format!("grid needs at least 2x2 points, got {}x{}", self.n_lat, self.n_lon)));
        }
        if !(self.lat_max > self.lat_min) || !(self.lon_max > self.lon_min) {
            return Err(Error::Grid("grid extent is empty".into()));
        }
        let dlat = (self.lat_max - self.lat_min) / self.n_lat as f64;
        let dlon = (self.lon_max - self.lon_min) / self.n_lon as f64;
        if (dlat - self.spacing_lat).abs() > SPACING_TOL * dlat || (dlon - self.spacing_lon).abs() > SPACING_TOL * dlon
        {
            return Err(Error::Grid("spacing inconsistent with extent and counts".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    /// Latitude of the centre of row `r` (row 0 is north).
    pub fn lat(&self, r: usize) -> f64 {
        self.lat_max - (r as f64 + 0.5) * self.spacing_lat
    }

    pub fn lon(&self, c: usize) -> f64 {
        self.lon_min + (c as f64 + 0.5) * self.spacing_lon
    }

    /// Fractional (row, col) index of a coordinate in this grid.
    fn fractional_index(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (self.lat_max - 0.5 * self.spacing_lat - lat) / self.spacing_lat,
            (lon - self.lon_min - 0.5 * self.spacing_lon) / self.spacing_lon,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPair {
    pub coarse: GridSpec,
    pub fine: GridSpec,
    pub aligned: bool,
}

impl GridPair {
    /// Integer refinement factor when the pair is aligned and the counts divide.
    pub fn integer_factor(&self) -> Option<usize> {
        if !self.aligned {
            return None;
        }
        let (cr, cc) = self.coarse.shape();
        let (fr, fc) = self.fine.shape();
        if fr % cr != 0 || fc % cc != 0 || fr / cr != fc / cc {
            return None;
        }
        Some(fr / cr)
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.fine.validate()?;
        if !(self.fine.spacing_lat < self.coarse.spacing_lat && self.fine.spacing_lon < self.coarse.spacing_lon) {
            return Err(Error::Grid(format!(
                "fine grid ({} x {} deg) must be strictly finer than coarse grid ({} x {} deg)",
                self.fine.spacing_lat, self.fine.spacing_lon, self.coarse.spacing_lat, self.coarse.spacing_lon
            )));
        }
        let c = &self.coarse;
        let f = &self.fine;
        let edge_offsets = [
            ((f.lat_min - c.lat_min).abs(), c.spacing_lat),
            ((f.lat_max - c.lat_max).abs(), c.spacing_lat),
            ((f.lon_min - c.lon_min).abs(), c.spacing_lon),
            ((f.lon_max - c.lon_max).abs(), c.spacing_lon),
        ];
        if edge_offsets.iter().any(|&(d, cell)| d >= cell) {
            return Err(Error::Grid("fine extent differs from coarse extent by a full coarse cell or more".into()));
        }
        Ok(())
    }
}

/// Builds a coarse/fine grid pair and flags whether the two extents coincide.
pub fn make_grid_pair(coarse_extent: Extent, coarse_res: f64, fine_extent: Extent, fine_res: f64) -> Result<GridPair> {
    let coarse = GridSpec::from_extent(coarse_extent, coarse_res, coarse_res)?;
    let fine = GridSpec::from_extent(fine_extent, fine_res, fine_res)?;
    let tol = 1e-9 * coarse.spacing_lat.max(coarse.spacing_lon);
    let aligned = (coarse.lat_min - fine.lat_min).abs() <= tol
        && (coarse.lat_max - fine.lat_max).abs() <= tol
        && (coarse.lon_min - fine.lon_min).abs() <= tol
        && (coarse.lon_max - fine.lon_max).abs() <= tol;
    let pair = GridPair { coarse, fine, aligned };
    pair.validate()?;
    Ok(pair)
}

/// Precomputed interpolation stencil: for each fine row/col, the lower coarse
/// index and the weight of the upper neighbour.
#[derive(Debug, Clone)]
pub struct BilinearStencil {
    rows: Vec<(usize, f64)>,
    cols: Vec<(usize, f64)>,
    coarse: (usize, usize),
}

fn axis_stencil(frac: f64, n: usize) -> (usize, f64) {
    let clamped = frac.clamp(0.0, (n - 1) as f64);
    let lo = (clamped.floor() as usize).min(n - 2);
    (lo, clamped - lo as f64)
}

impl BilinearStencil {
    pub fn new(pair: &GridPair) -> Self {
        let c = &pair.coarse;
        let f = &pair.fine;
        let rows = (0..f.n_lat).map(|r| axis_stencil(c.fractional_index(f.lat(r), c.lon_min).0, c.n_lat)).collect();
        let cols = (0..f.n_lon).map(|j| axis_stencil(c.fractional_index(c.lat_max, f.lon(j)).1, c.n_lon)).collect();
        Self { rows, cols, coarse: c.shape() }
    }

    pub fn fine_shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn coarse_shape(&self) -> (usize, usize) {
        self.coarse
    }

    /// Interpolates a raw row-major coarse slice into `out`.
    pub fn apply_slice<T: Float>(&self, input: &[T], out: &mut [T]) {
        let qc = self.coarse.1;
        let nf = self.cols.len();
        debug_assert_eq!(input.len(), self.coarse.0 * qc);
        debug_assert_eq!(out.len(), self.rows.len() * nf);
        let one = T::one();
        let col_w: Vec<(usize, T)> = self.cols.iter().map(|&(j, w)| (j, T::from(w).unwrap())).collect();
        for (r, &(i, wr)) in self.rows.iter().enumerate() {
            let wr = T::from(wr).unwrap();
            let top = &input[i * qc..(i + 1) * qc];
            let bot = &input[(i + 1) * qc..(i + 2) * qc];
            let dst = &mut out[r * nf..(r + 1) * nf];
            for (o, &(j, wc)) in dst.iter_mut().zip(&col_w) {
                let a = top[j] * (one - wc) + top[j + 1] * wc;
                let b = bot[j] * (one - wc) + bot[j + 1] * wc;
                *o = a * (one - wr) + b * wr;
            }
        }
    }

    pub fn apply<T: Float>(&self, field: &Field<T>) -> Result<Field<T>> {
        if field.shape() != self.coarse {
            return Err(Error::Shape(format!(
                "bilinear input is {:?}, coarse grid is {:?}",
                field.shape(),
                self.coarse
            )));
        }
        let (m, n) = self.fine_shape();
        let mut out = vec![T::zero(); m * n];
        self.apply_slice(field.as_slice(), &mut out);
        Field::new(m, n, out)
    }
}

/// Bilinear interpolation of a coarse field onto the fine grid of `pair`,
/// clamping to the edge values outside the coarse point hull.
pub fn bilinear_upsample<T: Float>(field: &Field<T>, pair: &GridPair) -> Result<Field<T>> {
    BilinearStencil::new(pair).apply(field)
}

/// Mean over non-overlapping `factor` x `factor` blocks.
pub fn block_coarsen<T: Float>(field: &Field<T>, factor: usize) -> Result<Field<T>> {
    let (m, n) = field.shape();
    if factor == 0 || m % factor != 0 || n % factor != 0 {
        return Err(Error::Shape(format!("field {m}x{n} is not divisible by coarsening factor {factor}")));
    }
    let mut out = vec![T::zero(); (m / factor) * (n / factor)];
    block_coarsen_slice(field.as_slice(), m, n, factor, &mut out);
    Field::new(m / factor, n / factor, out)
}

pub(crate) fn block_coarsen_slice<T: Float>(input: &[T], m: usize, n: usize, factor: usize, out: &mut [T]) {
    let q = n / factor;
    let scale = T::one() / T::from(factor * factor).unwrap();
    for bi in 0..m / factor {
        for bj in 0..q {
            let mut acc = T::zero();
            for r in bi * factor..(bi + 1) * factor {
                for &v in &input[r * n + bj * factor..r * n + (bj + 1) * factor] {
                    acc = acc + v;
                }
            }
            out[bi * q + bj] = acc * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aligned_pair(coarse_res: f64, fine_res: f64, span_lat: f64, span_lon: f64) -> GridPair {
        let ext = Extent::edges(20.0, 20.0 + span_lat, 100.0, 100.0 + span_lon);
        make_grid_pair(ext, coarse_res, ext, fine_res).unwrap()
    }

    #[test]
    fn operational_pair_counts() {
        let pair = make_grid_pair(
            Extent::centers(12.25, 60.0, 70.0, 141.75),
            0.25,
            Extent::centers(12.13, 60.1, 70.0, 141.97),
            0.03,
        )
        .unwrap();
        assert_eq!(pair.coarse.shape(), (192, 288));
        assert_eq!(pair.fine.shape(), (1600, 2400));
        assert!(!pair.aligned);
        assert_eq!(pair.integer_factor(), None);
    }

    #[test]
    fn aligned_pair_counts() {
        let pair = aligned_pair(0.25, 0.03125, 6.0, 9.0);
        assert_eq!(pair.coarse.shape(), (24, 36));
        assert_eq!(pair.fine.shape(), (192, 288));
        assert!(pair.aligned);
        assert_eq!(pair.integer_factor(), Some(8));
    }

    #[test]
    fn degenerate_and_invalid_resolutions() {
        let ext = Extent::edges(0.0, 4.0, 0.0, 4.0);
        assert!(make_grid_pair(ext, 0.25, ext, 0.25).is_err());
        assert!(make_grid_pair(ext, 0.25, ext, 0.5).is_err());
        assert!(make_grid_pair(ext, 0.0, ext, 0.1).is_err());
        assert!(make_grid_pair(ext, -1.0, ext, 0.1).is_err());
        assert!(GridSpec::from_extent(Extent::edges(0.0, 1.0, 0.0, 1.0), 0.3, 0.3).is_err());
    }

    #[test]
    fn misalignment_of_a_full_cell_is_rejected() {
        let coarse = Extent::edges(0.0, 4.0, 0.0, 4.0);
        let fine = Extent::edges(1.0, 5.0, 0.0, 4.0);
        assert!(make_grid_pair(coarse, 1.0, fine, 0.25).is_err());
    }

    #[test]
    fn constant_field_is_preserved() {
        let pair = aligned_pair(1.0, 0.125, 4.0, 4.0);
        let c = Field::filled(4, 4, 5.0f64);
        let up = bilinear_upsample(&c, &pair).unwrap();
        assert_eq!(up.shape(), (32, 32));
        for &v in up.as_slice() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_field_is_reproduced_inside_the_hull() {
        let pair = aligned_pair(0.5, 0.125, 4.0, 6.0);
        let (a, b) = (0.7, -1.3);
        let c = Field::from_fn(pair.coarse.n_lat, pair.coarse.n_lon, |r, j| {
            a * pair.coarse.lon(j) + b * pair.coarse.lat(r)
        });
        let up = bilinear_upsample(&c, &pair).unwrap();
        let f = &pair.fine;
        let lat_hi = pair.coarse.lat(0);
        let lat_lo = pair.coarse.lat(pair.coarse.n_lat - 1);
        let lon_lo = pair.coarse.lon(0);
        let lon_hi = pair.coarse.lon(pair.coarse.n_lon - 1);
        let mut checked = 0;
        for r in 0..f.n_lat {
            for j in 0..f.n_lon {
                let (lat, lon) = (f.lat(r), f.lon(j));
                if lat > lat_hi || lat < lat_lo || lon < lon_lo || lon > lon_hi {
                    continue;
                }
                assert!((up.get(r, j) - (a * lon + b * lat)).abs() < 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn centre_of_two_by_two_is_corner_average() {
        // Fine grid with an odd count puts a point exactly at the centre.
        let ext = Extent::edges(0.0, 2.0, 0.0, 2.0);
        let pair = make_grid_pair(ext, 1.0, ext, 2.0 / 3.0).unwrap();
        let c = Field::new(2, 2, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let up = bilinear_upsample(&c, &pair).unwrap();
        assert_eq!(up.shape(), (3, 3));
        assert!((up.get(1, 1) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn upsample_rejects_wrong_shape() {
        let pair = aligned_pair(1.0, 0.5, 4.0, 4.0);
        assert!(bilinear_upsample(&Field::filled(3, 4, 0.0f32), &pair).is_err());
    }

    #[test]
    fn coarsen_examples() {
        let f = Field::new(2, 2, vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(block_coarsen(&f, 2).unwrap().as_slice(), &[4.0]);
        let c = block_coarsen(&Field::filled(8, 12, 2.5f32), 4).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 2.5));
        assert!(block_coarsen(&Field::filled(6, 8, 0.0f32), 4).is_err());
    }

    #[test]
    fn coarsen_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Field::from_fn(16, 16, |_, _| rng.random_range(-3.0..3.0f64));
        let got = block_coarsen(&f, 4).unwrap();
        for bi in 0..4 {
            for bj in 0..4 {
                let mut s = 0.0;
                for di in 0..4 {
                    for dj in 0..4 {
                        s += f.get(bi * 4 + di, bj * 4 + dj);
                    }
                }
                assert!((got.get(bi, bj) - s / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarsen_inverts_upsample_for_affine_interior_cells() {
        let pair = aligned_pair(1.0, 0.25, 6.0, 8.0);
        let c = Field::from_fn(6, 8, |r, j| 2.0 * r as f64 - 0.5 * j as f64 + 3.0);
        let back = block_coarsen(&bilinear_upsample(&c, &pair).unwrap(), 4).unwrap();
        for r in 1..5 {
            for j in 1..7 {
                assert!((back.get(r, j) - c.get(r, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn upsample_is_bitwise_deterministic() {
        let pair = aligned_pair(1.0, 0.25, 4.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Field::from_fn(4, 4, |_, _| rng.random::<f32>());
        assert_eq!(bilinear_upsample(&c, &pair).unwrap(), bilinear_upsample(&c, &pair).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn no_overshoot(values in proptest::collection::vec(-50.0f64..50.0, 20), misalign in 0.0f64..0.9) {
                let coarse = Extent::edges(0.0, 4.0, 0.0, 5.0);
                let fine = Extent::edges(misalign * 0.5, 4.0 + misalign * 0.5, 0.0, 5.0);
                let pair = make_grid_pair(coarse, 1.0, fine, 0.25).unwrap();
                let c = Field::new(4, 5, values.clone()).unwrap();
                let up = bilinear_upsample(&c, &pair).unwrap();
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for &v in up.as_slice() {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }

            #[test]
            fn weights_sum_to_one(value in -1e3f64..1e3, misalign in 0.0f64..0.9) {
                let coarse = Extent::edges(0.0, 3.0, 0.0, 3.0);
                let fine = Extent::edges(0.0, 3.0, misalign, 3.0 + misalign);
                let pair = make_grid_pair(coarse, 1.0, fine, 0.2).unwrap();
                let up = bilinear_upsample(&Field::filled(3, 3, value), &pair).unwrap();
                for &v in up.as_slice() {
                    prop_assert!((v - value).abs() <= 1e-12 * value.abs().max(1.0));
                }
            }
        }
    }
}
