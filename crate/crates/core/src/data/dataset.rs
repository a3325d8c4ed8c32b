//! On-disk dataset layout: `manifest.json` plus one raw float32-le blob per
//! sample per side (`x_<timestamp>.bin`, `y_<timestamp>.bin`) and `static.bin`.
//! Arrays are row-major `[channels, rows, cols]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::norm::{NormStats, Role, StatsFitter};
use super::variables::VariableTable;
use crate::error::{Error, Result};
use crate::grid::GridPair;
use crate::nn::Tensor;
use crate::store::{read_f32_blob, write_f32_blob};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATIC_FILE: &str = "static.bin";
pub const DTYPE: &str = "float32-le";
pub const LAYOUT: &str = "C";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub timestamp: String,
    pub split: Split,
    /// Coarse input blob, relative to the dataset root.
    pub x: String,
    /// Fine target blob, relative to the dataset root.
    pub y: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dtype: String,
    pub layout: String,
    pub grid_pair: GridPair,
    pub variables: VariableTable,
    #[serde(default)]
    pub norm_stats: Option<NormStats>,
    pub samples: Vec<SampleEntry>,
    #[serde(default)]
    pub static_blob: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl DatasetManifest {
    pub fn new(grid_pair: GridPair, variables: VariableTable) -> Self {
        Self {
            dtype: DTYPE.into(),
            layout: LAYOUT.into(),
            grid_pair,
            variables,
            norm_stats: None,
            samples: Vec::new(),
            static_blob: None,
            config_hash: None,
        }
    }

    pub fn x_len(&self) -> usize {
        let (p, q) = self.grid_pair.coarse.shape();
        self.variables.n_coarse_inputs() * p * q
    }

    pub fn y_len(&self) -> usize {
        let (m, n) = self.grid_pair.fine.shape();
        self.variables.c_out() * m * n
    }

    pub fn static_len(&self) -> usize {
        let (m, n) = self.grid_pair.fine.shape();
        self.variables.n_static() * m * n
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples.iter().enumerate().filter(|(_, s)| s.split == split).map(|(i, _)| i).collect()
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|_| Error::Missing(path.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn check_header(&self) -> Result<()> {
        if self.dtype != DTYPE || self.layout != LAYOUT {
            return Err(Error::Data(format!("unsupported blob format dtype={} layout={}", self.dtype, self.layout)));
        }
        self.grid_pair.validate()?;
        self.variables.validate()?;
        if let Some(st) = &self.norm_stats {
            st.check_covers(&self.variables)?;
        }
        if self.variables.n_static() > 0 && self.static_blob.is_none() {
            return Err(Error::Data("channel plan has static fields but no static blob".into()));
        }
        Ok(())
    }
}

/// Paired coarse inputs and fine targets for a batch of timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `[B, c_coarse, p, q]`
    pub x: Tensor,
    /// `[B, c_out, m, n]`
    pub y: Tensor,
    /// `[n_static, m, n]`
    pub statics: Tensor,
    pub timestamps: Vec<String>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        let (_, _, p, q) = self.x.dims4();
        let (_, _, m, n) = self.y.dims4();
        stats.normalize(Role::Input, self.x.data_mut(), p * q)?;
        stats.normalize(Role::Output, self.y.data_mut(), m * n)?;
        if self.statics.numel() > 0 {
            stats.normalize(Role::Static, self.statics.data_mut(), m * n)?;
        }
        Ok(())
    }

    pub fn denormalize(&mut self, stats: &NormStats) -> Result<()> {
        let (_, _, p, q) = self.x.dims4();
        let (_, _, m, n) = self.y.dims4();
        stats.denormalize(Role::Input, self.x.data_mut(), p * q)?;
        stats.denormalize(Role::Output, self.y.data_mut(), m * n)?;
        if self.statics.numel() > 0 {
            stats.denormalize(Role::Static, self.statics.data_mut(), m * n)?;
        }
        Ok(())
    }
}

/// Read access to a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    /// Opens a dataset and checks every referenced blob against its declared size.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        let ds = Self { root: root.to_path_buf(), manifest };
        ds.check_blobs()?;
        Ok(ds)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn table(&self) -> &VariableTable {
        &self.manifest.variables
    }

    pub fn pair(&self) -> &GridPair {
        &self.manifest.grid_pair
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.manifest.norm_stats.as_ref().ok_or_else(|| Error::Data("dataset has no normalisation statistics".into()))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }

    fn check_blobs(&self) -> Result<()> {
        self.manifest.check_header()?;
        let expect = |rel: &str, floats: usize| -> Result<()> {
            let path = self.root.join(rel);
            let meta = fs::metadata(&path).map_err(|_| Error::Missing(path.display().to_string()))?;
            let expected = (floats * 4) as u64;
            if meta.len() != expected {
                return Err(Error::BlobSize { path, expected, actual: meta.len() });
            }
            Ok(())
        };
        for s in &self.manifest.samples {
            expect(&s.x, self.manifest.x_len())?;
            expect(&s.y, self.manifest.y_len())?;
        }
        if let Some(st) = &self.manifest.static_blob {
            expect(st, self.manifest.static_len())?;
        }
        Ok(())
    }

    pub fn load_x(&self, i: usize) -> Result<Tensor> {
        let (p, q) = self.pair().coarse.shape();
        let c = self.table().n_coarse_inputs();
        let data = read_f32_blob(&self.root.join(&self.manifest.samples[i].x), c * p * q)?;
        Tensor::new(&[c, p, q], data)
    }

    pub fn load_y(&self, i: usize) -> Result<Tensor> {
        let (m, n) = self.pair().fine.shape();
        let c = self.table().c_out();
        let data = read_f32_blob(&self.root.join(&self.manifest.samples[i].y), c * m * n)?;
        Tensor::new(&[c, m, n], data)
    }

    pub fn load_static(&self) -> Result<Tensor> {
        let (m, n) = self.pair().fine.shape();
        let c = self.table().n_static();
        match &self.manifest.static_blob {
            Some(rel) => Tensor::new(&[c, m, n], read_f32_blob(&self.root.join(rel), c * m * n)?),
            None => Ok(Tensor::zeros(&[0, m, n])),
        }
    }

    /// Loads the given samples in physical units.
    pub fn batch(&self, indices: &[usize]) -> Result<SampleBatch> {
        let xs = indices.iter().map(|&i| self.load_x(i)).collect::<Result<Vec<_>>>()?;
        let ys = indices.iter().map(|&i| self.load_y(i)).collect::<Result<Vec<_>>>()?;
        Ok(SampleBatch {
            x: Tensor::stack(&xs)?,
            y: Tensor::stack(&ys)?,
            statics: self.load_static()?,
            timestamps: indices.iter().map(|&i| self.manifest.samples[i].timestamp.clone()).collect(),
        })
    }

    /// Fits normalisation statistics on the training split and stores them in the manifest.
    pub fn fit_norm_stats(&mut self, mode: super::norm::NormMode) -> Result<NormStats> {
        let stats = fit_norm_stats(self, mode)?;
        self.manifest.norm_stats = Some(stats.clone());
        self.manifest.write(&self.root)?;
        Ok(stats)
    }
}

/// Per-channel statistics over the training split only.
pub fn fit_norm_stats(ds: &Dataset, mode: super::norm::NormMode) -> Result<NormStats> {
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("cannot fit statistics: training split is empty".into()));
    }
    let table = ds.table();
    let mut fit = StatsFitter::new(table);
    let (p, q) = ds.pair().coarse.shape();
    let (m, n) = ds.pair().fine.shape();
    for &i in &train {
        let x = ds.load_x(i)?;
        for (acc, chunk) in fit.inputs.iter_mut().zip(x.data().chunks(p * q)) {
            acc.push_slice(chunk);
        }
        let y = ds.load_y(i)?;
        for (acc, chunk) in fit.outputs.iter_mut().zip(y.data().chunks(m * n)) {
            acc.push_slice(chunk);
        }
    }
    let st = ds.load_static()?;
    for (acc, chunk) in fit.statics.iter_mut().zip(st.data().chunks(m * n)) {
        acc.push_slice(chunk);
    }
    fit.finish(table, mode)
}

/// Writes samples into a dataset directory and keeps the manifest in step.
pub struct DatasetWriter {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl DatasetWriter {
    pub fn create(root: &Path, manifest: DatasetManifest) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn write_static(&mut self, data: &[f32]) -> Result<()> {
        if data.len() != self.manifest.static_len() {
            return Err(Error::Shape(format!(
                "static array has {} values, expected {}",
                data.len(),
                self.manifest.static_len()
            )));
        }
        write_f32_blob(&self.root.join(STATIC_FILE), data)?;
        self.manifest.static_blob = Some(STATIC_FILE.into());
        Ok(())
    }

    pub fn push(&mut self, timestamp: &str, split: Split, x: &[f32], y: &[f32]) -> Result<()> {
        if x.len() != self.manifest.x_len() || y.len() != self.manifest.y_len() {
            return Err(Error::Shape(format!(
                "sample {timestamp}: got x={} y={} values, expected x={} y={}",
                x.len(),
                y.len(),
                self.manifest.x_len(),
                self.manifest.y_len()
            )));
        }
        let entry = SampleEntry {
            timestamp: timestamp.into(),
            split,
            x: format!("x_{timestamp}.bin"),
            y: format!("y_{timestamp}.bin"),
        };
        write_f32_blob(&self.root.join(&entry.x), x)?;
        write_f32_blob(&self.root.join(&entry.y), y)?;
        self.manifest.samples.push(entry);
        Ok(())
    }

    pub fn manifest_mut(&mut self) -> &mut DatasetManifest {
        &mut self.manifest
    }

    pub fn finish(self) -> Result<Dataset> {
        self.manifest.write(&self.root)?;
        Dataset::open(&self.root)
    }
}

/// Validates a directory of externally produced blobs against a declared
/// manifest and writes the manifest next to them. Non-finite values are
/// rejected with the offending channel and timestamp.
pub fn ingest_external(blob_dir: &Path, declared: DatasetManifest) -> Result<DatasetManifest> {
    declared.check_header()?;
    if declared.samples.is_empty() {
        return Err(Error::Data("declared manifest lists no samples".into()));
    }
    let (p, q) = declared.grid_pair.coarse.shape();
    let (m, n) = declared.grid_pair.fine.shape();
    let table = &declared.variables;
    let input_keys: Vec<String> = table.coarse_inputs().map(|s| s.key()).collect();
    let output_keys: Vec<String> = table.outputs().map(|s| s.key()).collect();
    let static_keys: Vec<String> = table.statics().map(|s| s.key()).collect();
    let scan = |data: &[f32], plane: usize, keys: &[String], ts: &str| -> Result<()> {
        for (chunk, key) in data.chunks(plane).zip(keys) {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { channel: key.clone(), timestamp: ts.into() });
            }
        }
        Ok(())
    };
    for s in &declared.samples {
        let x = read_f32_blob(&blob_dir.join(&s.x), declared.x_len())?;
        scan(&x, p * q, &input_keys, &s.timestamp)?;
        let y = read_f32_blob(&blob_dir.join(&s.y), declared.y_len())?;
        scan(&y, m * n, &output_keys, &s.timestamp)?;
    }
    if let Some(rel) = &declared.static_blob {
        let st = read_f32_blob(&blob_dir.join(rel), declared.static_len())?;
        scan(&st, m * n, &static_keys, "static")?;
    }
    declared.write(blob_dir)?;
    Ok(declared)
}

/// Yields each training index exactly once per epoch in an order fixed by
/// `(seed, epoch)`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::variables::{Level, VariableSpec};
    use crate::grid::{make_grid_pair, Extent};

    fn toy_manifest() -> DatasetManifest {
        let ext = Extent::edges(0.0, 4.0, 0.0, 4.0);
        let pair = make_grid_pair(ext, 2.0, ext, 1.0).unwrap();
        let spec = |name: &str, level, i, o| VariableSpec {
            name: String::from(name),
            level,
            in_input: i,
            in_output: o,
            residual_pair: None,
            fixed_range: None,
        };
        let table = VariableTable::new(vec![
            spec("t", Level::Height2m, true, true),
            spec("orography", Level::Static, true, false),
        ])
        .unwrap();
        DatasetManifest::new(pair, table)
    }

    fn write_toy(dir: &Path) -> DatasetManifest {
        let mut w = DatasetWriter::create(dir, toy_manifest()).unwrap();
        w.write_static(&[1.0; 16]).unwrap();
        w.push("2023010100", Split::Train, &[1.0, 2.0, 3.0, 4.0], &[0.5; 16]).unwrap();
        w.push("2023010103", Split::Val, &[2.0; 4], &[1.5; 16]).unwrap();
        w.finish().unwrap().manifest().clone()
    }

    #[test]
    fn ingest_valid_directory() {
        let dir = tempfile::tempdir().unwrap();
        let declared = write_toy(dir.path());
        let m = ingest_external(dir.path(), declared).unwrap();
        assert_eq!(m.samples.len(), 2);
        let ds = Dataset::open(dir.path()).unwrap();
        let b = ds.batch(&[0, 1]).unwrap();
        assert_eq!(b.x.shape(), &[2, 1, 2, 2]);
        assert_eq!(b.y.shape(), &[2, 1, 4, 4]);
        assert_eq!(b.statics.shape(), &[1, 4, 4]);
    }

    #[test]
    fn ingest_rejects_nan_with_channel_and_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let declared = write_toy(dir.path());
        let mut y = vec![0.5f32; 16];
        y[7] = f32::NAN;
        write_f32_blob(&dir.path().join("y_2023010103.bin"), &y).unwrap();
        let err = ingest_external(dir.path(), declared).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t@2m") && msg.contains("2023010103"), "{msg}");
    }

    #[test]
    fn ingest_reports_expected_and_actual_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let declared = write_toy(dir.path());
        write_f32_blob(&dir.path().join("x_2023010100.bin"), &[1.0; 5]).unwrap();
        match ingest_external(dir.path(), declared) {
            Err(Error::BlobSize { expected, actual, .. }) => assert_eq!((expected, actual), (16, 20)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let declared = write_toy(dir.path());
        fs::remove_file(dir.path().join("y_2023010100.bin")).unwrap();
        assert!(matches!(ingest_external(dir.path(), declared), Err(Error::Missing(_))));
        assert!(Dataset::open(dir.path()).is_err());
    }

    #[test]
    fn stats_come_from_train_split_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path(), toy_manifest()).unwrap();
        let mut st = vec![0.0f32; 16];
        st[3] = 100.0;
        w.write_static(&st).unwrap();
        let mut y = vec![280.0f32; 16];
        y[0] = 270.0;
        w.push("a", Split::Train, &[1.0; 4], &y).unwrap();
        w.push("b", Split::Val, &[1.0; 4], &[400.0; 16]).unwrap();
        let mut ds = w.finish().unwrap();
        let stats = ds.fit_norm_stats(crate::data::norm::NormMode::MinMax).unwrap();
        assert_eq!((stats.outputs[0].a, stats.outputs[0].b), (270.0, 280.0));
        assert_eq!((stats.statics[0].a, stats.statics[0].b), (0.0, 100.0));
        // Val values are not clamped.
        let mut b = ds.batch(&[1]).unwrap();
        b.normalize(&stats).unwrap();
        assert!(b.y.data().iter().all(|&v| v > 1.0));
    }

    #[test]
    fn epoch_order_is_a_reproducible_permutation() {
        let idx: Vec<usize> = (0..20).collect();
        let a = epoch_order(&idx, 3, 1);
        assert_eq!(a, epoch_order(&idx, 3, 1));
        assert_ne!(a, epoch_order(&idx, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, idx);
    }
}
