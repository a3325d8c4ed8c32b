//! Config-driven experiment stages behind the `downscale` command line.
//!
//! Every stage reads one [`ExperimentConfig`], checks the configuration hash
//! recorded by its upstream stage, writes its artifacts plus the effective
//! `config.toml` under the output directory and returns a summary.

pub mod config;
pub mod forecast;
pub mod plots;
pub mod scoring;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::{self, read_meta, ModelMeta};
use crate::data::Role;
use crate::data::{synth_generate, Dataset, DatasetManifest, Split, SynthOptions};
use crate::diffusion::{
    corrdiff_parts, load_ensembles, save_ensembles, train_diffusion, Denoiser, DiffusionReport, EnsembleManifest,
    EnsemblePrediction, ENSEMBLE_MANIFEST,
};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::nn::Tensor;
use crate::regression::{train_regression, RegressionModel, TrainingReport, BEST_DIR, LATEST_DIR};
use crate::store::{read_f32_blob, write_f32_blob};
use crate::verification::{MetricReport, ReportMeta};

pub use config::{
    DataConfig, DiffusionStage, EmulationModel, EvaluateConfig, ExperimentConfig, ForecastConfig, ForecastScenario,
    GridConfig, NetConfig, Overrides, PredictConfig, RegressionStage, Seeds, Stage,
};
pub use scoring::{score_samples, Evaluation, ScoredSample};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOCK_FILE: &str = ".lock";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const FORECAST_CURVES: &str = "curves.csv";

/// Single-writer lock on an experiment directory, released on drop.
#[derive(Debug)]
pub struct ExperimentLock {
    path: PathBuf,
}

impl ExperimentLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(Error::Config(format!(
                    "{} is locked by process {} (remove {} if that process is gone)",
                    dir.display(),
                    holder.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for ExperimentLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) => fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        None => Ok(()),
    }
}

fn write_effective_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)
}

/// SHA-256 over the relative paths and contents of every file below `dir`
/// (lock file excluded), in sorted path order.
pub fn dir_checksum(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != LOCK_FILE) {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn hash_mismatch(what: &str, found: &str, expected: &str) -> Error {
    Error::Config(format!(
        "{what} was produced by configuration {found}, current configuration is {expected}; rerun the upstream stage or use a fresh output directory"
    ))
}

fn check_meta_hash(meta: &ModelMeta, what: &str, expected: &str) -> Result<()> {
    match meta.config_hash.as_deref() {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(hash_mismatch(what, h, expected)),
        None => Err(Error::Config(format!("{what} carries no configuration hash"))),
    }
}

/// Opens the experiment's dataset and checks it belongs to this configuration.
/// External datasets without a recorded hash are accepted; missing
/// normalisation statistics are fitted with the configured mode.
pub fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join(crate::data::dataset::MANIFEST_FILE).exists() {
        return Err(Error::Missing(format!("no dataset at {}; run make-synthetic first", dir.display())));
    }
    let mut ds = Dataset::open(&dir)?;
    let expected = cfg.stage_hash(Stage::Data);
    if let Some(h) = &ds.manifest().config_hash {
        if *h != expected {
            return Err(hash_mismatch(&format!("dataset {}", dir.display()), h, &expected));
        }
    }
    if ds.manifest().norm_stats.is_none() {
        ds.fit_norm_stats(cfg.data.norm_mode)?;
    }
    let table = cfg.data.table()?;
    if ds.table().hash() != table.hash() {
        return Err(Error::Data(format!(
            "dataset channel plan {} differs from the configured plan {}",
            ds.table().hash(),
            table.hash()
        )));
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub channels: Vec<String>,
    pub coarse: (usize, usize),
    pub fine: (usize, usize),
    pub config_hash: String,
    /// False when an identical dataset was already present.
    pub generated: bool,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset {}", self.dir.display())?;
        writeln!(f, "  train {} / val {} samples", self.n_train, self.n_val)?;
        writeln!(f, "  coarse {}x{} -> fine {}x{}", self.coarse.0, self.coarse.1, self.fine.0, self.fine.1)?;
        writeln!(f, "  {} output channels: {}", self.channels.len(), self.channels.join(", "))?;
        write!(f, "  config {}{}", self.config_hash, if self.generated { "" } else { " (already present)" })
    }
}

fn summarize(ds: &Dataset, hash: String, generated: bool) -> DatasetSummary {
    DatasetSummary {
        dir: ds.root().to_path_buf(),
        n_train: ds.indices(Split::Train).len(),
        n_val: ds.indices(Split::Val).len(),
        channels: ds.table().outputs().map(|s| s.key()).collect(),
        coarse: ds.pair().coarse.shape(),
        fine: ds.pair().fine.shape(),
        config_hash: hash,
        generated,
    }
}

/// Generates the synthetic dataset. A dataset already written by the same
/// configuration is kept; one from a different configuration is an error.
pub fn cmd_make_synthetic(cfg: &ExperimentConfig) -> Result<DatasetSummary> {
    let _lock = ExperimentLock::acquire(&cfg.output_dir)?;
    let dir = cfg.dataset_dir();
    let hash = cfg.stage_hash(Stage::Data);
    let manifest = dir.join(crate::data::dataset::MANIFEST_FILE);
    if manifest.exists() {
        let ds = Dataset::open(&dir)?;
        return match &ds.manifest().config_hash {
            Some(h) if *h == hash => Ok(summarize(&ds, hash, false)),
            Some(h) => Err(hash_mismatch(&format!("dataset {}", dir.display()), h, &hash)),
            None => Err(Error::Config(format!(
                "{} holds a dataset without a configuration hash; refusing to overwrite it",
                dir.display()
            ))),
        };
    }
    let pair = cfg.grid.pair()?;
    let table = cfg.data.table()?;
    let opts = SynthOptions {
        seed: cfg.seeds.data,
        n_train: cfg.data.n_train,
        n_val: cfg.data.n_val,
        error_level: cfg.data.error_level,
        norm_mode: cfg.data.norm_mode,
    };
    synth_generate(&dir, &opts, &pair, &table)?;
    let mut m = DatasetManifest::read(&dir)?;
    m.config_hash = Some(hash.clone());
    m.write(&dir)?;
    write_effective_config(&dir, cfg)?;
    let ds = Dataset::open(&dir)?;
    Ok(summarize(&ds, hash, true))
}

fn series_by_variable(rows: &[crate::regression::CurveRow]) -> Vec<(String, Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let key = format!("{}@{}", r.variable, r.level);
        let pos = match out.iter().position(|s| s.0 == key) {
            Some(p) => p,
            None => {
                out.push((key, Vec::new(), Vec::new()));
                out.len() - 1
            }
        };
        out[pos].1.push((r.epoch as f64, r.mae));
        out[pos].2.push((r.epoch as f64, r.baseline_mae));
    }
    out
}

fn plot_name(key: &str) -> String {
    key.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Trains (or resumes) the regression stage and writes its validation curves.
pub fn cmd_train_regression(cfg: &ExperimentConfig) -> Result<TrainingReport> {
    let _lock = ExperimentLock::acquire(&cfg.output_dir)?;
    let ds = open_dataset(cfg)?;
    let out = cfg.regression_dir();
    let hash = cfg.stage_hash(Stage::Regression);
    let latest = out.join(LATEST_DIR);
    if latest.join(checkpoint::MODEL_FILE).exists() {
        check_meta_hash(&read_meta(&latest)?, "regression checkpoint", &hash)?;
    }
    let table = ds.table().clone();
    let model = RegressionModel::new(
        cfg.regression.net.regression_unet(&table),
        table,
        *ds.pair(),
        ds.stats()?.clone(),
        cfg.regression.mode,
        cfg.seeds.regression,
    )?;
    let mut tc = cfg.regression.train.clone();
    tc.seed = cfg.seeds.regression;
    let report = train_regression(&ds, model, &tc, &out, Some(&hash))?;
    write_effective_config(&out, cfg)?;
    if cfg.evaluate.plots {
        for (key, mae, base) in series_by_variable(&report.curves) {
            let p = out.join("plots").join(format!("curve_{}.svg", plot_name(&key)));
            ensure_parent(&p)?;
            plots::line_plot(
                &p,
                &format!("{key} validation MAE"),
                "epoch",
                "MAE",
                &[("regression".into(), mae), ("bilinear".into(), base)],
            )?;
        }
    }
    Ok(report)
}

fn load_regression(cfg: &ExperimentConfig) -> Result<RegressionModel> {
    let best = cfg.regression_dir().join(BEST_DIR);
    if !best.join(checkpoint::MODEL_FILE).exists() {
        return Err(Error::Missing(format!(
            "regression checkpoint required: nothing at {}; run train-regression first",
            best.display()
        )));
    }
    let (f, meta) = RegressionModel::load(&best)?;
    check_meta_hash(&meta, "regression checkpoint", &cfg.stage_hash(Stage::Regression))?;
    Ok(f)
}

fn load_denoiser(cfg: &ExperimentConfig, f: &RegressionModel) -> Result<Denoiser> {
    let best = cfg.diffusion_dir().join(BEST_DIR);
    if !best.join(checkpoint::MODEL_FILE).exists() {
        return Err(Error::Missing(format!(
            "diffusion checkpoint required: nothing at {}; run train-diffusion first",
            best.display()
        )));
    }
    let (g, meta) = Denoiser::load(&best)?;
    check_meta_hash(&meta, "diffusion checkpoint", &cfg.stage_hash(Stage::Diffusion))?;
    if meta.regression_checksum.as_deref() != Some(f.checksum().as_str()) {
        return Err(Error::Config("the denoiser was trained against a different regression checkpoint".into()));
    }
    if g.table.hash() != f.table.hash() {
        return Err(Error::Data(format!(
            "channel plans differ: regression {} vs denoiser {}",
            f.table.hash(),
            g.table.hash()
        )));
    }
    Ok(g)
}

/// Trains (or resumes) the denoiser against the selected regression checkpoint.
pub fn cmd_train_diffusion(cfg: &ExperimentConfig) -> Result<DiffusionReport> {
    let _lock = ExperimentLock::acquire(&cfg.output_dir)?;
    let f = load_regression(cfg)?;
    let ds = open_dataset(cfg)?;
    let out = cfg.diffusion_dir();
    let hash = cfg.stage_hash(Stage::Diffusion);
    let latest = out.join(LATEST_DIR);
    if latest.join(checkpoint::MODEL_FILE).exists() {
        check_meta_hash(&read_meta(&latest)?, "diffusion checkpoint", &hash)?;
    }
    let g = Denoiser::for_regression(
        cfg.diffusion.net.denoiser_unet(&f.table),
        cfg.diffusion.edm,
        &f,
        cfg.seeds.diffusion,
    )?;
    let mut tc = cfg.diffusion.train.clone();
    tc.seed = cfg.seeds.diffusion;
    let report = train_diffusion(&ds, &f, g, &tc, &out, Some(&hash))?;
    write_effective_config(&out, cfg)?;
    if cfg.evaluate.plots {
        let p = out.join("plots").join("denoising_loss.svg");
        ensure_parent(&p)?;
        let train = report.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect();
        let val = report.epochs.iter().map(|e| (e.epoch as f64, e.val_loss)).collect();
        plots::line_plot(
            &p,
            "denoising loss",
            "epoch",
            "weighted loss",
            &[("train".into(), train), ("val".into(), val)],
        )?;
    }
    Ok(report)
}

fn split_indices(ds: &Dataset, split: Split, max: Option<usize>) -> Result<Vec<usize>> {
    let mut idx = ds.indices(split);
    if let Some(k) = max {
        idx.truncate(k);
    }
    if idx.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no samples")));
    }
    Ok(idx)
}

/// Member seeds of sample `i`: consecutive from a per-sample base.
fn member_base_seed(seed: u64, sample: usize, n_members: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add((sample * n_members) as u64)
}

/// Regression output and CorrDiff ensemble for one stored sample, both physical.
pub fn predict_sample(
    f: &RegressionModel,
    g: &Denoiser,
    x: &Tensor,
    statics: &Tensor,
    n_members: usize,
    base_seed: u64,
) -> Result<(Tensor, EnsemblePrediction)> {
    let s = x.shape();
    let x4 = x.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let (xn, sn) = f.normalize_inputs(&x4, statics)?;
    let parts = corrdiff_parts(&xn, &sn, f, g, n_members, base_seed)?;
    let (m, n) = f.pair.fine.shape();
    let co = f.table.c_out();
    let mut reg = parts.regression.reshape(&[co, m, n])?;
    f.stats.denormalize(Role::Output, reg.data_mut(), m * n)?;
    let nm = parts.members.len();
    let mut members = Tensor::stack(&parts.members)?.reshape(&[nm, co, m, n])?;
    f.stats.denormalize(Role::Output, members.data_mut(), m * n)?;
    Ok((reg, EnsemblePrediction::from_members(members, parts.seeds)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpread {
    pub channel: String,
    /// Mean ensemble standard deviation over grid points and samples.
    pub mean_std: f64,
    pub max_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSummary {
    pub dir: PathBuf,
    pub n_samples: usize,
    pub n_members: usize,
    pub spread: Vec<ChannelSpread>,
}

impl fmt::Display for PredictSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} samples x {} members written to {}", self.n_samples, self.n_members, self.dir.display())?;
        write!(f, "ensemble spread (std):")?;
        for s in &self.spread {
            write!(f, "\n  {:<16} mean {:.4}  max {:.4}", s.channel, s.mean_std, s.max_std)?;
        }
        Ok(())
    }
}

fn regression_blob(dir: &Path, ts: &str) -> PathBuf {
    dir.join(format!("regression_{ts}.bin"))
}

/// Samples the CorrDiff ensemble for the configured split and stores members,
/// mean, variance and the regression output per timestamp.
pub fn cmd_predict(cfg: &ExperimentConfig) -> Result<PredictSummary> {
    let _lock = ExperimentLock::acquire(&cfg.output_dir)?;
    let f = load_regression(cfg)?;
    let g = load_denoiser(cfg, &f)?;
    let ds = open_dataset(cfg)?;
    let idx = split_indices(&ds, cfg.predict.split, cfg.predict.max_samples)?;
    let statics = ds.load_static()?;
    let out = cfg.predictions_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let nm = cfg.predict.n_members;
    let mut timestamps = Vec::new();
    let mut preds = Vec::new();
    for &i in &idx {
        let ts = ds.manifest().samples[i].timestamp.clone();
        let (reg, ens) =
            predict_sample(&f, &g, &ds.load_x(i)?, &statics, nm, member_base_seed(cfg.seeds.predict, i, nm))?;
        if !ens.members.is_finite() {
            return Err(Error::Numeric(format!("non-finite ensemble member at {ts}")));
        }
        write_f32_blob(&regression_blob(&out, &ts), reg.data())?;
        log::info!("predicted {ts}");
        timestamps.push(ts);
        preds.push(ens);
    }
    let channels: Vec<String> = f.table.outputs().map(|s| s.key()).collect();
    let mut extra = EnsembleManifest::empty();
    extra.config_hash = Some(cfg.stage_hash(Stage::Predict));
    extra.regression_checksum = Some(f.checksum());
    extra.denoiser_checksum = Some(g.checksum());
    save_ensembles(&out, &timestamps, &preds, channels.clone(), extra)?;
    write_effective_config(&out, cfg)?;
    let (m, n) = f.pair.fine.shape();
    let spread = channels
        .into_iter()
        .enumerate()
        .map(|(o, channel)| {
            let (mut s, mut mx) = (0.0f64, 0.0f64);
            for p in &preds {
                for &v in &p.variance.data()[o * m * n..(o + 1) * m * n] {
                    let sd = (v.max(0.0) as f64).sqrt();
                    s += sd;
                    mx = mx.max(sd);
                }
            }
            ChannelSpread { channel, mean_std: s / (preds.len() * m * n) as f64, max_std: mx }
        })
        .collect();
    Ok(PredictSummary { dir: out, n_samples: idx.len(), n_members: nm, spread })
}

/// Loads stored predictions and pairs them with truth by timestamp.
pub fn load_scored_samples(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(EnsembleManifest, Vec<ScoredSample>)> {
    let dir = cfg.predictions_dir();
    if !dir.join(ENSEMBLE_MANIFEST).exists() {
        return Err(Error::Missing(format!("no predictions at {}; run predict first", dir.display())));
    }
    let (man, ens) = load_ensembles(&dir)?;
    let expected = cfg.stage_hash(Stage::Predict);
    match man.config_hash.as_deref() {
        Some(h) if h == expected => {}
        Some(h) => return Err(hash_mismatch("predictions", h, &expected)),
        None => return Err(Error::Config("predictions carry no configuration hash".into())),
    }
    let want: Vec<String> = ds.table().outputs().map(|s| s.key()).collect();
    if man.channels != want {
        return Err(Error::Data(format!(
            "prediction channels {:?} differ from dataset channels {want:?}",
            man.channels
        )));
    }
    let (m, n) = ds.pair().fine.shape();
    if man.shape != [m, n] {
        return Err(Error::Shape(format!("predictions are {:?}, fine grid is {m}x{n}", man.shape)));
    }
    let co = want.len();
    let mut samples = Vec::with_capacity(ens.len());
    for (ts, ensemble) in man.timestamps.iter().zip(ens) {
        let i = ds
            .manifest()
            .samples
            .iter()
            .position(|s| s.timestamp == *ts)
            .ok_or_else(|| Error::Data(format!("prediction timestamp {ts} has no truth in the dataset")))?;
        let regression = Tensor::new(&[co, m, n], read_f32_blob(&regression_blob(&dir, ts), co * m * n)?)?;
        samples.push(ScoredSample { timestamp: ts.clone(), truth: ds.load_y(i)?, regression, ensemble });
    }
    Ok((man, samples))
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub dir: PathBuf,
    pub evaluation: Evaluation,
    /// Channels where the single-member MAE fell below the regression MAE.
    pub single_below_regression: Vec<String>,
}

impl fmt::Display for EvaluateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.evaluation.report;
        writeln!(f, "evaluation written to {}", self.dir.display())?;
        writeln!(
            f,
            "{:<18} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "channel", "MAE reg", "MAE single", "MAE mean", "CRPS", "MAE75-100", "MAE0-25"
        )?;
        let mut seen = Vec::new();
        for row in &r.rows {
            let key = (row.variable.clone(), row.level.clone());
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let g = |m: &str| r.get(&row.variable, &row.level, m, None).unwrap_or(f64::NAN);
            writeln!(
                f,
                "{:<18} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                format!("{}@{}", row.variable, row.level),
                g("mae_regression"),
                g("mae_single"),
                g("mae_ensemble_mean"),
                g("crps"),
                g("MAE75-100"),
                g("MAE0-25")
            )?;
        }
        if !self.single_below_regression.is_empty() {
            write!(f, "note: single-member MAE below regression MAE for {}", self.single_below_regression.join(", "))?;
        }
        Ok(())
    }
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    write_text(&dir.join(METRICS_CSV), &report.to_csv())?;
    write_text(&dir.join(METRICS_JSON), &report.to_json()?)
}

/// Scores stored predictions against truth and writes the metric tables and figures.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<EvaluateSummary> {
    let _lock = ExperimentLock::acquire(&cfg.output_dir)?;
    let ds = open_dataset(cfg)?;
    let (man, samples) = load_scored_samples(cfg, &ds)?;
    let meta = ReportMeta {
        checkpoint: man.denoiser_checksum.clone(),
        split: Some(format!("{:?}", cfg.predict.split).to_lowercase()),
        seed: Some(cfg.seeds.predict),
        config_hash: Some(cfg.stage_hash(Stage::Evaluate)),
    };
    let ev = score_samples(&samples, ds.table(), ds.pair(), &cfg.evaluate, meta)?;
    let out = cfg.evaluation_dir();
    write_report(&out, &ev.report)?;
    write_text(&out.join("pdf.csv"), &scoring::pdf_csv(&ev.pdf))?;
    write_text(&out.join("area_average.csv"), &scoring::area_csv(&ev.area))?;
    write_effective_config(&out, cfg)?;

    let mut single_below = Vec::new();
    for spec in ds.table().outputs() {
        let l = spec.level.to_string();
        let get = |m: &str| ev.report.get(&spec.name, &l, m, None);
        if let (Some(c), Some(mm)) = (get("crps"), get("mae_member_mean")) {
            if c > mm {
                return Err(Error::Numeric(format!("{}: CRPS {c} exceeds mean member MAE {mm}", spec.key())));
            }
        }
        if let (Some(s), Some(r)) = (get("mae_single"), get("mae_regression")) {
            if s < r {
                log::warn!("{}: single-member MAE {s:.4} below regression MAE {r:.4}", spec.key());
                single_below.push(spec.key());
            }
        }
    }
    if cfg.evaluate.plots {
        write_evaluation_plots(&out.join("plots"), &ds, &samples, &ev)?;
    }
    Ok(EvaluateSummary { dir: out, evaluation: ev, single_below_regression: single_below })
}

fn write_evaluation_plots(dir: &Path, ds: &Dataset, samples: &[ScoredSample], ev: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (m, n) = ds.pair().fine.shape();
    let len = m * n;
    let first = &samples[0];
    for (o, spec) in ds.table().outputs().enumerate() {
        let key = spec.key();
        let name = plot_name(&key);
        let plane = |t: &Tensor| Field::new(m, n, t.data()[o * len..(o + 1) * len].to_vec()).expect("plane");
        let std = Field::new(
            m,
            n,
            first.ensemble.variance.data()[o * len..(o + 1) * len].iter().map(|v| v.max(0.0).sqrt()).collect(),
        )?;
        plots::panel_maps(
            &dir.join(format!("fields_{name}.svg")),
            &format!("{key} at {}", first.timestamp),
            &[
                ("truth".into(), plane(&first.truth)),
                ("regression".into(), plane(&first.regression)),
                ("member 0".into(), plane(&first.ensemble.member(0))),
                ("ensemble mean".into(), plane(&first.ensemble.mean)),
            ],
            96,
        )?;
        plots::panel_maps(
            &dir.join(format!("spread_{name}.svg")),
            &format!("{key} ensemble std"),
            &[("std".into(), std)],
            96,
        )?;
        let g = &ev.groups[o];
        plots::variance_scatter(
            &dir.join(format!("uncertainty_{name}.svg")),
            &format!("{key}: error vs ensemble variance"),
            &ev.pooled_variance[o],
            &ev.pooled_abs_error[o],
            &g.thresholds,
            4000,
        )?;
        let series: Vec<(String, Vec<(f64, f64)>)> = scoring::PDF_SOURCES
            .iter()
            .map(|src| {
                let pts = ev
                    .pdf
                    .iter()
                    .filter(|r| r.variable == spec.name && r.level == spec.level.to_string() && r.source == *src)
                    .map(|r| (0.5 * (r.lo + r.hi), r.density))
                    .collect::<Vec<_>>();
                (src.to_string(), pts)
            })
            .filter(|s| !s.1.is_empty())
            .collect();
        if !series.is_empty() {
            plots::line_plot(&dir.join(format!("pdf_{name}.svg")), &format!("{key} PDF"), "value", "density", &series)?;
        }
    }
    Ok(())
}

/// Downscales degraded coarse inputs for every scenario and lead time and
/// writes the per-scenario MAE curves.
pub fn cmd_forecast_emulate(cfg: &ExperimentConfig) -> Result<MetricReport> {
    if cfg.forecast.scenarios.is_empty() {
        return Err(Error::Config("forecast.scenarios is empty".into()));
    }
    let _lock = ExperimentLock::acquire(&cfg.output_dir)?;
    let f = load_regression(cfg)?;
    let g = match cfg.forecast.model {
        EmulationModel::Regression => None,
        EmulationModel::Corrdiff => Some(load_denoiser(cfg, &f)?),
    };
    let ds = open_dataset(cfg)?;
    let idx = split_indices(&ds, Split::Val, cfg.forecast.max_samples)?;
    let statics = ds.load_static()?;
    let meta = ReportMeta {
        checkpoint: Some(g.as_ref().map_or_else(|| f.checksum(), |g| g.checksum())),
        split: Some("val".into()),
        seed: Some(cfg.seeds.forecast),
        config_hash: Some(cfg.stage_hash(Stage::Forecast)),
    };
    let nm = cfg.forecast.n_members;
    let seed = cfg.seeds.forecast;
    let report = forecast::emulate(&ds, &idx, &cfg.forecast.scenarios, seed, meta, |x| match &g {
        None => f.predict_physical(x, &statics),
        Some(g) => {
            let s = x.shape();
            let x3 = x.clone().reshape(&s[1..])?;
            Ok(predict_sample(&f, g, &x3, &statics, nm, seed)?.1.mean)
        }
    })?;
    let out = cfg.forecast_dir();
    write_report(&out, &report)?;
    write_text(&out.join(FORECAST_CURVES), &forecast::curves_csv(&report))?;
    write_effective_config(&out, cfg)?;
    if cfg.evaluate.plots {
        let mut keys: Vec<(String, String)> =
            ds.table().outputs().map(|s| (s.name.clone(), s.level.to_string())).collect();
        keys.push((forecast::ALL_CHANNELS.into(), String::new()));
        for (var, lev) in keys {
            let metric = if var == forecast::ALL_CHANNELS { "mae_norm" } else { "mae" };
            let series: Vec<(String, Vec<(f64, f64)>)> = cfg
                .forecast
                .scenarios
                .iter()
                .map(|s| (s.tag.clone(), report.curve(&var, &lev, &format!("{metric}:{}", s.tag))))
                .collect();
            let name = plot_name(&format!("{var}@{lev}"));
            let p = out.join("plots").join(format!("lead_{name}.svg"));
            ensure_parent(&p)?;
            plots::line_plot(&p, &format!("{var} {lev} MAE by lead time"), "lead time (h)", "MAE", &series)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = ExperimentLock::acquire(dir.path()).unwrap();
        assert!(matches!(ExperimentLock::acquire(dir.path()), Err(Error::Config(_))));
        drop(a);
        let _b = ExperimentLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn dir_checksum_sees_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.bin"), [1u8, 2, 3]).unwrap();
        let c0 = dir_checksum(dir.path()).unwrap();
        fs::write(dir.path().join(LOCK_FILE), "1").unwrap();
        assert_eq!(dir_checksum(dir.path()).unwrap(), c0);
        fs::write(dir.path().join("a/x.bin"), [1u8, 2, 4]).unwrap();
        assert_ne!(dir_checksum(dir.path()).unwrap(), c0);
        fs::rename(dir.path().join("a/x.bin"), dir.path().join("a/y.bin")).unwrap();
        assert_ne!(dir_checksum(dir.path()).unwrap(), c0);
    }

    #[test]
    fn member_seeds_do_not_overlap_between_samples() {
        let a = member_base_seed(7, 0, 20);
        let b = member_base_seed(7, 1, 20);
        assert_eq!(b - a, 20);
    }
}
