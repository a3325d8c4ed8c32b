//! TOML experiment configuration and per-stage hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_channel_plan, default_synthetic_table, NormMode, Split, VariableSpec, VariableTable};
use crate::diffusion::{denoiser_in_channels, EdmParams};
use crate::error::{Error, Result};
use crate::grid::{make_grid_pair, Extent, GridPair};
use crate::nn::UNetConfig;
use crate::regression::{LossKind, ResidualMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub coarse_extent: Extent,
    pub coarse_res: f64,
    pub fine_extent: Extent,
    pub fine_res: f64,
}

impl Default for GridConfig {
    /// 6 x 9 degrees at 0.25 / 0.03125 degrees: 24x36 coarse, 192x288 fine.
    fn default() -> Self {
        let e = Extent::edges(20.0, 26.0, 100.0, 109.0);
        Self { coarse_extent: e, coarse_res: 0.25, fine_extent: e, fine_res: 0.03125 }
    }
}

impl GridConfig {
    pub fn pair(&self) -> Result<GridPair> {
        make_grid_pair(self.coarse_extent, self.coarse_res, self.fine_extent, self.fine_res)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Variable combination 1-4; `None` with no custom list selects the
    /// default synthetic plan.
    pub combination: Option<u8>,
    /// Explicit channel list, used instead of a combination.
    pub variables: Option<Vec<VariableSpec>>,
    pub norm_mode: NormMode,
    pub n_train: usize,
    pub n_val: usize,
    /// White noise on coarse inputs, in units of each channel's std.
    pub error_level: f64,
    /// Use an existing dataset directory instead of generating one.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            combination: None,
            variables: None,
            norm_mode: NormMode::MinMax,
            n_train: 512,
            n_val: 64,
            error_level: 0.0,
            dataset_dir: None,
        }
    }
}

impl DataConfig {
    pub fn table(&self) -> Result<VariableTable> {
        match (self.combination, &self.variables) {
            (Some(_), Some(_)) => Err(Error::Config("set either data.combination or data.variables, not both".into())),
            (Some(c), None) => build_channel_plan(c),
            (None, Some(v)) => VariableTable::new(v.clone()),
            (None, None) => Ok(default_synthetic_table()),
        }
    }
}

/// UNet widths; channel counts follow from the channel plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub embed_sizes: Vec<usize>,
    pub attention_levels: Vec<usize>,
    #[serde(default)]
    pub noise_embedding: Option<usize>,
}

impl NetConfig {
    pub fn regression_unet(&self, table: &VariableTable) -> UNetConfig {
        UNetConfig {
            embed_sizes: self.embed_sizes.clone(),
            attention_levels: self.attention_levels.clone(),
            in_channels: table.n_coarse_inputs() + table.n_static(),
            out_channels: table.c_out(),
            noise_embedding: None,
            zero_head: true,
        }
    }

    pub fn denoiser_unet(&self, table: &VariableTable) -> UNetConfig {
        UNetConfig {
            embed_sizes: self.embed_sizes.clone(),
            attention_levels: self.attention_levels.clone(),
            in_channels: denoiser_in_channels(table),
            out_channels: table.c_out(),
            noise_embedding: Some(self.noise_embedding.unwrap_or(64)),
            zero_head: false,
        }
    }
}

/// Desk-scale network: five levels, attention at the two coarsest.
fn desk_net(noise: Option<usize>) -> NetConfig {
    NetConfig { embed_sizes: vec![16, 32, 32, 64, 64], attention_levels: vec![4], noise_embedding: noise }
}

fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        grad_accum_steps: 1,
        learning_rate: 1e-3,
        max_epochs: epochs,
        loss: LossKind::Mse,
        seed: 0,
        checkpoint_every: 1,
        patch_size: Some(64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionStage {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub mode: ResidualMode,
}

impl Default for RegressionStage {
    fn default() -> Self {
        Self { net: desk_net(None), train: desk_train(8), mode: ResidualMode::Residual }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionStage {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub edm: EdmParams,
}

impl Default for DiffusionStage {
    fn default() -> Self {
        Self { net: desk_net(Some(32)), train: desk_train(8), edm: EdmParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub n_members: usize,
    pub split: Split,
    /// Score only the first samples of the split.
    pub max_samples: Option<usize>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { n_members: 20, split: Split::Val, max_samples: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Thresholds (physical units) for FSS, applied to fixed-range channels.
    pub fss_thresholds: Vec<f64>,
    pub fss_windows: Vec<usize>,
    pub pdf_bins: usize,
    /// Lower display cutoff for PDFs of fixed-range channels.
    pub pdf_cutoff: Option<f64>,
    pub latitude_weighting: bool,
    pub plots: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            fss_thresholds: vec![10.0, 20.0, 30.0],
            fss_windows: vec![1, 5, 9, 17],
            pdf_bins: 15,
            pdf_cutoff: Some(10.0),
            latitude_weighting: false,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmulationModel {
    #[default]
    Regression,
    Corrdiff,
}

/// Lead-dependent degradation of the coarse inputs standing in for a
/// global model's error growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastScenario {
    pub tag: String,
    pub lead_times: Vec<f64>,
    /// Noise amplitude per lead, relative to each channel's own anomaly.
    pub degradation: Vec<f64>,
}

impl ForecastScenario {
    pub fn validate(&self) -> Result<()> {
        if self.lead_times.is_empty() {
            return Err(Error::Config(format!("scenario '{}' has no lead times", self.tag)));
        }
        if self.lead_times.len() != self.degradation.len() {
            return Err(Error::Config(format!(
                "scenario '{}' has {} lead times but {} degradation levels",
                self.tag,
                self.lead_times.len(),
                self.degradation.len()
            )));
        }
        if self.degradation.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::Config(format!("scenario '{}' has a negative or non-finite degradation", self.tag)));
        }
        if self.degradation.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "scenario '{}': degradation must not decrease with lead time",
                self.tag
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub model: EmulationModel,
    pub n_members: usize,
    pub max_samples: Option<usize>,
    pub scenarios: Vec<ForecastScenario>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        let leads = vec![0.0, 24.0, 48.0, 72.0, 96.0, 120.0];
        Self {
            model: EmulationModel::Regression,
            n_members: 4,
            max_samples: Some(16),
            scenarios: vec![
                ForecastScenario {
                    tag: "era5-like".into(),
                    lead_times: leads.clone(),
                    degradation: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25],
                },
                ForecastScenario {
                    tag: "gfs-like".into(),
                    lead_times: leads,
                    degradation: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub regression: u64,
    pub diffusion: u64,
    pub predict: u64,
    pub forecast: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, regression: 1, diffusion: 2, predict: 3, forecast: 4 }
    }
}

impl Seeds {
    pub fn all(n: u64) -> Self {
        Self { data: n, regression: n, diffusion: n, predict: n, forecast: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub regression: RegressionStage,
    pub diffusion: DiffusionStage,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub forecast: ForecastConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            output_dir: PathBuf::from("runs/desk"),
            seeds: Seeds::default(),
            grid: GridConfig::default(),
            data: DataConfig::default(),
            regression: RegressionStage::default(),
            diffusion: DiffusionStage::default(),
            predict: PredictConfig::default(),
            evaluate: EvaluateConfig::default(),
            forecast: ForecastConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub members: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Stages whose configuration is hashed separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Regression,
    Diffusion,
    Predict,
    Evaluate,
    Forecast,
}

fn sha(parts: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        // serde_json maps keep insertion order of the struct fields, which is fixed.
        h.update(p.to_string().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(s) = ov.seed {
            cfg.seeds = Seeds::all(s);
        }
        if let Some(m) = ov.members {
            cfg.predict.n_members = m;
            cfg.forecast.n_members = m;
        }
        if let Some(o) = &ov.out {
            cfg.output_dir = o.clone();
        } else if cfg.output_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.output_dir = parent.join(&cfg.output_dir);
            }
        }
        if let Some(d) = &cfg.data.dataset_dir {
            if d.is_relative() {
                if let Some(parent) = path.parent() {
                    cfg.data.dataset_dir = Some(parent.join(d));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully explicit effective configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.pair()?;
        let table = self.data.table()?;
        if self.data.dataset_dir.is_none() && (self.data.n_train == 0 || self.data.n_val == 0) {
            return Err(Error::Config("data.n_train and data.n_val must be >= 1".into()));
        }
        self.regression.train.validate()?;
        self.diffusion.train.validate()?;
        self.diffusion.edm.validate()?;
        self.regression.net.regression_unet(&table).validate()?;
        self.diffusion.net.denoiser_unet(&table).validate()?;
        if self.predict.n_members == 0 || self.forecast.n_members == 0 {
            return Err(Error::Config("n_members must be >= 1".into()));
        }
        if self.evaluate.fss_windows.iter().any(|w| w % 2 == 0) {
            return Err(Error::Config("FSS windows must be odd".into()));
        }
        if self.evaluate.pdf_bins == 0 {
            return Err(Error::Config("evaluate.pdf_bins must be >= 1".into()));
        }
        for s in &self.forecast.scenarios {
            s.validate()?;
        }
        Ok(())
    }

    /// Hash of everything that determines a stage's output, including its upstream stages.
    pub fn stage_hash(&self, stage: Stage) -> String {
        fn j<T: Serialize>(v: &T) -> serde_json::Value {
            serde_json::to_value(v).expect("config serialises")
        }
        let mut parts = vec![j(&self.grid), j(&self.data), j(&self.seeds.data)];
        let upstream = |parts: &mut Vec<serde_json::Value>, through_diffusion: bool| {
            parts.extend([j(&self.regression), j(&self.seeds.regression)]);
            if through_diffusion {
                parts.extend([j(&self.diffusion), j(&self.seeds.diffusion)]);
            }
        };
        match stage {
            Stage::Data => {}
            Stage::Regression => upstream(&mut parts, false),
            Stage::Diffusion => upstream(&mut parts, true),
            Stage::Predict => {
                upstream(&mut parts, true);
                parts.extend([j(&self.predict), j(&self.seeds.predict)]);
            }
            Stage::Evaluate => {
                upstream(&mut parts, true);
                parts.extend([j(&self.predict), j(&self.seeds.predict), j(&self.evaluate)]);
            }
            Stage::Forecast => {
                upstream(&mut parts, true);
                parts.extend([j(&self.forecast), j(&self.seeds.forecast)]);
            }
        }
        sha(&parts)
    }

    /// Directory layout under `output_dir`.
    pub fn dataset_dir(&self) -> PathBuf {
        self.data.dataset_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn regression_dir(&self) -> PathBuf {
        self.output_dir.join("regression")
    }

    pub fn diffusion_dir(&self) -> PathBuf {
        self.output_dir.join("diffusion")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.output_dir.join("predictions")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.output_dir.join("evaluation")
    }

    pub fn forecast_dir(&self) -> PathBuf {
        self.output_dir.join("forecast")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let (m, n) = cfg.grid.pair().unwrap().fine.shape();
        assert_eq!((m, n), (192, 288));
        assert_eq!(cfg.data.table().unwrap().c_out(), 6);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let cfg = ExperimentConfig::from_toml("name = \"x\"\n[data]\ncombination = 2\n").unwrap();
        assert_eq!(cfg.data.table().unwrap().c_out(), 27);
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1\n"), Err(Error::Toml(_))));
        let both = ExperimentConfig::from_toml("[data]\ncombination = 2\nvariables = []\n").unwrap();
        assert!(both.validate().is_err());
    }

    #[test]
    fn stage_hashes_track_upstream_changes() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.diffusion.edm.n_steps = 10;
        assert_eq!(a.stage_hash(Stage::Data), b.stage_hash(Stage::Data));
        assert_eq!(a.stage_hash(Stage::Regression), b.stage_hash(Stage::Regression));
        assert_ne!(a.stage_hash(Stage::Diffusion), b.stage_hash(Stage::Diffusion));
        assert_ne!(a.stage_hash(Stage::Predict), b.stage_hash(Stage::Predict));
        let mut c = a.clone();
        c.seeds.data = 9;
        assert_ne!(a.stage_hash(Stage::Regression), c.stage_hash(Stage::Regression));
        let mut d = a.clone();
        d.evaluate.plots = false;
        assert_eq!(a.stage_hash(Stage::Predict), d.stage_hash(Stage::Predict));
        assert_ne!(a.stage_hash(Stage::Evaluate), d.stage_hash(Stage::Evaluate));
    }

    #[test]
    fn scenario_validation() {
        let ok = ForecastScenario { tag: "a".into(), lead_times: vec![0.0, 24.0], degradation: vec![0.0, 0.1] };
        assert!(ok.validate().is_ok());
        let mut dec = ok.clone();
        dec.degradation = vec![0.2, 0.1];
        assert!(dec.validate().is_err());
        let mut empty = ok.clone();
        empty.lead_times.clear();
        empty.degradation.clear();
        assert!(empty.validate().is_err());
        let mut short = ok;
        short.degradation.pop();
        assert!(short.validate().is_err());
    }
}
