//! Checkpoint directories: `model.json`, one float32-le blob per parameter
//! under `params/`, and optionally optimiser moments plus trainer position
//! for resuming. Denoisers add `edm.json`.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NormStats, VariableTable};
use crate::error::{Error, Result};
use crate::grid::GridPair;
use crate::nn::{Adam, ParamStore, UNet, UNetConfig};
use crate::regression::ResidualMode;

pub const MODEL_FILE: &str = "model.json";
pub const EDM_FILE: &str = "edm.json";
pub const PARAMS_DIR: &str = "params";
pub const OPTIMIZER_DIR: &str = "optimizer";
pub const TRAINER_FILE: &str = "trainer.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Regression,
    Denoiser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub unet: UNetConfig,
    pub mode: ResidualMode,
    pub table_hash: String,
    pub variables: VariableTable,
    pub grid_pair: GridPair,
    pub norm_stats: NormStats,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// How this checkpoint was chosen among the series, when it was.
    #[serde(default)]
    pub selection: Option<String>,
    #[serde(default)]
    pub val_score: Option<f64>,
    /// Parameter checksum of the frozen regression a denoiser was trained against.
    #[serde(default)]
    pub regression_checksum: Option<String>,
}

impl ModelMeta {
    pub fn check_table(&self) -> Result<()> {
        self.variables.validate()?;
        if self.variables.hash() != self.table_hash {
            return Err(Error::Data(format!(
                "checkpoint variable table hash {} does not match its table ({})",
                self.table_hash,
                self.variables.hash()
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|_| Error::Missing(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

/// SHA-256 over every parameter's name and little-endian bytes, in store order.
pub fn params_checksum(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn save_model(dir: &Path, meta: &ModelMeta, params: &ParamStore) -> Result<()> {
    write_json(&dir.join(MODEL_FILE), meta)?;
    params.save(&dir.join(PARAMS_DIR))
}

pub fn read_meta(dir: &Path) -> Result<ModelMeta> {
    let meta: ModelMeta = read_json(&dir.join(MODEL_FILE))?;
    meta.check_table()?;
    Ok(meta)
}

/// Rebuilds the network from `model.json` and loads its parameters.
pub fn load_model(dir: &Path) -> Result<(ModelMeta, UNet, ParamStore)> {
    let meta = read_meta(dir)?;
    let (net, mut params) = UNet::with_params(meta.unet.clone(), 0)?;
    params.load(&dir.join(PARAMS_DIR))?;
    Ok((meta, net, params))
}

/// Position of a training run, saved next to the optimiser state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub step: u64,
    pub cursor: usize,
}

pub fn save_trainer(dir: &Path, state: &TrainerState, opt: &Adam) -> Result<()> {
    let od = dir.join(OPTIMIZER_DIR);
    fs::create_dir_all(&od).map_err(|e| Error::io(&od, e))?;
    opt.save(&od)?;
    write_json(&dir.join(TRAINER_FILE), state)
}

pub fn load_trainer(dir: &Path, opt: &mut Adam) -> Result<TrainerState> {
    opt.load(&dir.join(OPTIMIZER_DIR))?;
    read_json(&dir.join(TRAINER_FILE))
}

/// Recursively copies a checkpoint directory, replacing `to`.
pub fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    if to.exists() {
        fs::remove_dir_all(to).map_err(|e| Error::io(to, e))?;
    }
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            copy_dir(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        }
    }
    Ok(())
}
