//! First stage: a UNet `f` mapping bilinearly upsampled coarse inputs plus
//! static fields to the fine grid. Output channels that also appear as coarse
//! inputs are predicted as residuals on top of their own upsampled input.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind, ModelMeta, TrainerState};
use crate::data::{epoch_order, Dataset, NormStats, Role, SampleBatch, Split, VariableTable};
use crate::error::{Error, Result};
use crate::grid::{BilinearStencil, GridPair};
use crate::nn::{cosine_lr, Adam, Gradients, Graph, ParamStore, Tensor, UNet, UNetConfig, Var};
use crate::workers::map_ordered;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// Paired outputs are the network output plus the upsampled paired input.
    #[default]
    Residual,
    /// The network predicts every output directly (ablation baseline).
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Write a numbered checkpoint every this many epochs.
    pub checkpoint_every: usize,
    /// Side of the square random crop used for training; `None` trains on full grids.
    pub patch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            grad_accum_steps: 1,
            learning_rate: 2e-4,
            max_epochs: 10,
            loss: LossKind::Mse,
            seed: 0,
            checkpoint_every: 1,
            patch_size: Some(64),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad(format!(
                "batch_size ({}) and grad_accum_steps ({}) must be >= 1",
                self.batch_size, self.grad_accum_steps
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint cadence must be >= 1 epoch".into());
        }
        if self.patch_size == Some(0) {
            return bad("patch_size must be positive".into());
        }
        Ok(())
    }

    /// Samples contributing to one optimiser update.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }
}

/// Desk-scale default: five levels `[32, 64, 128, 256, 256]`, attention at the two coarsest.
pub fn default_unet_config(table: &VariableTable) -> UNetConfig {
    UNetConfig {
        embed_sizes: vec![32, 64, 128, 256, 256],
        attention_levels: vec![3, 4],
        in_channels: table.n_coarse_inputs() + table.n_static(),
        out_channels: table.c_out(),
        noise_embedding: None,
        zero_head: true,
    }
}

/// Network input and the residual base for a batch, both on the fine grid.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// `[B, c_coarse + n_static, m, n]`: upsampled inputs then statics.
    pub u: Tensor,
    /// `[B, c_out, m, n]`: upsampled paired input per output, zero when unpaired.
    pub base: Tensor,
}

/// Upsamples normalised coarse inputs and assembles the network input.
pub fn prepare_inputs(
    x: &Tensor,
    statics: &Tensor,
    stencil: &BilinearStencil,
    table: &VariableTable,
    mode: ResidualMode,
) -> Result<ModelInputs> {
    let (b, c, p, q) = x.dims4();
    let (m, n) = stencil.fine_shape();
    if c != table.n_coarse_inputs() || (p, q) != stencil.coarse_shape() {
        return Err(Error::Shape(format!(
            "coarse input is [{b}, {c}, {p}, {q}], model expects [B, {}, {}, {}]",
            table.n_coarse_inputs(),
            stencil.coarse_shape().0,
            stencil.coarse_shape().1
        )));
    }
    let ns = table.n_static();
    if statics.shape() != [ns, m, n] {
        return Err(Error::Shape(format!("static fields are {:?}, model expects [{ns}, {m}, {n}]", statics.shape())));
    }
    let plane = m * n;
    let cu = c + ns;
    let mut u = vec![0.0f32; b * cu * plane];
    for bi in 0..b {
        let xs = x.item(bi);
        for ch in 0..c {
            let dst = &mut u[(bi * cu + ch) * plane..(bi * cu + ch + 1) * plane];
            stencil.apply_slice(&xs[ch * p * q..(ch + 1) * p * q], dst);
        }
        u[(bi * cu + c) * plane..(bi + 1) * cu * plane].copy_from_slice(statics.data());
    }
    let pairs = table.output_pairs();
    let co = pairs.len();
    let mut base = vec![0.0f32; b * co * plane];
    if mode == ResidualMode::Residual {
        for bi in 0..b {
            for (o, pr) in pairs.iter().enumerate() {
                if let Some(src) = *pr {
                    if src >= c {
                        return Err(Error::Config(format!(
                            "output {o} pairs with input {src}, only {c} coarse inputs"
                        )));
                    }
                    base[(bi * co + o) * plane..(bi * co + o + 1) * plane]
                        .copy_from_slice(&u[(bi * cu + src) * plane..(bi * cu + src + 1) * plane]);
                }
            }
        }
    }
    Ok(ModelInputs { u: Tensor::new(&[b, cu, m, n], u)?, base: Tensor::new(&[b, co, m, n], base)? })
}

/// The regression model `f` with its channel plan and normalisation.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    pub net: UNet,
    pub params: ParamStore,
    pub table: VariableTable,
    pub pair: GridPair,
    pub stats: NormStats,
    pub mode: ResidualMode,
    stencil: BilinearStencil,
}

impl RegressionModel {
    pub fn new(
        config: UNetConfig,
        table: VariableTable,
        pair: GridPair,
        stats: NormStats,
        mode: ResidualMode,
        seed: u64,
    ) -> Result<Self> {
        table.validate()?;
        stats.check_covers(&table)?;
        let want_in = table.n_coarse_inputs() + table.n_static();
        if config.in_channels != want_in || config.out_channels != table.c_out() {
            return Err(Error::Config(format!(
                "UNet has {} -> {} channels, channel plan needs {want_in} -> {}",
                config.in_channels,
                config.out_channels,
                table.c_out()
            )));
        }
        if config.noise_embedding.is_some() {
            return Err(Error::Config("regression UNet takes no noise embedding".into()));
        }
        let (net, params) = UNet::with_params(config, seed)?;
        Ok(Self { net, params, stencil: BilinearStencil::new(&pair), table, pair, stats, mode })
    }

    pub fn stencil(&self) -> &BilinearStencil {
        &self.stencil
    }

    pub fn meta(&self, epoch: usize, step: u64, seed: u64) -> ModelMeta {
        ModelMeta {
            kind: ModelKind::Regression,
            unet: self.net.config().clone(),
            mode: self.mode,
            table_hash: self.table.hash(),
            variables: self.table.clone(),
            grid_pair: self.pair,
            norm_stats: self.stats.clone(),
            epoch,
            step,
            seed,
            config_hash: None,
            selection: None,
            val_score: None,
            regression_checksum: None,
        }
    }

    pub fn save(&self, dir: &Path, meta: &ModelMeta) -> Result<()> {
        checkpoint::save_model(dir, meta, &self.params)
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelMeta)> {
        let (meta, net, params) = checkpoint::load_model(dir)?;
        if meta.kind != ModelKind::Regression {
            return Err(Error::Data(format!("{} is not a regression checkpoint", dir.display())));
        }
        let mut model = Self::new(
            meta.unet.clone(),
            meta.variables.clone(),
            meta.grid_pair,
            meta.norm_stats.clone(),
            meta.mode,
            0,
        )?;
        model.net = net;
        model.params = params;
        Ok((model, meta))
    }

    pub fn checksum(&self) -> String {
        checkpoint::params_checksum(&self.params)
    }

    pub fn inputs(&self, x: &Tensor, statics: &Tensor) -> Result<ModelInputs> {
        prepare_inputs(x, statics, &self.stencil, &self.table, self.mode)
    }

    /// Network output `d` on already assembled inputs, padding to the UNet size multiple.
    pub fn raw_output(&self, u: &Tensor) -> Result<Tensor> {
        let (_, _, m, n) = u.dims4();
        let padded = u.pad_to_multiple(self.net.config().size_multiple());
        let d = self.net.predict(&self.params, padded, None)?;
        Ok(d.crop_hw(0, 0, m, n))
    }

    /// Normalised prediction for normalised inputs (see [`regress_forward`]).
    pub fn forward(&self, x: &Tensor, statics: &Tensor) -> Result<Tensor> {
        regress_forward(self, x, statics)
    }

    /// Physical-unit prediction for physical-unit inputs `[B, c, p, q]` and statics.
    pub fn predict_physical(&self, x: &Tensor, statics: &Tensor) -> Result<Tensor> {
        let (xn, sn) = self.normalize_inputs(x, statics)?;
        let mut y = self.forward(&xn, &sn)?;
        let (m, n) = self.pair.fine.shape();
        self.stats.denormalize(Role::Output, y.data_mut(), m * n)?;
        Ok(y)
    }

    pub fn normalize_inputs(&self, x: &Tensor, statics: &Tensor) -> Result<(Tensor, Tensor)> {
        let (p, q) = self.pair.coarse.shape();
        let (m, n) = self.pair.fine.shape();
        let mut xn = x.clone();
        self.stats.normalize(Role::Input, xn.data_mut(), p * q)?;
        let mut sn = statics.clone();
        if sn.numel() > 0 {
            self.stats.normalize(Role::Static, sn.data_mut(), m * n)?;
        }
        Ok((xn, sn))
    }
}

/// `yhat[v] = d[v] + bilinear(x)[pair(v)]` for paired outputs and `d[v]`
/// otherwise, in normalised space.
pub fn regress_forward(model: &RegressionModel, x: &Tensor, statics: &Tensor) -> Result<Tensor> {
    let inp = model.inputs(x, statics)?;
    let mut y = model.raw_output(&inp.u)?;
    y.add_assign(&inp.base);
    Ok(y)
}

/// One row of an evaluation table: physical-unit MAE of a channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub variable: String,
    pub level: String,
    pub mae: f64,
    pub baseline_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeTable {
    pub rows: Vec<MaeRow>,
    pub n_samples: usize,
}

impl MaeTable {
    /// Mean over channels of MAE divided by the channel's normalisation scale.
    pub fn score(&self, stats: &NormStats) -> f64 {
        let s: f64 = self.rows.iter().zip(&stats.outputs).map(|(r, st)| r.mae / st.scale()).sum();
        s / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,level,mae,baseline_mae\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.variable, r.level, r.mae, r.baseline_mae);
        }
        out
    }
}

/// Input baseline in physical units: the upsampled paired input, or for
/// unpaired channels the lower end of a fixed physical range (no echo for
/// reflectivity) or else the field the untrained zero-head model would emit.
pub fn baseline_prediction(
    x: &Tensor,
    stencil: &BilinearStencil,
    table: &VariableTable,
    stats: &NormStats,
) -> Result<Tensor> {
    let (b, c, p, q) = x.dims4();
    let (m, n) = stencil.fine_shape();
    let outs: Vec<_> = table.outputs().collect();
    let mut data = vec![0.0f32; b * outs.len() * m * n];
    for bi in 0..b {
        for (o, spec) in outs.iter().enumerate() {
            let dst = &mut data[(bi * outs.len() + o) * m * n..(bi * outs.len() + o + 1) * m * n];
            match spec.residual_pair {
                Some(u) if u < c => {
                    stencil.apply_slice(&x.item(bi)[u * p * q..(u + 1) * p * q], dst);
                }
                Some(u) => return Err(Error::Config(format!("pair index {u} out of range"))),
                None => {
                    let v = match spec.fixed_range {
                        Some(r) => r[0] as f32,
                        None => stats.outputs[o].denormalize(0.0),
                    };
                    dst.fill(v);
                }
            }
        }
    }
    Tensor::new(&[b, outs.len(), m, n], data)
}

fn abs_sums(pred: &[f32], truth: &[f32], plane: usize) -> Vec<f64> {
    pred.chunks(plane)
        .zip(truth.chunks(plane))
        .map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| (u as f64 - v as f64).abs()).sum())
        .collect()
}

/// Scores physical-unit predictions from `predict` over a split. Each sample
/// is scored independently and the per-channel sums are reduced in sample
/// order, so the result does not depend on the worker count.
pub fn evaluate_predictions<F>(ds: &Dataset, split: Split, predict: F) -> Result<MaeTable>
where
    F: Fn(&SampleBatch) -> Result<Tensor> + Sync,
{
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    let stats = ds.stats()?;
    let table = ds.table();
    let stencil = BilinearStencil::new(ds.pair());
    let (m, n) = ds.pair().fine.shape();
    let per_sample = map_ordered(&idx, |&i| -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = ds.batch(&[i])?;
        let pred = predict(&batch)?;
        if pred.shape() != batch.y.shape() {
            return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.shape(), batch.y.shape())));
        }
        let base = baseline_prediction(&batch.x, &stencil, table, stats)?;
        Ok((abs_sums(pred.data(), batch.y.data(), m * n), abs_sums(base.data(), batch.y.data(), m * n)))
    });
    let co = table.c_out();
    let (mut sp, mut sb) = (vec![0.0f64; co], vec![0.0f64; co]);
    for r in per_sample {
        let (p, b) = r?;
        for o in 0..co {
            sp[o] += p[o];
            sb[o] += b[o];
        }
    }
    let denom = (idx.len() * m * n) as f64;
    let rows = table
        .outputs()
        .enumerate()
        .map(|(o, s)| MaeRow {
            variable: s.name.clone(),
            level: s.level.to_string(),
            mae: sp[o] / denom,
            baseline_mae: sb[o] / denom,
        })
        .collect();
    Ok(MaeTable { rows, n_samples: idx.len() })
}

/// Per-variable physical MAE of a regression model on a split, with the input baseline.
pub fn evaluate_regression(model: &RegressionModel, ds: &Dataset, split: Split) -> Result<MaeTable> {
    check_compatible(model, ds)?;
    let statics = ds.load_static()?;
    evaluate_predictions(ds, split, |b| model.predict_physical(&b.x, &statics))
}

fn check_compatible(model: &RegressionModel, ds: &Dataset) -> Result<()> {
    if model.table.hash() != ds.table().hash() {
        return Err(Error::Data(format!(
            "model channel plan {} does not match dataset plan {}",
            model.table.hash(),
            ds.table().hash()
        )));
    }
    if model.pair != *ds.pair() {
        return Err(Error::Data("model and dataset grids differ".into()));
    }
    Ok(())
}

/// A normalised training example (or patch): network input, residual base and target.
#[derive(Debug, Clone)]
pub(crate) struct TrainBatch {
    pub u: Tensor,
    pub base: Tensor,
    pub y: Tensor,
}

/// Loads, normalises and upsamples samples, then cuts one random crop per sample.
pub(crate) fn load_train_batch(
    ds: &Dataset,
    indices: &[usize],
    statics: &Tensor,
    stencil: &BilinearStencil,
    mode: ResidualMode,
    patch: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch> {
    let (m, n) = ds.pair().fine.shape();
    let origins: Vec<(usize, usize)> = indices
        .iter()
        .map(|_| match patch {
            Some(s) => (rng.random_range(0..=m - s), rng.random_range(0..=n - s)),
            None => (0, 0),
        })
        .collect();
    let (h, w) = patch.map_or((m, n), |s| (s, s));
    let stats = ds.stats()?;
    let jobs: Vec<(usize, (usize, usize))> = indices.iter().copied().zip(origins).collect();
    let parts = map_ordered(&jobs, |&(i, (r0, c0))| -> Result<TrainBatch> {
        let mut b = ds.batch(&[i])?;
        b.normalize(stats)?;
        let inp = prepare_inputs(&b.x, statics, stencil, ds.table(), mode)?;
        Ok(TrainBatch {
            u: inp.u.crop_hw(r0, c0, h, w),
            base: inp.base.crop_hw(r0, c0, h, w),
            y: b.y.crop_hw(r0, c0, h, w),
        })
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let cat = |f: fn(&TrainBatch) -> &Tensor| -> Result<Tensor> {
        let (_, c, h, w) = f(&parts[0]).dims4();
        let mut data = Vec::with_capacity(parts.len() * c * h * w);
        for p in &parts {
            data.extend_from_slice(f(p).data());
        }
        Tensor::new(&[parts.len(), c, h, w], data)
    };
    Ok(TrainBatch { u: cat(|p| &p.u)?, base: cat(|p| &p.base)?, y: cat(|p| &p.y)? })
}

/// Channel with the largest absolute prediction error, for NaN diagnostics.
pub(crate) fn worst_channel(pred: &Tensor, target: &Tensor, keys: &[String]) -> String {
    let (_, c, h, w) = pred.dims4();
    let mut worst = (0usize, 0.0f32);
    for (k, (a, b)) in pred.data().chunks(h * w).zip(target.data().chunks(h * w)).enumerate() {
        let e =
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, |m, v| if v.is_nan() { f32::INFINITY } else { m.max(v) });
        if e > worst.1 {
            worst = (k % c, e);
        }
    }
    keys.get(worst.0).cloned().unwrap_or_default()
}

pub(crate) fn loss_node(g: &mut Graph, kind: LossKind, pred: Var, target: &Tensor, weights: &[f32]) -> Var {
    match kind {
        LossKind::Mse => g.squared_error(pred, target, weights),
        LossKind::Mae => g.abs_error(pred, target, weights),
    }
}

/// Residual-mode target: what the network itself must emit.
pub(crate) fn residual_target(y: &Tensor, base: &Tensor) -> Tensor {
    let mut t = y.clone();
    for (a, b) in t.data_mut().iter_mut().zip(base.data()) {
        *a -= b;
    }
    t
}

/// Loss, gradients and full prediction of the regression objective on one normalised batch.
pub fn regression_loss_and_grads(
    model: &RegressionModel,
    u: &Tensor,
    base: &Tensor,
    y: &Tensor,
    loss: LossKind,
) -> Result<(f64, Gradients, Tensor)> {
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let d = model.net.forward(&mut g, &model.params, uv, None)?;
    let target = residual_target(y, base);
    let w = vec![1.0f32; u.shape()[0]];
    let l = loss_node(&mut g, loss, d, &target, &w);
    let value = g.value(l).data()[0] as f64;
    let mut pred = g.value(d).clone();
    pred.add_assign(base);
    let grads = g.backward(l, model.params.len());
    Ok((value, grads, pred))
}

/// Stateful trainer. One [`step`](Self::step) is one optimiser update over
/// `batch_size * grad_accum_steps` samples; an epoch is one pass over the
/// shuffled training split.
pub struct RegressionTrainer<'a> {
    ds: &'a Dataset,
    pub model: RegressionModel,
    pub cfg: TrainConfig,
    opt: Adam,
    statics: Tensor,
    train: Vec<usize>,
    order: Vec<usize>,
    state: TrainerState,
    keys: Vec<String>,
}

impl<'a> RegressionTrainer<'a> {
    pub fn new(ds: &'a Dataset, model: RegressionModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&model, ds)?;
        let train = ds.indices(Split::Train);
        if train.is_empty() || ds.indices(Split::Val).is_empty() {
            return Err(Error::Data("training needs non-empty train and val splits".into()));
        }
        let (m, n) = ds.pair().fine.shape();
        let mult = model.net.config().size_multiple();
        match cfg.patch_size {
            Some(s) if s > m.min(n) || s % mult != 0 => {
                return Err(Error::Config(format!(
                    "patch size {s} must fit the {m}x{n} grid and be a multiple of {mult}"
                )))
            }
            None if m % mult != 0 || n % mult != 0 => {
                return Err(Error::Config(format!(
                    "full-grid training needs {m}x{n} divisible by {mult}; set a patch size"
                )))
            }
            _ => {}
        }
        let stats = ds.stats()?;
        let mut statics = ds.load_static()?;
        if statics.numel() > 0 {
            stats.normalize(Role::Static, statics.data_mut(), m * n)?;
        }
        let opt = Adam::new(&model.params);
        let order = epoch_order(&train, cfg.seed, 0);
        let keys = ds.table().outputs().map(|s| s.key()).collect();
        Ok(Self {
            ds,
            model,
            cfg,
            opt,
            statics,
            train,
            order,
            state: TrainerState { epoch: 0, step: 0, cursor: 0 },
            keys,
        })
    }

    /// Restores model, optimiser and position from a checkpoint written by [`save`](Self::save).
    pub fn resume(ds: &'a Dataset, dir: &Path, cfg: TrainConfig) -> Result<Self> {
        let (model, _) = RegressionModel::load(dir)?;
        let mut t = Self::new(ds, model, cfg)?;
        t.state = checkpoint::load_trainer(dir, &mut t.opt)?;
        t.order = epoch_order(&t.train, t.cfg.seed, t.state.epoch as u64);
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.effective_batch()) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.max_epochs as u64
    }

    /// One optimiser update; returns the mean loss over its samples.
    pub fn step(&mut self) -> Result<f64> {
        let take = self.cfg.effective_batch().min(self.order.len() - self.state.cursor);
        let chosen: Vec<usize> = self.order[self.state.cursor..self.state.cursor + take].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 + self.state.step);
        let mut total = Gradients::zeros_like(&self.model.params);
        let mut loss_sum = 0.0f64;
        for chunk in chosen.chunks(self.cfg.batch_size) {
            let b = load_train_batch(
                self.ds,
                chunk,
                &self.statics,
                self.model.stencil(),
                self.model.mode,
                self.cfg.patch_size,
                &mut rng,
            )?;
            let (loss, mut grads, pred) = regression_loss_and_grads(&self.model, &b.u, &b.base, &b.y, self.cfg.loss)?;
            if !loss.is_finite() || !grads.is_finite() {
                let param =
                    grads.argmax_abs().map(|(id, _)| self.model.params.name(id).to_string()).unwrap_or_default();
                return Err(Error::Numeric(format!(
                    "non-finite regression loss ({loss}) at epoch {} step {}; worst channel {}, largest gradient in {param}",
                    self.state.epoch,
                    self.state.step,
                    worst_channel(&pred, &b.y, &self.keys)
                )));
            }
            let frac = chunk.len() as f32 / take as f32;
            grads.scale(frac);
            total.accumulate(&grads);
            loss_sum += loss * frac as f64;
        }
        let lr = cosine_lr(self.cfg.learning_rate, self.state.step, self.total_steps());
        self.opt.update(&mut self.model.params, &total, lr);
        self.state.step += 1;
        self.state.cursor += take;
        if self.state.cursor >= self.order.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.order = epoch_order(&self.train, self.cfg.seed, self.state.epoch as u64);
        }
        Ok(loss_sum)
    }

    /// Runs steps until the current epoch completes; returns the per-step losses.
    pub fn run_epoch(&mut self) -> Result<Vec<f64>> {
        let epoch = self.state.epoch;
        let mut losses = Vec::new();
        while self.state.epoch == epoch {
            losses.push(self.step()?);
        }
        Ok(losses)
    }

    pub fn validate(&self) -> Result<MaeTable> {
        evaluate_regression(&self.model, self.ds, Split::Val)
    }

    /// Mean squared error over the validation split in normalised space.
    pub fn val_mse(&self) -> Result<f64> {
        let stats = self.ds.stats()?;
        let idx = self.ds.indices(Split::Val);
        let sums = map_ordered(&idx, |&i| -> Result<(f64, usize)> {
            let mut b = self.ds.batch(&[i])?;
            b.normalize(stats)?;
            let pred = self.model.forward(&b.x, &self.statics)?;
            let s = pred.data().iter().zip(b.y.data()).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum();
            Ok((s, pred.numel()))
        });
        let (mut s, mut n) = (0.0, 0);
        for r in sums {
            let (a, b) = r?;
            s += a;
            n += b;
        }
        Ok(s / n as f64)
    }

    pub fn meta(&self) -> ModelMeta {
        self.model.meta(self.state.epoch, self.state.step, self.cfg.seed)
    }

    /// Writes weights, optimiser moments and trainer position.
    pub fn save(&self, dir: &Path, meta: &ModelMeta) -> Result<()> {
        self.model.save(dir, meta)?;
        checkpoint::save_trainer(dir, &self.state, &self.opt)
    }
}

/// One line of the validation-curve table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub variable: String,
    pub level: String,
    pub epoch: usize,
    pub mae: f64,
    pub baseline_mae: f64,
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("variable,level,epoch,mae,baseline_mae\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.variable, r.level, r.epoch, r.mae, r.baseline_mae);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub curves: Vec<CurveRow>,
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub final_table: MaeTable,
}

pub const CURVES_FILE: &str = "curves.csv";
pub const LATEST_DIR: &str = "latest";
pub const BEST_DIR: &str = "best";
const HISTORY_FILE: &str = "history.json";
/// Rule recorded in the metadata of the selected checkpoint.
pub const SELECTION_RULE: &str = "lowest mean scale-normalised validation MAE over epochs";

/// Full training run writing `epoch_NNNN/`, `latest/` (resumable) and
/// `best/` checkpoints plus the validation curves under `out`. An existing
/// `latest/` checkpoint is resumed.
pub fn train_regression(
    ds: &Dataset,
    model: RegressionModel,
    cfg: &TrainConfig,
    out: &Path,
    config_hash: Option<&str>,
) -> Result<TrainingReport> {
    let latest = out.join(LATEST_DIR);
    let (mut trainer, mut report) = if latest.join(checkpoint::TRAINER_FILE).exists() {
        let t = RegressionTrainer::resume(ds, &latest, cfg.clone())?;
        let history: TrainingReport = checkpoint::read_json(&out.join(HISTORY_FILE))?;
        (t, history)
    } else {
        let t = RegressionTrainer::new(ds, model, cfg.clone())?;
        let empty = TrainingReport {
            curves: Vec::new(),
            epoch_losses: Vec::new(),
            best_epoch: 0,
            best_score: f64::INFINITY,
            final_table: MaeTable { rows: Vec::new(), n_samples: 0 },
        };
        (t, empty)
    };
    let stats = ds.stats()?.clone();
    while trainer.state().epoch < cfg.max_epochs {
        let losses = trainer.run_epoch()?;
        let epoch = trainer.state().epoch;
        log::info!("regression epoch {epoch}: mean loss {:.6}", mean(&losses));
        let table = trainer.validate()?;
        let score = table.score(&stats);
        report.epoch_losses.push(mean(&losses));
        report.curves.extend(table.rows.iter().map(|r| CurveRow {
            variable: r.variable.clone(),
            level: r.level.clone(),
            epoch,
            mae: r.mae,
            baseline_mae: r.baseline_mae,
        }));
        let mut meta = trainer.meta();
        meta.config_hash = config_hash.map(str::to_string);
        meta.val_score = Some(score);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.max_epochs {
            trainer.model.save(&out.join(format!("epoch_{epoch:04}")), &meta)?;
        }
        if score < report.best_score {
            report.best_score = score;
            report.best_epoch = epoch;
            let mut best = meta.clone();
            best.selection = Some(SELECTION_RULE.into());
            trainer.model.save(&out.join(BEST_DIR), &best)?;
        }
        report.final_table = table;
        trainer.save(&latest, &meta)?;
        checkpoint::write_json(&out.join(HISTORY_FILE), &report)?;
        let csv = out.join(CURVES_FILE);
        fs::write(&csv, curves_csv(&report.curves)).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{default_synthetic_table, synth_generate, NormMode, SynthOptions};
    use crate::grid::{make_grid_pair, Extent, Field};

    /// Tiny synthetic set: 2x2 degrees at 0.25 -> 8x8 coarse, factor 4 -> 32x32 fine.
    pub(crate) fn tiny_dataset(dir: &Path, seed: u64, n_train: usize) -> Dataset {
        let ext = Extent::edges(30.0, 32.0, 100.0, 102.0);
        let pair = make_grid_pair(ext, 0.25, ext, 0.0625).unwrap();
        let opts = SynthOptions { seed, n_train, n_val: 2, error_level: 0.0, norm_mode: NormMode::MinMax };
        synth_generate(dir, &opts, &pair, &default_synthetic_table()).unwrap()
    }

    pub(crate) fn tiny_config(table: &VariableTable) -> UNetConfig {
        UNetConfig {
            embed_sizes: vec![8, 16],
            attention_levels: vec![1],
            in_channels: table.n_coarse_inputs() + table.n_static(),
            out_channels: table.c_out(),
            noise_embedding: None,
            zero_head: true,
        }
    }

    fn tiny_model(ds: &Dataset, mode: ResidualMode, seed: u64) -> RegressionModel {
        let t = ds.table().clone();
        RegressionModel::new(tiny_config(&t), t, *ds.pair(), ds.stats().unwrap().clone(), mode, seed).unwrap()
    }

    fn randomize_head(model: &mut RegressionModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            if model.params.name(id).starts_with("conv_out") {
                for v in model.params.get_mut(id).data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
    }

    #[test]
    fn zero_head_is_bilinear_interpolation() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 1, 2);
        let model = tiny_model(&ds, ResidualMode::Residual, 0);
        let mut b = ds.batch(&[0, 1]).unwrap();
        b.normalize(ds.stats().unwrap()).unwrap();
        let mut st = ds.load_static().unwrap();
        let (m, n) = ds.pair().fine.shape();
        ds.stats().unwrap().normalize(Role::Static, st.data_mut(), m * n).unwrap();
        let y = regress_forward(&model, &b.x, &st).unwrap();
        assert_eq!(y.shape(), &[2, 6, m, n]);
        let (p, q) = ds.pair().coarse.shape();
        for (o, pr) in ds.table().output_pairs().iter().enumerate() {
            for bi in 0..2 {
                let got = &y.item(bi)[o * m * n..(o + 1) * m * n];
                match pr {
                    Some(u) => {
                        let c = Field::new(p, q, b.x.item(bi)[u * p * q..(u + 1) * p * q].to_vec()).unwrap();
                        let want = crate::grid::bilinear_upsample(&c, ds.pair()).unwrap();
                        let err = got.iter().zip(want.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                        assert!(err <= 1e-6, "channel {o}: {err}");
                    }
                    None => assert!(got.iter().all(|&v| v == 0.0), "unpaired channel {o} not zero"),
                }
            }
        }
    }

    #[test]
    fn random_weights_give_finite_output_and_bad_shapes_fail() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 2, 2);
        let mut model = tiny_model(&ds, ResidualMode::Residual, 0);
        randomize_head(&mut model, 3);
        let b = ds.batch(&[0, 1]).unwrap();
        let st = ds.load_static().unwrap();
        let y = model.predict_physical(&b.x, &st).unwrap();
        assert_eq!(y.shape(), b.y.shape());
        assert!(y.is_finite());
        let wrong = Tensor::zeros(&[1, 4, 8, 8]);
        assert!(regress_forward(&model, &wrong, &st).is_err());
        let t = ds.table().clone();
        let mut cfg = tiny_config(&t);
        cfg.out_channels += 1;
        assert!(
            RegressionModel::new(cfg, t, *ds.pair(), ds.stats().unwrap().clone(), ResidualMode::Residual, 0).is_err()
        );
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 3, 2);
        let model = tiny_model(&ds, ResidualMode::Residual, 0);
        let (m, n) = ds.pair().fine.shape();
        let u = Tensor::zeros(&[1, 6, m, n]);
        let base = Tensor::full(&[1, 6, m, n], 0.25);
        // Zero head emits 0, so the target y = base is met exactly.
        for kind in [LossKind::Mse, LossKind::Mae] {
            let (loss, _, _) = regression_loss_and_grads(&model, &u, &base, &base, kind).unwrap();
            assert_eq!(loss, 0.0);
        }
    }

    #[test]
    fn evaluation_tables() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 2);
        let stats = ds.stats().unwrap();
        let stencil = BilinearStencil::new(ds.pair());
        let perfect = evaluate_predictions(&ds, Split::Val, |b| Ok(b.y.clone())).unwrap();
        assert!(perfect.rows.iter().all(|r| r.mae == 0.0));
        let base =
            evaluate_predictions(&ds, Split::Val, |b| baseline_prediction(&b.x, &stencil, ds.table(), stats)).unwrap();
        for r in &base.rows {
            assert!((r.mae - r.baseline_mae).abs() <= 1e-7, "{r:?}");
        }
        // Independent recomputation of the paired-channel baseline column.
        let (m, n) = ds.pair().fine.shape();
        let (p, q) = ds.pair().coarse.shape();
        let val = ds.indices(Split::Val);
        for (o, pr) in ds.table().output_pairs().iter().enumerate() {
            let Some(u) = pr else { continue };
            let mut s = 0.0f64;
            for &i in &val {
                let x = ds.load_x(i).unwrap();
                let y = ds.load_y(i).unwrap();
                let c =
                    Field::new(p, q, x.data()[u * p * q..(u + 1) * p * q].iter().map(|&v| v as f64).collect()).unwrap();
                let up = crate::grid::bilinear_upsample(&c, ds.pair()).unwrap();
                for (a, b) in up.as_slice().iter().zip(&y.data()[o * m * n..(o + 1) * m * n]) {
                    s += (a - *b as f64).abs();
                }
            }
            let want = s / (val.len() * m * n) as f64;
            let got = perfect.rows[o].baseline_mae;
            assert!((got - want).abs() <= 1e-5 * want.max(1e-12), "channel {o}: {got} vs {want}");
        }
    }

    #[test]
    fn overfits_four_samples() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 5, 4);
        let model = tiny_model(&ds, ResidualMode::Residual, 1);
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 3e-3,
            max_epochs: 100_000,
            patch_size: None,
            ..TrainConfig::default()
        };
        let mut t = RegressionTrainer::new(&ds, model, cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..2000 {
            losses.push(t.step().unwrap());
            if losses.len() > 50 && *losses.last().unwrap() < 0.01 * losses[0] {
                break;
            }
        }
        // Adam's first steps are noisy on a fresh net; check the early trend rather than every step.
        let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let later: f64 = losses[40..50].iter().sum::<f64>() / 10.0;
        assert!(later < early, "no early progress: {early} -> {later}");
        assert!(*losses.last().unwrap() < 0.01 * losses[0], "final {} initial {}", losses.last().unwrap(), losses[0]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 6, 6);
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            max_epochs: 3,
            patch_size: Some(16),
            ..TrainConfig::default()
        };
        let mut full = RegressionTrainer::new(&ds, tiny_model(&ds, ResidualMode::Residual, 2), cfg.clone()).unwrap();
        full.run_epoch().unwrap();
        let want = full.run_epoch().unwrap();

        let mut first = RegressionTrainer::new(&ds, tiny_model(&ds, ResidualMode::Residual, 2), cfg.clone()).unwrap();
        first.run_epoch().unwrap();
        let ck = dir.path().join("ck");
        first.save(&ck, &first.meta()).unwrap();
        drop(first);
        let mut resumed = RegressionTrainer::resume(&ds, &ck, cfg).unwrap();
        let got = resumed.run_epoch().unwrap();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5 * b.abs(), "{a} vs {b}");
        }
        assert_eq!(resumed.model.checksum(), full.model.checksum());
    }

    #[test]
    fn nan_data_aborts_with_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 7, 2);
        let mut model = tiny_model(&ds, ResidualMode::Residual, 0);
        let id = model.params.ids().find(|&id| model.params.name(id).starts_with("conv_in")).unwrap();
        model.params.get_mut(id).data_mut()[0] = f32::NAN;
        let cfg = TrainConfig { batch_size: 2, patch_size: None, ..TrainConfig::default() };
        let mut t = RegressionTrainer::new(&ds, model, cfg).unwrap();
        let err = t.step().unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.exit_code(), 4);
        assert!(
            msg.contains("epoch 0 step 0") && msg.contains("worst channel") && msg.contains("largest gradient"),
            "{msg}"
        );
    }

    #[test]
    fn train_regression_writes_curves_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 8, 4);
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            max_epochs: 2,
            patch_size: Some(16),
            ..TrainConfig::default()
        };
        let out = dir.path().join("reg");
        let rep = train_regression(&ds, tiny_model(&ds, ResidualMode::Residual, 0), &cfg, &out, Some("abc")).unwrap();
        assert_eq!(rep.curves.len(), 2 * 6);
        let csv = fs::read_to_string(out.join(CURVES_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 12);
        assert!(csv.starts_with("variable,level,epoch,mae,baseline_mae"));
        let (_, meta) = RegressionModel::load(&out.join(BEST_DIR)).unwrap();
        assert_eq!(meta.selection.as_deref(), Some(SELECTION_RULE));
        assert_eq!(meta.config_hash.as_deref(), Some("abc"));
        assert!(out.join("epoch_0001/model.json").exists());
        // Finished runs resume as a no-op.
        let again = train_regression(&ds, tiny_model(&ds, ResidualMode::Residual, 0), &cfg, &out, Some("abc")).unwrap();
        assert_eq!(again.curves, rep.curves);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { checkpoint_every: 0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(TrainConfig { grad_accum_steps: 4, ..Default::default() }.effective_batch(), 32);
    }
}
