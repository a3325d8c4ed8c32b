//! Second stage: an EDM denoiser `g` trained on the residual `y - f(u)` of a
//! frozen regression, a deterministic Heun sampler, and the ensemble
//! composition `member_k = f(u) + sample_k`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind, ModelMeta, TrainerState, EDM_FILE};
use crate::data::{epoch_order, Dataset, NormStats, Role, Split, VariableTable};
use crate::error::{Error, Result};
use crate::grid::{BilinearStencil, GridPair};
use crate::nn::{cosine_lr, Adam, Gradients, Graph, ParamStore, Tensor, UNet, UNetConfig};
use crate::regression::{load_train_batch, worst_channel, RegressionModel, ResidualMode, TrainConfig};
use crate::store::{read_f32_blob, write_f32_blob};
use crate::workers::map_ordered;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdmParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    /// Mean of the log-normal training noise level.
    pub p_mean: f64,
    /// Std of the log-normal training noise level.
    pub p_std: f64,
    pub n_steps: usize,
}

impl Default for EdmParams {
    fn default() -> Self {
        Self { sigma_min: 0.002, sigma_max: 80.0, sigma_data: 0.5, rho: 7.0, p_mean: -1.2, p_std: 1.2, n_steps: 18 }
    }
}

impl EdmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.sigma_max.is_finite()
            && self.sigma_data > 0.0
            && self.rho.is_finite()
            && self.rho > 0.0
            && self.p_mean.is_finite()
            && self.p_std.is_finite()
            && self.p_std >= 0.0
            && self.n_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "EDM parameters need 0 < sigma_min < sigma_max, sigma_data > 0, rho > 0, p_std >= 0 and n_steps >= 1, got {self:?}"
            )))
        }
    }

    /// `sigma_0 > ... > sigma_{n-1} = sigma_min`, followed by a final 0.
    pub fn schedule(&self) -> Vec<f64> {
        let n = self.n_steps;
        let (a, b) = (self.sigma_max.powf(1.0 / self.rho), self.sigma_min.powf(1.0 / self.rho));
        let mut s: Vec<f64> = (0..n)
            .map(|i| {
                let t = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
                (a + t * (b - a)).powf(self.rho)
            })
            .collect();
        s[n - 1] = self.sigma_min;
        s.push(0.0);
        s
    }

    /// Training loss weight `(sigma^2 + sigma_d^2) / (sigma sigma_d)^2`.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
    }

    /// Draws a training noise level with `ln sigma ~ N(p_mean, p_std^2)`.
    pub fn sample_sigma(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.p_mean + self.p_std * z).exp()
    }
}

/// Scalings applied around the raw network at noise level `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Numeric(format!("noise level must be positive and finite, got {sigma}")));
    }
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(Precond {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// Conditioning stack for the denoiser: upsampled coarse inputs, the
/// regression prediction, then statics. `u` is the regression input
/// (`[B, c_coarse + n_static, m, n]`) and `f` its prediction.
pub fn build_condition(u: &Tensor, f: &Tensor, n_coarse: usize) -> Result<Tensor> {
    let (b, cu, m, n) = u.dims4();
    let (bf, co, mf, nf) = f.dims4();
    if (b, m, n) != (bf, mf, nf) || n_coarse > cu {
        return Err(Error::Shape(format!("condition from {:?} and {:?}", u.shape(), f.shape())));
    }
    let plane = m * n;
    let c = cu + co;
    let mut data = Vec::with_capacity(b * c * plane);
    for bi in 0..b {
        let ui = u.item(bi);
        data.extend_from_slice(&ui[..n_coarse * plane]);
        data.extend_from_slice(f.item(bi));
        data.extend_from_slice(&ui[n_coarse * plane..]);
    }
    Tensor::new(&[b, c, m, n], data)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, ca, h, w) = a.dims4();
    let cb = b.dims4().1;
    let mut data = Vec::with_capacity(bs * (ca + cb) * h * w);
    for i in 0..bs {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::new(&[bs, ca + cb, h, w], data).expect("concat sizes")
}

/// Denoiser input channel count for a channel plan.
pub fn denoiser_in_channels(table: &VariableTable) -> usize {
    table.c_out() + table.n_coarse_inputs() + table.c_out() + table.n_static()
}

pub fn default_denoiser_config(table: &VariableTable) -> UNetConfig {
    UNetConfig {
        embed_sizes: vec![32, 64, 128, 256, 256],
        attention_levels: vec![3, 4],
        in_channels: denoiser_in_channels(table),
        out_channels: table.c_out(),
        noise_embedding: Some(128),
        zero_head: false,
    }
}

/// The residual denoiser `g` with its channel plan, normalisation and EDM setup.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: UNet,
    pub params: ParamStore,
    pub edm: EdmParams,
    pub table: VariableTable,
    pub pair: GridPair,
    pub stats: NormStats,
}

impl Denoiser {
    pub fn new(
        config: UNetConfig,
        edm: EdmParams,
        table: VariableTable,
        pair: GridPair,
        stats: NormStats,
        seed: u64,
    ) -> Result<Self> {
        edm.validate()?;
        table.validate()?;
        stats.check_covers(&table)?;
        let want = denoiser_in_channels(&table);
        if config.in_channels != want || config.out_channels != table.c_out() {
            return Err(Error::Config(format!(
                "denoiser UNet has {} -> {} channels, channel plan needs {want} -> {}",
                config.in_channels,
                config.out_channels,
                table.c_out()
            )));
        }
        if config.noise_embedding.is_none() {
            return Err(Error::Config("denoiser UNet needs a noise embedding".into()));
        }
        let (net, params) = UNet::with_params(config, seed)?;
        Ok(Self { net, params, edm, table, pair, stats })
    }

    /// A denoiser sized to match a regression model.
    pub fn for_regression(config: UNetConfig, edm: EdmParams, f: &RegressionModel, seed: u64) -> Result<Self> {
        Self::new(config, edm, f.table.clone(), f.pair, f.stats.clone(), seed)
    }

    /// `D(state; sigma) = c_skip state + c_out F(c_in state, c_noise, cond)`
    /// for a batch sharing one noise level.
    pub fn denoise(&self, state: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor> {
        let pc = precondition(sigma, self.edm.sigma_data)?;
        let (b, _, m, n) = state.dims4();
        let mut scaled = state.clone();
        scaled.scale(pc.c_in as f32);
        let input = concat_channels(&scaled, cond).pad_to_multiple(self.net.config().size_multiple());
        let cn = vec![pc.c_noise as f32; b];
        let raw = self.net.predict(&self.params, input, Some(&cn))?.crop_hw(0, 0, m, n);
        let data = state
            .data()
            .iter()
            .zip(raw.data())
            .map(|(&x, &r)| (pc.c_skip * x as f64 + pc.c_out * r as f64) as f32)
            .collect();
        Tensor::new(state.shape(), data)
    }

    pub fn meta(&self, epoch: usize, step: u64, seed: u64, regression_checksum: &str) -> ModelMeta {
        ModelMeta {
            kind: ModelKind::Denoiser,
            unet: self.net.config().clone(),
            mode: ResidualMode::Residual,
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
            regression_checksum: Some(regression_checksum.to_string()),
        }
    }

    pub fn save(&self, dir: &Path, meta: &ModelMeta) -> Result<()> {
        checkpoint::save_model(dir, meta, &self.params)?;
        checkpoint::write_json(&dir.join(EDM_FILE), &self.edm)
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelMeta)> {
        let (meta, net, params) = checkpoint::load_model(dir)?;
        if meta.kind != ModelKind::Denoiser {
            return Err(Error::Data(format!("{} is not a denoiser checkpoint", dir.display())));
        }
        let edm: EdmParams = checkpoint::read_json(&dir.join(EDM_FILE))?;
        let mut g =
            Self::new(meta.unet.clone(), edm, meta.variables.clone(), meta.grid_pair, meta.norm_stats.clone(), 0)?;
        g.net = net;
        g.params = params;
        Ok((g, meta))
    }

    pub fn checksum(&self) -> String {
        checkpoint::params_checksum(&self.params)
    }
}

/// Standard normal field of the given shape drawn from `seed`.
pub fn seeded_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// Deterministic second-order EDM sampler. Starts from `sigma_0 * noise(seed)`
/// and integrates the probability-flow ODE over the schedule with an Euler
/// step plus trapezoidal correction, skipping the correction into `sigma = 0`.
pub fn heun_sample<D>(denoise: D, shape: &[usize], seed: u64, edm: &EdmParams) -> Result<Tensor>
where
    D: Fn(&Tensor, f64) -> Result<Tensor>,
{
    edm.validate()?;
    let sigmas = edm.schedule();
    let noise = seeded_noise(shape, seed);
    let mut x: Vec<f64> = noise.data().iter().map(|&v| v as f64 * sigmas[0]).collect();
    let to_tensor = |v: &[f64]| Tensor::new(shape, v.iter().map(|&a| a as f32).collect());
    for i in 0..edm.n_steps {
        let (s, s_next) = (sigmas[i], sigmas[i + 1]);
        let den = denoise(&to_tensor(&x)?, s)?;
        let d: Vec<f64> = x.iter().zip(den.data()).map(|(&xv, &dv)| (xv - dv as f64) / s).collect();
        let h = s_next - s;
        let euler: Vec<f64> = x.iter().zip(&d).map(|(&xv, &dv)| xv + h * dv).collect();
        x = if s_next > 0.0 {
            let den2 = denoise(&to_tensor(&euler)?, s_next)?;
            x.iter()
                .zip(&d)
                .zip(euler.iter().zip(den2.data()))
                .map(|((&xv, &dv), (&ev, &d2))| {
                    let dp = (ev - d2 as f64) / s_next;
                    xv + h * 0.5 * (dv + dp)
                })
                .collect()
        } else {
            euler
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sampler state overflowed at step {i} (sigma {s})")));
        }
    }
    to_tensor(&x)
}

/// Ensemble output in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// `[N, c_out, m, n]`
    pub members: Tensor,
    /// `[c_out, m, n]`
    pub mean: Tensor,
    /// `[c_out, m, n]`, population variance across members.
    pub variance: Tensor,
    pub seeds: Vec<u64>,
}

impl EnsemblePrediction {
    /// Builds the summary fields from member fields.
    pub fn from_members(members: Tensor, seeds: Vec<u64>) -> Result<Self> {
        let (nm, c, m, n) = members.dims4();
        if nm == 0 || seeds.len() != nm {
            return Err(Error::Shape(format!("{nm} members with {} seeds", seeds.len())));
        }
        let len = c * m * n;
        let mut mean = vec![0.0f32; len];
        let mut var = vec![0.0f32; len];
        for j in 0..len {
            let mu = (0..nm).map(|k| members.item(k)[j] as f64).sum::<f64>() / nm as f64;
            let v = (0..nm).map(|k| (members.item(k)[j] as f64 - mu).powi(2)).sum::<f64>() / nm as f64;
            mean[j] = mu as f32;
            var[j] = v as f32;
        }
        Ok(Self { members, mean: Tensor::new(&[c, m, n], mean)?, variance: Tensor::new(&[c, m, n], var)?, seeds })
    }

    pub fn n_members(&self) -> usize {
        self.members.shape()[0]
    }

    pub fn member(&self, k: usize) -> Tensor {
        let s = self.members.shape();
        Tensor::new(&s[1..], self.members.item(k).to_vec()).expect("member shape")
    }
}

/// Normalised-space pieces of one CorrDiff prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrDiffParts {
    /// Regression prediction `[1, c_out, m, n]`.
    pub regression: Tensor,
    /// One sampled residual `[1, c_out, m, n]` per member.
    pub residuals: Vec<Tensor>,
    /// `regression + residual` per member.
    pub members: Vec<Tensor>,
    pub seeds: Vec<u64>,
}

fn check_pairing(f: &RegressionModel, g: &Denoiser) -> Result<()> {
    if f.table.hash() != g.table.hash() {
        return Err(Error::Data(format!(
            "regression channel plan {} and denoiser plan {} differ",
            f.table.hash(),
            g.table.hash()
        )));
    }
    if f.pair != g.pair || f.stats != g.stats {
        return Err(Error::Data("regression and denoiser grids or normalisation differ".into()));
    }
    Ok(())
}

/// CorrDiff in normalised space for one sample: `member_k = f(u) + heun_sample(seed base+k)`.
/// Members are sampled in parallel; seeds fix the result regardless of worker count.
pub fn corrdiff_parts(
    x: &Tensor,
    statics: &Tensor,
    f: &RegressionModel,
    g: &Denoiser,
    n_members: usize,
    base_seed: u64,
) -> Result<CorrDiffParts> {
    check_pairing(f, g)?;
    if n_members == 0 {
        return Err(Error::Config("n_members must be >= 1".into()));
    }
    if x.dims4().0 != 1 {
        return Err(Error::Shape("corrdiff works on one sample at a time".into()));
    }
    let inp = f.inputs(x, statics)?;
    let mut reg = f.raw_output(&inp.u)?;
    reg.add_assign(&inp.base);
    let cond = build_condition(&inp.u, &reg, f.table.n_coarse_inputs())?;
    let seeds: Vec<u64> = (0..n_members as u64).map(|k| base_seed.wrapping_add(k)).collect();
    let shape = reg.shape().to_vec();
    let residuals = map_ordered(&seeds, |&s| heun_sample(|st, sig| g.denoise(st, sig, &cond), &shape, s, &g.edm))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let members = residuals
        .iter()
        .map(|r| {
            let mut m = reg.clone();
            m.add_assign(r);
            m
        })
        .collect();
    Ok(CorrDiffParts { regression: reg, residuals, members, seeds })
}

/// CorrDiff ensemble for one physical-unit sample `x` `[1, c, p, q]` with
/// physical statics, returned in physical units.
pub fn corrdiff_predict(
    x: &Tensor,
    statics: &Tensor,
    f: &RegressionModel,
    g: &Denoiser,
    n_members: usize,
    base_seed: u64,
) -> Result<EnsemblePrediction> {
    let (xn, sn) = f.normalize_inputs(x, statics)?;
    let parts = corrdiff_parts(&xn, &sn, f, g, n_members, base_seed)?;
    let (m, n) = f.pair.fine.shape();
    let nm = parts.members.len();
    let mut members = Tensor::stack(&parts.members)?.reshape(&[nm, f.table.c_out(), m, n])?;
    f.stats.denormalize(Role::Output, members.data_mut(), m * n)?;
    EnsemblePrediction::from_members(members, parts.seeds)
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

/// Manifest of a persisted set of ensemble predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub dtype: String,
    pub layout: String,
    /// Axis names of each member blob, outermost first.
    pub axes: Vec<String>,
    pub n_members: usize,
    pub channels: Vec<String>,
    pub shape: [usize; 2],
    pub seeds: Vec<Vec<u64>>,
    pub timestamps: Vec<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub regression_checksum: Option<String>,
    #[serde(default)]
    pub denoiser_checksum: Option<String>,
}

/// Writes `members_<timestamp>.bin` (`[members, channels, rows, cols]`) and
/// the matching mean/variance blobs plus `ensemble.json`.
pub fn save_ensembles(
    dir: &Path,
    timestamps: &[String],
    preds: &[EnsemblePrediction],
    channels: Vec<String>,
    mut manifest_extra: EnsembleManifest,
) -> Result<EnsembleManifest> {
    if timestamps.len() != preds.len() || preds.is_empty() {
        return Err(Error::Data("one ensemble per timestamp required".into()));
    }
    let n_members = preds[0].n_members();
    let s = preds[0].members.shape();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ts, p) in timestamps.iter().zip(preds) {
        if p.members.shape() != s {
            return Err(Error::Shape("ensembles differ in shape".into()));
        }
        write_f32_blob(&dir.join(format!("members_{ts}.bin")), p.members.data())?;
        write_f32_blob(&dir.join(format!("mean_{ts}.bin")), p.mean.data())?;
        write_f32_blob(&dir.join(format!("variance_{ts}.bin")), p.variance.data())?;
    }
    manifest_extra.dtype = crate::data::dataset::DTYPE.into();
    manifest_extra.layout = crate::data::dataset::LAYOUT.into();
    manifest_extra.axes = ["members", "channels", "rows", "cols"].map(String::from).to_vec();
    manifest_extra.n_members = n_members;
    manifest_extra.channels = channels;
    manifest_extra.shape = [s[2], s[3]];
    manifest_extra.seeds = preds.iter().map(|p| p.seeds.clone()).collect();
    manifest_extra.timestamps = timestamps.to_vec();
    checkpoint::write_json(&dir.join(ENSEMBLE_MANIFEST), &manifest_extra)?;
    Ok(manifest_extra)
}

impl EnsembleManifest {
    pub fn empty() -> Self {
        Self {
            dtype: String::new(),
            layout: String::new(),
            axes: Vec::new(),
            n_members: 0,
            channels: Vec::new(),
            shape: [0, 0],
            seeds: Vec::new(),
            timestamps: Vec::new(),
            config_hash: None,
            regression_checksum: None,
            denoiser_checksum: None,
        }
    }
}

pub fn load_ensembles(dir: &Path) -> Result<(EnsembleManifest, Vec<EnsemblePrediction>)> {
    let man: EnsembleManifest = checkpoint::read_json(&dir.join(ENSEMBLE_MANIFEST))?;
    let c = man.channels.len();
    let [m, n] = man.shape;
    let mut out = Vec::with_capacity(man.timestamps.len());
    for (ts, seeds) in man.timestamps.iter().zip(&man.seeds) {
        let data = read_f32_blob(&dir.join(format!("members_{ts}.bin")), man.n_members * c * m * n)?;
        let members = Tensor::new(&[man.n_members, c, m, n], data)?;
        out.push(EnsemblePrediction::from_members(members, seeds.clone())?);
    }
    Ok((man, out))
}

/// Loss and gradients of the EDM objective for one normalised batch:
/// `lambda(sigma) |D(r + sigma n; sigma) - r|^2` averaged over batch and pixels.
pub fn diffusion_loss_and_grads(
    g: &Denoiser,
    residual: &Tensor,
    cond: &Tensor,
    sigmas: &[f64],
    noise: &Tensor,
) -> Result<(f64, Gradients, Tensor)> {
    let (b, c, h, w) = residual.dims4();
    if sigmas.len() != b || noise.shape() != residual.shape() {
        return Err(Error::Shape("one sigma and one noise field per sample required".into()));
    }
    let plane = c * h * w;
    let mut noisy = residual.clone();
    let mut net_in = residual.clone();
    let mut skip = residual.clone();
    let mut scales = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    let mut c_noise = Vec::with_capacity(b);
    for (i, &s) in sigmas.iter().enumerate() {
        let pc = precondition(s, g.edm.sigma_data)?;
        let range = i * plane..(i + 1) * plane;
        for j in range {
            let v = residual.data()[j] as f64 + s * noise.data()[j] as f64;
            noisy.data_mut()[j] = v as f32;
            net_in.data_mut()[j] = (pc.c_in * v) as f32;
            skip.data_mut()[j] = (pc.c_skip * v) as f32;
        }
        scales.push(pc.c_out as f32);
        weights.push(g.edm.loss_weight(s) as f32);
        c_noise.push(pc.c_noise as f32);
    }
    let mut graph = Graph::new();
    let input = graph.constant(concat_channels(&net_in, cond));
    let raw = g.net.forward(&mut graph, &g.params, input, Some(&c_noise))?;
    let d = graph.affine(raw, &scales, &skip);
    let l = graph.squared_error(d, residual, &weights);
    let value = graph.value(l).data()[0] as f64;
    let denoised = graph.value(d).clone();
    let grads = graph.backward(l, g.params.len());
    Ok((value, grads, denoised))
}

/// Denoiser training. The regression prediction for every sample is computed
/// once on the full grid (so patches see exactly what sampling will see) and
/// cached in memory.
pub struct DiffusionTrainer<'a> {
    ds: &'a Dataset,
    pub model: Denoiser,
    pub cfg: TrainConfig,
    regression_checksum: String,
    opt: Adam,
    statics: Tensor,
    stencil: BilinearStencil,
    n_coarse: usize,
    train: Vec<usize>,
    order: Vec<usize>,
    cache: std::collections::HashMap<usize, Tensor>,
    state: TrainerState,
    keys: Vec<String>,
}

fn regression_cache(
    ds: &Dataset,
    f: &RegressionModel,
    statics: &Tensor,
    idx: &[usize],
) -> Result<std::collections::HashMap<usize, Tensor>> {
    let stats = ds.stats()?;
    let preds = map_ordered(idx, |&i| -> Result<Tensor> {
        let mut b = ds.batch(&[i])?;
        b.normalize(stats)?;
        f.forward(&b.x, statics)
    });
    idx.iter().copied().zip(preds).map(|(i, p)| p.map(|t| (i, t))).collect()
}

impl<'a> DiffusionTrainer<'a> {
    pub fn new(ds: &'a Dataset, f: &RegressionModel, model: Denoiser, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_pairing(f, &model)?;
        if f.table.hash() != ds.table().hash() || f.pair != *ds.pair() {
            return Err(Error::Data("regression checkpoint does not match the dataset".into()));
        }
        let train = ds.indices(Split::Train);
        let val = ds.indices(Split::Val);
        if train.is_empty() || val.is_empty() {
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
        let all: Vec<usize> = train.iter().chain(&val).copied().collect();
        let cache = regression_cache(ds, f, &statics, &all)?;
        let opt = Adam::new(&model.params);
        let order = epoch_order(&train, cfg.seed, 0);
        Ok(Self {
            ds,
            regression_checksum: f.checksum(),
            opt,
            stencil: f.stencil().clone(),
            n_coarse: f.table.n_coarse_inputs(),
            statics,
            train,
            order,
            cache,
            state: TrainerState { epoch: 0, step: 0, cursor: 0 },
            keys: ds.table().outputs().map(|s| s.key()).collect(),
            model,
            cfg,
        })
    }

    pub fn resume(ds: &'a Dataset, f: &RegressionModel, dir: &Path, cfg: TrainConfig) -> Result<Self> {
        let (model, meta) = Denoiser::load(dir)?;
        if meta.regression_checksum.as_deref() != Some(f.checksum().as_str()) {
            return Err(Error::Data("denoiser checkpoint was trained against a different regression".into()));
        }
        let mut t = Self::new(ds, f, model, cfg)?;
        t.state = checkpoint::load_trainer(dir, &mut t.opt)?;
        t.order = epoch_order(&t.train, t.cfg.seed, t.state.epoch as u64);
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        self.state
    }

    pub fn regression_checksum(&self) -> &str {
        &self.regression_checksum
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.effective_batch()) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.max_epochs as u64
    }

    /// Residual targets and conditions for a set of samples, cropped alike.
    fn batch(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let patch = self.cfg.patch_size;
        let (m, n) = self.ds.pair().fine.shape();
        let tb = load_train_batch(self.ds, indices, &self.statics, &self.stencil, ResidualMode::Residual, None, rng)?;
        let f = Tensor::stack(&indices.iter().map(|i| self.cache[i].clone()).collect::<Vec<_>>())?;
        let f = f.reshape(tb.y.shape())?;
        let cond = build_condition(&tb.u, &f, self.n_coarse)?;
        let mut r = tb.y.clone();
        for (a, b) in r.data_mut().iter_mut().zip(f.data()) {
            *a -= b;
        }
        let Some(s) = patch else {
            return Ok((r, cond));
        };
        let mut rs = Vec::new();
        let mut cs = Vec::new();
        for bi in 0..indices.len() {
            let r0 = rand::Rng::random_range(rng, 0..=m - s);
            let c0 = rand::Rng::random_range(rng, 0..=n - s);
            let one = |t: &Tensor| {
                let (_, c, h, w) = t.dims4();
                Tensor::new(&[1, c, h, w], t.item(bi).to_vec()).unwrap().crop_hw(r0, c0, s, s)
            };
            rs.push(one(&r));
            cs.push(one(&cond));
        }
        let cat = |v: &[Tensor]| -> Result<Tensor> {
            let (_, c, h, w) = v[0].dims4();
            Tensor::stack(v)?.reshape(&[v.len(), c, h, w])
        };
        Ok((cat(&rs)?, cat(&cs)?))
    }

    pub fn step(&mut self) -> Result<f64> {
        let take = self.cfg.effective_batch().min(self.order.len() - self.state.cursor);
        let chosen: Vec<usize> = self.order[self.state.cursor..self.state.cursor + take].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 + self.state.step);
        let mut total = Gradients::zeros_like(&self.model.params);
        let mut loss_sum = 0.0;
        for chunk in chosen.chunks(self.cfg.batch_size) {
            let (r, cond) = self.batch(chunk, &mut rng)?;
            let sigmas: Vec<f64> = chunk.iter().map(|_| self.model.edm.sample_sigma(&mut rng)).collect();
            let noise = noise_like(&r, &mut rng);
            let (loss, mut grads, den) = diffusion_loss_and_grads(&self.model, &r, &cond, &sigmas, &noise)?;
            if !loss.is_finite() || !grads.is_finite() {
                let param =
                    grads.argmax_abs().map(|(id, _)| self.model.params.name(id).to_string()).unwrap_or_default();
                return Err(Error::Numeric(format!(
                    "non-finite diffusion loss ({loss}) at epoch {} step {}; worst channel {}, largest gradient in {param}",
                    self.state.epoch,
                    self.state.step,
                    worst_channel(&den, &r, &self.keys)
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

    pub fn run_epoch(&mut self) -> Result<Vec<f64>> {
        let epoch = self.state.epoch;
        let mut losses = Vec::new();
        while self.state.epoch == epoch {
            losses.push(self.step()?);
        }
        Ok(losses)
    }

    /// Validation denoising loss with noise levels and noise fixed by the
    /// sample index, so scores are comparable across epochs.
    pub fn val_loss(&self) -> Result<f64> {
        let idx = self.ds.indices(Split::Val);
        let losses = map_ordered(&idx, |&i| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
            rng.set_stream(i as u64);
            let (r, cond) = self.full_batch(i)?;
            let sigma = self.model.edm.sample_sigma(&mut rng);
            let noise = noise_like(&r, &mut rng);
            diffusion_eval(&self.model, &r, &cond, sigma, &noise)
        });
        let mut s = 0.0;
        for l in losses {
            s += l?;
        }
        Ok(s / idx.len() as f64)
    }

    fn full_batch(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tb = load_train_batch(self.ds, &[i], &self.statics, &self.stencil, ResidualMode::Residual, None, &mut rng)?;
        let f = self.cache[&i].clone();
        let cond = build_condition(&tb.u, &f, self.n_coarse)?;
        let mut r = tb.y;
        for (a, b) in r.data_mut().iter_mut().zip(f.data()) {
            *a -= b;
        }
        Ok((r, cond))
    }

    pub fn meta(&self) -> ModelMeta {
        self.model.meta(self.state.epoch, self.state.step, self.cfg.seed, &self.regression_checksum)
    }

    pub fn save(&self, dir: &Path, meta: &ModelMeta) -> Result<()> {
        self.model.save(dir, meta)?;
        checkpoint::save_trainer(dir, &self.state, &self.opt)
    }
}

fn noise_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..t.numel()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(t.shape(), data).expect("noise shape")
}

/// Weighted denoising error of one sample without recording gradients.
fn diffusion_eval(g: &Denoiser, r: &Tensor, cond: &Tensor, sigma: f64, noise: &Tensor) -> Result<f64> {
    let mut state = r.clone();
    for (s, n) in state.data_mut().iter_mut().zip(noise.data()) {
        *s = (*s as f64 + sigma * *n as f64) as f32;
    }
    let d = g.denoise(&state, sigma, cond)?;
    weighted_denoising_loss(&d, r, &[sigma], &g.edm)
}

/// `mean_b lambda(sigma_b) mean_pixels (d - r)^2`, the EDM objective for given denoised fields.
pub fn weighted_denoising_loss(d: &Tensor, r: &Tensor, sigmas: &[f64], edm: &EdmParams) -> Result<f64> {
    let b = r.shape()[0];
    if d.shape() != r.shape() || sigmas.len() != b {
        return Err(Error::Shape("denoised field, residual and noise levels disagree".into()));
    }
    let per = r.numel() / b;
    let mut total = 0.0;
    for (i, &s) in sigmas.iter().enumerate() {
        let se: f64 = d.item(i).iter().zip(r.item(i)).map(|(&a, &t)| (a as f64 - t as f64).powi(2)).sum();
        total += edm.loss_weight(s) * se;
    }
    Ok(total / (b * per) as f64)
}

/// One line of the denoiser training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub epochs: Vec<DiffusionEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub regression_checksum: String,
}

pub const DIFFUSION_CURVES_FILE: &str = "diffusion_curves.csv";
const DIFFUSION_HISTORY: &str = "diffusion_history.json";
pub const DENOISER_SELECTION_RULE: &str = "lowest fixed-draw validation denoising loss over epochs";

/// Full denoiser training against a frozen regression; writes the same
/// `epoch_NNNN/`, `latest/` and `best/` layout as the regression stage.
pub fn train_diffusion(
    ds: &Dataset,
    f: &RegressionModel,
    model: Denoiser,
    cfg: &TrainConfig,
    out: &Path,
    config_hash: Option<&str>,
) -> Result<DiffusionReport> {
    let latest = out.join(crate::regression::LATEST_DIR);
    let (mut trainer, mut report) = if latest.join(checkpoint::TRAINER_FILE).exists() {
        let t = DiffusionTrainer::resume(ds, f, &latest, cfg.clone())?;
        let h: DiffusionReport = checkpoint::read_json(&out.join(DIFFUSION_HISTORY))?;
        (t, h)
    } else {
        let t = DiffusionTrainer::new(ds, f, model, cfg.clone())?;
        let h = DiffusionReport {
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            regression_checksum: t.regression_checksum().to_string(),
        };
        (t, h)
    };
    while trainer.state().epoch < cfg.max_epochs {
        let losses = trainer.run_epoch()?;
        let epoch = trainer.state().epoch;
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let val_loss = trainer.val_loss()?;
        log::info!("diffusion epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        report.epochs.push(DiffusionEpoch { epoch, train_loss, val_loss });
        let mut meta = trainer.meta();
        meta.config_hash = config_hash.map(str::to_string);
        meta.val_score = Some(val_loss);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.max_epochs {
            trainer.model.save(&out.join(format!("epoch_{epoch:04}")), &meta)?;
        }
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            let mut best = meta.clone();
            best.selection = Some(DENOISER_SELECTION_RULE.into());
            trainer.model.save(&out.join(crate::regression::BEST_DIR), &best)?;
        }
        trainer.save(&latest, &meta)?;
        checkpoint::write_json(&out.join(DIFFUSION_HISTORY), &report)?;
        let mut csv = String::from("epoch,train_loss,val_loss\n");
        for e in &report.epochs {
            csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        let p = out.join(DIFFUSION_CURVES_FILE);
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::tests::{tiny_config, tiny_dataset};

    fn tiny_denoiser_config(table: &VariableTable) -> UNetConfig {
        UNetConfig {
            embed_sizes: vec![8, 16],
            attention_levels: vec![1],
            in_channels: denoiser_in_channels(table),
            out_channels: table.c_out(),
            noise_embedding: Some(8),
            zero_head: false,
        }
    }

    fn models(ds: &Dataset) -> (RegressionModel, Denoiser) {
        let t = ds.table().clone();
        let stats = ds.stats().unwrap().clone();
        let mut f =
            RegressionModel::new(tiny_config(&t), t.clone(), *ds.pair(), stats, ResidualMode::Residual, 1).unwrap();
        // Give the regression a non-trivial head so its output is not just the base.
        let ids: Vec<_> = f.params.ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in ids {
            if f.params.name(id).starts_with("conv_out") {
                for v in f.params.get_mut(id).data_mut() {
                    *v = 0.05 * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng);
                }
            }
        }
        let g = Denoiser::for_regression(tiny_denoiser_config(&t), EdmParams::default(), &f, 2).unwrap();
        (f, g)
    }

    #[test]
    fn precondition_limits_and_values() {
        let sd = 0.5;
        let p = precondition(sd, sd).unwrap();
        assert_eq!(p.c_skip, 0.5);
        assert!((p.c_in - 1.0 / (sd * 2f64.sqrt())).abs() < 1e-12);
        let p = precondition(1e-6, sd).unwrap();
        assert!((p.c_skip - 1.0).abs() < 1e-4 && p.c_out.abs() < 1e-4);
        assert!((p.c_noise - (1e-6f64).ln() / 4.0).abs() < 1e-12);
        assert!(precondition(0.0, sd).is_err());
        assert!(precondition(-1.0, sd).is_err());
    }

    #[test]
    fn edm_validation() {
        assert!(EdmParams::default().validate().is_ok());
        for bad in [
            EdmParams { sigma_min: 0.0, ..Default::default() },
            EdmParams { sigma_min: 90.0, ..Default::default() },
            EdmParams { sigma_data: 0.0, ..Default::default() },
            EdmParams { n_steps: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn schedule_shape() {
        let e = EdmParams::default();
        let s = e.schedule();
        assert_eq!(s.len(), e.n_steps + 1);
        assert!((s[0] - e.sigma_max).abs() < 1e-9);
        assert_eq!(s[e.n_steps - 1], e.sigma_min);
        assert_eq!(s[e.n_steps], 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        let one = EdmParams { n_steps: 1, ..e }.schedule();
        assert_eq!(one, vec![e.sigma_min, 0.0]);
    }

    #[test]
    fn log_sigma_moments() {
        let e = EdmParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean = (0..n).map(|_| e.sample_sigma(&mut rng).ln()).sum::<f64>() / n as f64;
        assert!((mean - e.p_mean).abs() < 3.0 * e.p_std / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn zero_denoiser_contracts_to_zero() {
        let e = EdmParams::default();
        let out = heun_sample(|s, _| Ok(Tensor::zeros(s.shape())), &[1, 2, 6, 5], 3, &e).unwrap();
        assert!(out.data().iter().all(|v| v.abs() <= 1e-7), "{}", out.max_abs_diff(&Tensor::zeros(&[1, 2, 6, 5])));
    }

    #[test]
    fn constant_oracle_is_recovered() {
        let e = EdmParams::default();
        let target = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| (i as f32 - 7.5) / 5.0).collect()).unwrap();
        let out = heun_sample(|_, _| Ok(target.clone()), target.shape(), 8, &e).unwrap();
        assert!(out.max_abs_diff(&target) <= 1e-4);
        let again = heun_sample(|_, _| Ok(target.clone()), target.shape(), 8, &e).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn oracle_denoised_field_has_zero_loss() {
        let e = EdmParams::default();
        let r = seeded_noise(&[2, 3, 4, 4], 1);
        assert_eq!(weighted_denoising_loss(&r, &r, &[0.3, 5.0], &e).unwrap(), 0.0);
        let mut d = r.clone();
        d.data_mut()[0] += 1.0;
        let gap = d.data()[0] as f64 - r.data()[0] as f64;
        let l = weighted_denoising_loss(&d, &r, &[0.3, 5.0], &e).unwrap();
        assert!((l - e.loss_weight(0.3) * gap * gap / 96.0).abs() < 1e-12, "{l} {gap}");
    }

    #[test]
    fn fresh_denoiser_loss_is_finite_and_positive() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 3, 4);
        let (f, g) = models(&ds);
        let mut t = DiffusionTrainer::new(
            &ds,
            &f,
            g,
            TrainConfig { batch_size: 2, patch_size: Some(16), ..Default::default() },
        )
        .unwrap();
        let l = t.step().unwrap();
        assert!(l.is_finite() && l > 0.0);
        let v = t.val_loss().unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn corrdiff_composition() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 5, 2);
        let (f, g) = models(&ds);
        let stats = ds.stats().unwrap();
        let mut b = ds.batch(&[0]).unwrap();
        let statics_phys = ds.load_static().unwrap();
        let raw_x = b.x.clone();
        b.normalize(stats).unwrap();
        let (_, sn) = f.normalize_inputs(&raw_x, &statics_phys).unwrap();
        let parts = corrdiff_parts(&b.x, &sn, &f, &g, 3, 40).unwrap();
        assert_eq!(parts.seeds, vec![40, 41, 42]);
        let reg = f.forward(&b.x, &sn).unwrap();
        assert_eq!(parts.regression, reg);
        for (m, r) in parts.members.iter().zip(&parts.residuals) {
            let mut diff = m.clone();
            for (a, b) in diff.data_mut().iter_mut().zip(reg.data()) {
                *a -= b;
            }
            assert!(diff.max_abs_diff(r) <= 1e-6);
        }
        assert!(parts.residuals[0].max_abs_diff(&parts.residuals[1]) > 0.0);

        let ens = corrdiff_predict(&raw_x, &statics_phys, &f, &g, 1, 7).unwrap();
        let (m, n) = ds.pair().fine.shape();
        assert_eq!(ens.members.shape(), &[1, ds.table().c_out(), m, n]);
        assert!(ens.variance.data().iter().all(|&v| v == 0.0));
        let again = corrdiff_predict(&raw_x, &statics_phys, &f, &g, 1, 7).unwrap();
        assert_eq!(ens, again);
    }

    #[test]
    fn ensemble_summary_and_persistence() {
        let members = seeded_noise(&[4, 2, 3, 5], 9);
        let e = EnsemblePrediction::from_members(members.clone(), vec![1, 2, 3, 4]).unwrap();
        for j in 0..30 {
            let v: Vec<f64> = (0..4).map(|k| members.item(k)[j] as f64).collect();
            let mu = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 4.0;
            assert!((e.mean.data()[j] as f64 - mu).abs() < 1e-6);
            assert!((e.variance.data()[j] as f64 - var).abs() < 1e-6);
            assert!(e.variance.data()[j] >= 0.0);
        }
        assert!(EnsemblePrediction::from_members(members.clone(), vec![1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let ts = vec!["2023010100".to_string()];
        let man =
            save_ensembles(dir.path(), &ts, &[e.clone()], vec!["a".into(), "b".into()], EnsembleManifest::empty())
                .unwrap();
        assert_eq!(man.axes[0], "members");
        let (man2, back) = load_ensembles(dir.path()).unwrap();
        assert_eq!(man, man2);
        assert_eq!(back[0], e);
    }

    #[test]
    fn denoiser_training_checkpoints_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"), 2, 4);
        let (f, g) = models(&ds);
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 2,
            patch_size: Some(16),
            learning_rate: 1e-3,
            ..Default::default()
        };
        let out = dir.path().join("run");
        let rep = train_diffusion(&ds, &f, g.clone(), &cfg, &out, Some("abc")).unwrap();
        assert_eq!(rep.epochs.len(), 2);
        let (best, meta) = Denoiser::load(&out.join("best")).unwrap();
        assert_eq!(meta.regression_checksum.as_deref(), Some(f.checksum().as_str()));
        assert_eq!(meta.selection.as_deref(), Some(DENOISER_SELECTION_RULE));
        assert_eq!(best.edm, EdmParams::default());

        // A finished run resumes to the same report without further steps.
        let again = train_diffusion(&ds, &f, g.clone(), &cfg, &out, Some("abc")).unwrap();
        assert_eq!(again, rep);

        // Two epochs in one go equal one epoch, a restart, and a second epoch.
        let (a, _) = Denoiser::load(&out.join("latest")).unwrap();
        let mut t = DiffusionTrainer::new(&ds, &f, g, cfg.clone()).unwrap();
        t.run_epoch().unwrap();
        let mid = dir.path().join("mid");
        t.save(&mid, &t.meta()).unwrap();
        let mut t = DiffusionTrainer::resume(&ds, &f, &mid, cfg.clone()).unwrap();
        t.run_epoch().unwrap();
        assert_eq!(a.checksum(), t.model.checksum());

        // A different regression invalidates the resume.
        let mut other = f.clone();
        other.params.get_mut(other.params.ids().next().unwrap()).data_mut()[0] += 1.0;
        assert!(DiffusionTrainer::resume(&ds, &other, &out.join("latest"), cfg).is_err());
    }
}
