//! Encoder/decoder UNet with residual blocks, spatial self-attention at
//! selected levels and an optional noise-level embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channel width per resolution level, finest first.
    pub embed_sizes: Vec<usize>,
    /// Levels (indices into `embed_sizes`) that get a self-attention block.
    pub attention_levels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the noise-level embedding; `None` for the plain regression net.
    #[serde(default)]
    pub noise_embedding: Option<usize>,
    /// Initialise the output convolution to zero.
    #[serde(default = "default_true")]
    pub zero_head: bool,
}

fn default_true() -> bool {
    true
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.embed_sizes;
        if w.is_empty() || w.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("UNet widths must be positive: {w:?}")));
        }
        if w.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Config(format!("UNet widths must be non-decreasing: {w:?}")));
        }
        if self.attention_levels.is_empty() {
            return Err(Error::Config("UNet needs at least one attention level".into()));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= w.len()) {
            return Err(Error::Config(format!("attention level {l} out of range for {} levels", w.len())));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("UNet channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.embed_sizes.len() - 1)
    }

    pub fn levels(&self) -> usize {
        self.embed_sizes.len()
    }
}

fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|&g| c % g == 0 && c / g >= 2).unwrap_or(1)
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f32) -> ParamId {
        let dist = Normal::new(0.0f32, std).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::new(shape, data).unwrap())
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, v))
    }

    fn conv(&mut self, path: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let std = if zero { 0.0 } else { (1.0 / (cin * k * k) as f32).sqrt() };
        let w = if zero {
            self.constant(format!("{path}.weight"), &[cout, cin, k, k], 0.0)
        } else {
            self.normal(format!("{path}.weight"), &[cout, cin, k, k], std)
        };
        Conv { w, b: self.constant(format!("{path}.bias"), &[cout], 0.0) }
    }

    fn linear(&mut self, path: &str, cin: usize, cout: usize) -> Linear {
        Linear {
            w: self.normal(format!("{path}.weight"), &[cout, cin], (1.0 / cin as f32).sqrt()),
            b: self.constant(format!("{path}.bias"), &[cout], 0.0),
        }
    }

    fn norm(&mut self, path: &str, c: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{path}.weight"), &[c], 1.0),
            beta: self.constant(format!("{path}.bias"), &[c], 0.0),
            groups: groups_for(c),
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.conv2d(x, w, b)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let (ga, be) = (g.param(p, self.gamma), g.param(p, self.beta));
        g.group_norm(x, ga, be, self.groups)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(init: &mut Init, path: &str, cin: usize, cout: usize, emb: Option<usize>) -> Self {
        Self {
            norm1: init.norm(&format!("{path}.norm1"), cin),
            conv1: init.conv(&format!("{path}.conv1"), cin, cout, 3, false),
            emb: emb.map(|e| init.linear(&format!("{path}.emb"), e, cout)),
            norm2: init.norm(&format!("{path}.norm2"), cout),
            conv2: init.conv(&format!("{path}.conv2"), cout, cout, 3, false),
            skip: (cin != cout).then(|| init.conv(&format!("{path}.skip"), cin, cout, 1, false)),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.apply(g, p, x);
        let h = g.silu(h);
        let mut h = self.conv1.apply(g, p, h);
        if let (Some(lin), Some(e)) = (&self.emb, emb) {
            let e = lin.apply(g, p, e);
            h = g.add_channel(h, e);
        }
        let h = self.norm2.apply(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.apply(g, p, h);
        let skip = match &self.skip {
            Some(c) => c.apply(g, p, x),
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
}

impl AttnBlock {
    fn new(init: &mut Init, path: &str, c: usize) -> Self {
        Self {
            norm: init.norm(&format!("{path}.norm"), c),
            qkv: init.conv(&format!("{path}.qkv"), c, 3 * c, 1, false),
            proj: init.conv(&format!("{path}.proj"), c, c, 1, false),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let h = self.norm.apply(g, p, x);
        let qkv = self.qkv.apply(g, p, h);
        let a = g.attention(qkv);
        let a = self.proj.apply(g, p, a);
        g.add(x, a)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

#[derive(Debug, Clone)]
struct NoiseMlp {
    freqs: usize,
    fc1: Linear,
    fc2: Linear,
}

/// Network structure. Parameters live in a separate [`ParamStore`] so the same
/// structure can be evaluated against cloned or reloaded weights.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    conv_in: Conv,
    noise: Option<NoiseMlp>,
    encoder: Vec<Level>,
    middle: Level,
    decoder: Vec<Level>,
    norm_out: Norm,
    conv_out: Conv,
}

/// Number of sin/cos frequency pairs used to featurise the noise level.
const NOISE_FREQS: usize = 8;

impl UNet {
    /// Builds the structure and registers freshly initialised parameters in `store`.
    pub fn new(config: UNetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init { store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let w = config.embed_sizes.clone();
        let levels = w.len();
        let emb = config.noise_embedding;
        let attn_at = |l: usize| config.attention_levels.contains(&l);

        let conv_in = init.conv("conv_in", config.in_channels, w[0], 3, false);
        let noise = emb.map(|e| NoiseMlp {
            freqs: NOISE_FREQS,
            fc1: init.linear("noise.fc1", 2 * NOISE_FREQS, e),
            fc2: init.linear("noise.fc2", e, e),
        });
        let mut encoder = Vec::with_capacity(levels);
        let mut prev = w[0];
        for (l, &c) in w.iter().enumerate() {
            encoder.push(Level {
                res: ResBlock::new(&mut init, &format!("enc.{l}.res"), prev, c, emb),
                attn: attn_at(l).then(|| AttnBlock::new(&mut init, &format!("enc.{l}.attn"), c)),
            });
            prev = c;
        }
        let bottom = levels - 1;
        let middle = Level {
            res: ResBlock::new(&mut init, "mid.res", w[bottom], w[bottom], emb),
            attn: attn_at(bottom).then(|| AttnBlock::new(&mut init, "mid.attn", w[bottom])),
        };
        let mut decoder = Vec::with_capacity(levels);
        prev = w[bottom];
        for l in (0..levels).rev() {
            let c = w[l];
            decoder.push(Level {
                res: ResBlock::new(&mut init, &format!("dec.{l}.res"), prev + c, c, emb),
                attn: attn_at(l).then(|| AttnBlock::new(&mut init, &format!("dec.{l}.attn"), c)),
            });
            prev = c;
        }
        let norm_out = init.norm("norm_out", w[0]);
        let conv_out = init.conv("conv_out", w[0], config.out_channels, 3, config.zero_head);
        Ok(Self { config, conv_in, noise, encoder, middle, decoder, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Builds a parameter store with this config's layout and seed-initialised values.
    pub fn with_params(config: UNetConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let net = Self::new(config, &mut store, seed)?;
        Ok((net, store))
    }

    fn noise_features(&self, c_noise: &[f32]) -> Tensor {
        let freqs = self.noise.as_ref().map_or(NOISE_FREQS, |n| n.freqs);
        let mut data = Vec::with_capacity(c_noise.len() * 2 * freqs);
        for &c in c_noise {
            for k in 0..freqs {
                let f = std::f32::consts::PI * (1u32 << k) as f32 / 4.0;
                data.push((c * f).cos());
            }
            for k in 0..freqs {
                let f = std::f32::consts::PI * (1u32 << k) as f32 / 4.0;
                data.push((c * f).sin());
            }
        }
        Tensor::new(&[c_noise.len(), 2 * freqs], data).unwrap()
    }

    /// Records the forward pass on `g`. `c_noise` (one value per batch item)
    /// is required iff the net was configured with a noise embedding.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        c_noise: Option<&[f32]>,
    ) -> Result<Var> {
        let (bs, c, h, w) = g.value(x).dims4();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("UNet expects {} input channels, got {c}", self.config.in_channels)));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("UNet input {h}x{w} must be divisible by {m}")));
        }
        let emb = match (&self.noise, c_noise) {
            (Some(mlp), Some(cn)) => {
                if cn.len() != bs {
                    return Err(Error::Shape(format!("{} noise levels for batch of {bs}", cn.len())));
                }
                let f = g.constant(self.noise_features(cn).cast::<T>());
                let e = mlp.fc1.apply(g, p, f);
                let e = g.silu(e);
                let e = mlp.fc2.apply(g, p, e);
                Some(g.silu(e))
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::Shape("noise level required".into())),
            (None, Some(_)) => return Err(Error::Shape("net has no noise embedding".into())),
        };

        let mut h = self.conv_in.apply(g, p, x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        let last = self.encoder.len() - 1;
        for (l, level) in self.encoder.iter().enumerate() {
            h = level.res.apply(g, p, h, emb);
            if let Some(a) = &level.attn {
                h = a.apply(g, p, h);
            }
            skips.push(h);
            if l < last {
                h = g.avg_pool2(h);
            }
        }
        h = self.middle.res.apply(g, p, h, emb);
        if let Some(a) = &self.middle.attn {
            h = a.apply(g, p, h);
        }
        for (i, level) in self.decoder.iter().enumerate() {
            let l = last - i;
            if l < last {
                h = g.upsample2(h);
            }
            h = g.concat(h, skips[l]);
            h = level.res.apply(g, p, h, emb);
            if let Some(a) = &level.attn {
                h = a.apply(g, p, h);
            }
        }
        let h = self.norm_out.apply(g, p, h);
        let h = g.silu(h);
        Ok(self.conv_out.apply(g, p, h))
    }

    /// Convenience inference call on a plain tensor.
    pub fn predict(&self, p: &ParamStore, x: Tensor, c_noise: Option<&[f32]>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let out = self.forward(&mut g, p, xv, c_noise)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(noise: Option<usize>, zero_head: bool) -> UNetConfig {
        UNetConfig {
            embed_sizes: vec![4, 8],
            attention_levels: vec![1],
            in_channels: 3,
            out_channels: 2,
            noise_embedding: noise,
            zero_head,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(None, true);
        assert!(c.validate().is_ok());
        c.attention_levels.clear();
        assert!(c.validate().is_err());
        let mut c = tiny(None, true);
        c.embed_sizes = vec![8, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape_and_zero_head() {
        let (net, p) = UNet::with_params(tiny(None, true), 0).unwrap();
        let x = Tensor::full(&[2, 3, 8, 12], 0.3);
        let y = net.predict(&p, x.clone(), None).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 12]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (net, p) = UNet::with_params(tiny(Some(16), false), 0).unwrap();
        let y = net.predict(&p, x, Some(&[0.1, -0.5])).unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let (net, p) = UNet::with_params(tiny(None, true), 0).unwrap();
        assert!(net.predict(&p, Tensor::zeros(&[1, 2, 8, 8]), None).is_err());
        assert!(net.predict(&p, Tensor::zeros(&[1, 3, 7, 8]), None).is_err());
        assert!(net.predict(&p, Tensor::zeros(&[1, 3, 8, 8]), Some(&[0.0])).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let (_, a) = UNet::with_params(tiny(Some(8), false), 5).unwrap();
        let (_, b) = UNet::with_params(tiny(Some(8), false), 5).unwrap();
        let (_, c) = UNet::with_params(tiny(Some(8), false), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gradients_match_central_differences_in_f64() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let (net, p32) = UNet::with_params(tiny(Some(8), false), 3).unwrap();
        let mut p: ParamStore<f64> = p32.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noise = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = Tensor::new(&[2, 3, 8, 8], noise(384)).unwrap();
        let t = Tensor::new(&[2, 2, 8, 8], noise(256)).unwrap();
        let cn = [0.3f32, -0.7];
        let loss = |p: &ParamStore<f64>| {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = net.forward(&mut g, p, xv, Some(&cn)).unwrap();
            let l = g.squared_error(y, &t, &[1.0, 0.5]);
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, &p, xv, Some(&cn)).unwrap();
        let l = g.squared_error(y, &t, &[1.0, 0.5]);
        let grads = g.backward(l, p.len());

        let ids: Vec<_> = p.ids().collect();
        let mut pick = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        for _ in 0..24 {
            let id = ids[pick.random_range(0..ids.len())];
            let k = pick.random_range(0..p.get(id).numel());
            let analytic = grads.get(id).unwrap().data()[k];
            let v0 = p.get(id).data()[k];
            let mut f = |d: f64| {
                p.get_mut(id).data_mut()[k] = v0 + d;
                let r = loss(&p);
                p.get_mut(id).data_mut()[k] = v0;
                r
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "{}[{k}]: {analytic} vs {numeric}", p.name(id));
        }
    }
}
