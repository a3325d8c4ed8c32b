use std::path::Path;

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Adam with bias correction. Moment buffers mirror the parameter store layout
/// so they can be checkpointed next to the weights.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.add(name, Tensor::zeros(t.shape()));
            }
            s
        };
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.m.save(&dir.join("m"))?;
        self.v.save(&dir.join("v"))?;
        std::fs::write(dir.join("step"), self.step.to_string()).map_err(|e| crate::error::Error::io(dir, e))
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        self.m.load(&dir.join("m"))?;
        self.v.load(&dir.join("v"))?;
        let path = dir.join("step");
        let s = std::fs::read_to_string(&path).map_err(|e| crate::error::Error::io(&path, e))?;
        self.step =
            s.trim().parse().map_err(|_| crate::error::Error::Data(format!("bad optimizer step in {path:?}")))?;
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f32, step: u64, total: u64) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamStore::new();
        let id = p.add("x", Tensor::new(&[1, 1, 1, 2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&p);
        let target = Tensor::zeros(&[1, 1, 1, 2]);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&p, id);
            let l = g.squared_error(x, &target, &[1.0]);
            let grads = g.backward(l, p.len());
            opt.update(&mut p, &grads, 0.05);
        }
        assert!(p.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-7);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-6);
    }
}
