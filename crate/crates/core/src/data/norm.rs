//! Per-channel normalisation to [-1, 1] (min-max) or zero mean / unit variance.

use serde::{Deserialize, Serialize};

use super::variables::{VariableSpec, VariableTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    MinMax,
    MeanStd,
}

/// `a`/`b` are min/max for [`NormMode::MinMax`] and mean/std for [`NormMode::MeanStd`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub key: String,
    pub mode: NormMode,
    pub a: f64,
    pub b: f64,
}

impl ChannelStats {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            NormMode::MinMax => self.b > self.a,
            NormMode::MeanStd => self.b > 0.0,
        };
        if !ok || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Data(format!(
                "degenerate normalisation for channel {}: {:?} a={} b={}",
                self.key, self.mode, self.a, self.b
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn normalize(&self, v: f32) -> f32 {
        let v = v as f64;
        (match self.mode {
            NormMode::MinMax => 2.0 * (v - self.a) / (self.b - self.a) - 1.0,
            NormMode::MeanStd => (v - self.a) / self.b,
        }) as f32
    }

    #[inline]
    pub fn denormalize(&self, v: f32) -> f32 {
        let v = v as f64;
        (match self.mode {
            NormMode::MinMax => (v + 1.0) * 0.5 * (self.b - self.a) + self.a,
            NormMode::MeanStd => v * self.b + self.a,
        }) as f32
    }

    /// Physical size of one normalised unit.
    pub fn scale(&self) -> f64 {
        match self.mode {
            NormMode::MinMax => 0.5 * (self.b - self.a),
            NormMode::MeanStd => self.b,
        }
    }
}

/// Running per-channel statistics.
#[derive(Debug, Clone)]
pub struct ChannelAccumulator {
    min: f64,
    max: f64,
    sum: f64,
    sum_sq: f64,
    count: u64,
}

impl Default for ChannelAccumulator {
    fn default() -> Self {
        Self { min: f64::INFINITY, max: f64::NEG_INFINITY, sum: 0.0, sum_sq: 0.0, count: 0 }
    }
}

impl ChannelAccumulator {
    pub fn push_slice(&mut self, values: &[f32]) {
        for &v in values {
            let v = v as f64;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            self.sum += v;
            self.sum_sq += v * v;
        }
        self.count += values.len() as u64;
    }

    pub fn finish(&self, key: &str, mode: NormMode) -> Result<ChannelStats> {
        if self.count == 0 {
            return Err(Error::Data(format!("no values for channel {key}")));
        }
        let stats = match mode {
            NormMode::MinMax => ChannelStats { key: key.into(), mode, a: self.min, b: self.max },
            NormMode::MeanStd => {
                let n = self.count as f64;
                let mean = self.sum / n;
                let var = (self.sum_sq / n - mean * mean).max(0.0);
                ChannelStats { key: key.into(), mode, a: mean, b: var.sqrt() }
            }
        };
        if stats.mode == NormMode::MinMax && stats.a == stats.b {
            return Err(Error::Data(format!(
                "channel {key} is constant ({}); min-max normalisation undefined",
                stats.a
            )));
        }
        stats.validate()?;
        Ok(stats)
    }
}

/// Statistics for every channel of a [`VariableTable`], in table order per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: Vec<ChannelStats>,
    pub statics: Vec<ChannelStats>,
    pub outputs: Vec<ChannelStats>,
}

/// Per-role accumulators fed by the dataset during fitting.
#[derive(Debug, Clone)]
pub struct StatsFitter {
    pub inputs: Vec<ChannelAccumulator>,
    pub statics: Vec<ChannelAccumulator>,
    pub outputs: Vec<ChannelAccumulator>,
}

impl StatsFitter {
    pub fn new(table: &VariableTable) -> Self {
        Self {
            inputs: vec![Default::default(); table.n_coarse_inputs()],
            statics: vec![Default::default(); table.n_static()],
            outputs: vec![Default::default(); table.c_out()],
        }
    }

    /// Paired inputs reuse their output channel's statistics so the residual
    /// connection operates on a shared scale. Static fields always use min-max;
    /// channels with a fixed physical range use that range.
    pub fn finish(&self, table: &VariableTable, mode: NormMode) -> Result<NormStats> {
        let fixed =
            |s: &VariableSpec| s.fixed_range.map(|[a, b]| ChannelStats { key: s.key(), mode: NormMode::MinMax, a, b });
        let outputs = table
            .outputs()
            .zip(&self.outputs)
            .map(|(s, acc)| match fixed(s) {
                Some(st) => Ok(st),
                None => acc.finish(&s.key(), mode),
            })
            .collect::<Result<Vec<_>>>()?;
        let out_specs: Vec<&VariableSpec> = table.outputs().collect();
        let inputs = table
            .coarse_inputs()
            .zip(&self.inputs)
            .map(|(s, acc)| {
                if let Some(j) = out_specs.iter().position(|o| o.key() == s.key()) {
                    return Ok(outputs[j].clone());
                }
                match fixed(s) {
                    Some(st) => Ok(st),
                    None => acc.finish(&s.key(), mode),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let statics = table
            .statics()
            .zip(&self.statics)
            .map(|(s, acc)| acc.finish(&s.key(), NormMode::MinMax))
            .collect::<Result<Vec<_>>>()?;
        Ok(NormStats { inputs, statics, outputs })
    }
}

fn apply_channels(
    data: &mut [f32],
    stats: &[ChannelStats],
    plane: usize,
    role: &str,
    f: impl Fn(&ChannelStats, f32) -> f32,
) -> Result<()> {
    let per_item = stats.len() * plane;
    if plane == 0 || per_item == 0 || data.len() % per_item != 0 {
        return Err(Error::Data(format!(
            "{role} array of {} values does not match {} channel stats of plane {plane}",
            data.len(),
            stats.len()
        )));
    }
    for item in data.chunks_mut(per_item) {
        for (chunk, st) in item.chunks_mut(plane).zip(stats) {
            for v in chunk {
                *v = f(st, *v);
            }
        }
    }
    Ok(())
}

/// Which group of channels an array holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Input,
    Static,
    Output,
}

impl NormStats {
    pub fn check_covers(&self, table: &VariableTable) -> Result<()> {
        let check = |got: &[ChannelStats], specs: Vec<&VariableSpec>, role: &str| -> Result<()> {
            if got.len() != specs.len() {
                return Err(Error::Data(format!(
                    "{role} stats cover {} channels, table has {}",
                    got.len(),
                    specs.len()
                )));
            }
            for (st, sp) in got.iter().zip(specs) {
                if st.key != sp.key() {
                    return Err(Error::Data(format!(
                        "missing {role} stats for channel {} (found {})",
                        sp.key(),
                        st.key
                    )));
                }
                st.validate()?;
            }
            Ok(())
        };
        check(&self.inputs, table.coarse_inputs().collect(), "input")?;
        check(&self.statics, table.statics().collect(), "static")?;
        check(&self.outputs, table.outputs().collect(), "output")
    }

    pub fn channels(&self, role: Role) -> &[ChannelStats] {
        match role {
            Role::Input => &self.inputs,
            Role::Static => &self.statics,
            Role::Output => &self.outputs,
        }
    }

    /// Normalises a `[.., channels, rows, cols]` array in place; `plane` is rows*cols.
    pub fn normalize(&self, role: Role, data: &mut [f32], plane: usize) -> Result<()> {
        apply_channels(data, self.channels(role), plane, &format!("{role:?}"), |s, v| s.normalize(v))
    }

    pub fn denormalize(&self, role: Role, data: &mut [f32], plane: usize) -> Result<()> {
        apply_channels(data, self.channels(role), plane, &format!("{role:?}"), |s, v| s.denormalize(v))
    }
}
