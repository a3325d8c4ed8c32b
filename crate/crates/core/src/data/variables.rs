use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "hpa")]
pub enum Level {
    Surface,
    Height10m,
    Height2m,
    Pressure(u32),
    Integrated,
    Static,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Surface => write!(f, "surface"),
            Level::Height10m => write!(f, "10m"),
            Level::Height2m => write!(f, "2m"),
            Level::Pressure(p) => write!(f, "{p}hPa"),
            Level::Integrated => write!(f, "integrated"),
            Level::Static => write!(f, "static"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub level: Level,
    pub in_input: bool,
    pub in_output: bool,
    /// Coarse-input channel index carrying the same variable and level.
    pub residual_pair: Option<usize>,
    /// Fixed physical normalisation range, used instead of fitted statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_range: Option<[f64; 2]>,
}

impl VariableSpec {
    pub fn key(&self) -> String {
        format!("{}@{}", self.name, self.level)
    }

    fn is_static(&self) -> bool {
        self.level == Level::Static
    }
}

/// Ordered channel catalogue. Coarse inputs, static inputs and outputs are each
/// numbered in table order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableTable {
    specs: Vec<VariableSpec>,
}

impl VariableTable {
    /// Builds a table from specs whose `residual_pair` is derived here: a
    /// non-static variable flagged as both input and output is paired with its
    /// own coarse-input channel.
    pub fn new(mut specs: Vec<VariableSpec>) -> Result<Self> {
        let mut next_input = 0;
        for s in &mut specs {
            if s.is_static() && s.in_output {
                return Err(Error::Config(format!("static variable {} cannot be an output", s.key())));
            }
            if !s.in_input && !s.in_output {
                return Err(Error::Config(format!("variable {} is neither input nor output", s.key())));
            }
            s.residual_pair = None;
            if s.in_input && !s.is_static() {
                if s.in_output {
                    s.residual_pair = Some(next_input);
                }
                next_input += 1;
            }
        }
        let table = Self { specs };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut next_input = 0;
        for s in &self.specs {
            if !seen.insert(s.key()) {
                return Err(Error::Config(format!("duplicate variable {}", s.key())));
            }
            if s.is_static() && s.in_output {
                return Err(Error::Config(format!("static variable {} cannot be an output", s.key())));
            }
            let expected = (s.in_input && s.in_output && !s.is_static()).then_some(next_input);
            if s.residual_pair != expected {
                return Err(Error::Config(format!(
                    "variable {} has residual pair {:?}, expected {expected:?}",
                    s.key(),
                    s.residual_pair
                )));
            }
            if s.in_input && !s.is_static() {
                next_input += 1;
            }
        }
        if self.c_out() == 0 {
            return Err(Error::Config("channel plan has no outputs".into()));
        }
        if self.n_coarse_inputs() == 0 {
            return Err(Error::Config("channel plan has no coarse inputs".into()));
        }
        Ok(())
    }

    pub fn specs(&self) -> &[VariableSpec] {
        &self.specs
    }

    /// Number of input-flagged variables, static fields included.
    pub fn c_in(&self) -> usize {
        self.specs.iter().filter(|s| s.in_input).count()
    }

    pub fn c_out(&self) -> usize {
        self.specs.iter().filter(|s| s.in_output).count()
    }

    pub fn n_static(&self) -> usize {
        self.specs.iter().filter(|s| s.is_static()).count()
    }

    pub fn n_coarse_inputs(&self) -> usize {
        self.c_in() - self.n_static()
    }

    pub fn coarse_inputs(&self) -> impl Iterator<Item = &VariableSpec> {
        self.specs.iter().filter(|s| s.in_input && !s.is_static())
    }

    pub fn statics(&self) -> impl Iterator<Item = &VariableSpec> {
        self.specs.iter().filter(|s| s.is_static())
    }

    pub fn outputs(&self) -> impl Iterator<Item = &VariableSpec> {
        self.specs.iter().filter(|s| s.in_output)
    }

    /// For each output channel, the coarse-input channel it is a residual of.
    pub fn output_pairs(&self) -> Vec<Option<usize>> {
        self.outputs().map(|s| s.residual_pair).collect()
    }

    /// Stable content hash of the channel plan.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serialisable");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Both,
    InputOnly,
    OutputOnly,
}

fn push(specs: &mut Vec<VariableSpec>, name: &str, level: Level, role: Role) {
    let (in_input, in_output) = match role {
        Role::Both => (true, true),
        Role::InputOnly => (true, false),
        Role::OutputOnly => (false, true),
    };
    specs.push(VariableSpec { name: name.into(), level, in_input, in_output, residual_pair: None, fixed_range: None });
}

/// Input/output channel sets for the four variable combinations used with the
/// operational 3 km model.
pub fn build_channel_plan(combination: u8) -> Result<VariableTable> {
    const ALL: [u32; 6] = [100, 200, 500, 700, 850, 925];
    const LOW: [u32; 4] = [500, 700, 850, 925];
    let (in_levels, out_levels, column_vars, orography, radar): (&[u32], &[u32], bool, bool, bool) = match combination {
        1 => (&ALL, &ALL, true, false, false),
        2 => (&LOW, &LOW, true, true, true),
        3 => (&ALL, &LOW, true, true, false),
        4 => (&ALL, &LOW, false, true, false),
        other => return Err(Error::Config(format!("unknown variable combination {other}; expected 1-4"))),
    };
    let mut specs = Vec::new();
    let profile = |specs: &mut Vec<VariableSpec>, name: &str, near_surface: Option<Level>| {
        if let Some(l) = near_surface {
            push(specs, name, l, Role::Both);
        }
        for &p in in_levels {
            let role = if out_levels.contains(&p) { Role::Both } else { Role::InputOnly };
            push(specs, name, Level::Pressure(p), role);
        }
    };
    profile(&mut specs, "u", Some(Level::Height10m));
    profile(&mut specs, "v", Some(Level::Height10m));
    profile(&mut specs, "z", None);
    profile(&mut specs, "t", Some(Level::Height2m));
    profile(&mut specs, "q", None);
    if column_vars {
        push(&mut specs, "tcwv", Level::Integrated, Role::Both);
    }
    push(&mut specs, "msl", Level::Surface, Role::Both);
    if column_vars {
        push(&mut specs, "sp", Level::Surface, Role::Both);
    }
    if orography {
        push(&mut specs, "orography", Level::Static, Role::InputOnly);
    }
    if radar {
        push(&mut specs, "radar", Level::Surface, Role::OutputOnly);
        specs.last_mut().unwrap().fixed_range = Some(RADAR_RANGE_DBZ);
    }
    VariableTable::new(specs)
}

/// Physical range used to normalise composite reflectivity.
pub const RADAR_RANGE_DBZ: [f64; 2] = [0.0, 75.0];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_counts() {
        let expected = [(1, 36, 36), (2, 27, 27), (3, 37, 26), (4, 35, 24)];
        for (id, c_in, c_out) in expected {
            let t = build_channel_plan(id).unwrap();
            assert_eq!((t.c_in(), t.c_out()), (c_in, c_out), "combination {id}");
        }
        assert!(build_channel_plan(0).is_err());
        assert!(build_channel_plan(5).is_err());
    }

    #[test]
    fn combination_two_radar_and_orography() {
        let t = build_channel_plan(2).unwrap();
        let radar = t.specs().iter().find(|s| s.name == "radar").unwrap();
        assert!(radar.in_output && !radar.in_input);
        assert_eq!(radar.residual_pair, None);
        assert_eq!(radar.fixed_range, Some([0.0, 75.0]));
        let oro = t.specs().iter().find(|s| s.name == "orography").unwrap();
        assert!(oro.in_input && !oro.in_output);
        assert_eq!(t.n_static(), 1);
    }

    #[test]
    fn pairs_point_at_matching_inputs() {
        for id in 1..=4 {
            let t = build_channel_plan(id).unwrap();
            let inputs: Vec<String> = t.coarse_inputs().map(VariableSpec::key).collect();
            for out in t.outputs() {
                match out.residual_pair {
                    Some(u) => assert_eq!(inputs[u], out.key()),
                    None => assert!(!inputs.contains(&out.key())),
                }
            }
        }
        // Upper levels are input-only in combination 4.
        let t = build_channel_plan(4).unwrap();
        let u100 = t.specs().iter().find(|s| s.key() == "u@100hPa").unwrap();
        assert!(u100.in_input && !u100.in_output);
    }

    #[test]
    fn tampered_pairing_is_rejected() {
        let t = build_channel_plan(4).unwrap();
        let mut specs = t.specs().to_vec();
        specs[0].residual_pair = Some(3);
        let bad = VariableTable { specs };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn order_survives_json() {
        let t = build_channel_plan(3).unwrap();
        let back: VariableTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.hash(), t.hash());
    }
}
