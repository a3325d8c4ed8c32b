use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::store::{read_f32_blob, write_f32_blob};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Names are layer paths such as `enc.1.res.conv1.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Shapes keyed by name, used to validate a checkpoint against a model.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    /// The same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }
}

impl ParamStore<f32> {
    /// Writes one float32-le blob per parameter, named by layer path.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.iter() {
            write_f32_blob(&dir.join(format!("{name}.bin")), t.data())?;
        }
        Ok(())
    }

    /// Overwrites every parameter with the blob of the same name in `dir`.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.values.iter_mut()) {
            let path = dir.join(format!("{name}.bin"));
            let data = read_f32_blob(&path, t.numel())?;
            *t = Tensor::new(t.shape(), data)?;
        }
        Ok(())
    }
}
