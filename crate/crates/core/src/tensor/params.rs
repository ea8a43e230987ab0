use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset of the first scalar in the flat buffer.
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Uniform(f64),
}

/// Named parameter tensors stored back to back in one flat buffer, in
/// declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, rng: &mut R) -> ParamId {
        let offset = self.data.len();
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat(0.0).take(n)),
            Init::Ones => self.data.extend(std::iter::repeat(1.0).take(n)),
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                self.data.extend((0..n).map(|_| rng.gen_range(-bound..=bound)));
            }
            Init::Uniform(bound) => self.data.extend((0..n).map(|_| rng.gen_range(-bound..=bound))),
        }
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            offset,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let spec = self.spec(id);
        Tensor::new(spec.shape.clone(), self.data[spec.range()].to_vec()).expect("spec shape")
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.data[self.spec(id).range()]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let range = self.spec(id).range();
        &mut self.data[range]
    }

    /// Replaces the whole flat buffer; the length must not change.
    pub fn load(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape(format!(
                "parameter buffer of {} values cannot replace {}",
                data.len(),
                self.data.len()
            )));
        }
        self.data.copy_from_slice(data);
        Ok(())
    }
}
