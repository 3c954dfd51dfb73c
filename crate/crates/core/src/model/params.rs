use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::nn::ConvMaskKind;
use crate::tensor::Tensor;
use crate::SeedRng;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Glorot {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform on `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Normal(f64),
    /// Glorot over the active taps of an attention-map kernel; masked taps
    /// stay at zero.
    MapKernel(ConvMaskKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub(crate) fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    fn sample(&self, rng: &mut SeedRng) -> Tensor {
        let n: usize = self.shape.iter().product();
        let uniform = |rng: &mut SeedRng, a: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-a..a)).collect() };
        let data = match self.init {
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
            Init::Glorot { fan_in, fan_out } => uniform(rng, math::sqrt(6.0 / (fan_in + fan_out) as f64)),
            Init::FanIn(fan_in) => uniform(rng, math::sqrt(1.0 / fan_in as f64)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::MapKernel(kind) => {
                let heads = self.shape[0];
                let active = kind.taps().len();
                let a = math::sqrt(6.0 / (2 * heads * active) as f64);
                let mask = kind.tap_mask();
                let mut v = uniform(rng, a);
                for (i, w) in v.iter_mut().enumerate() {
                    *w *= mask[i % 9];
                }
                v
            }
        };
        Tensor::from_parts(self.shape.clone(), data)
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub(crate) fn init(specs: &[ParamSpec], rng: &mut SeedRng) -> Self {
        ParamSet {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tensors: specs.iter().map(|s| s.sample(rng)).collect(),
        }
    }

    pub fn from_pairs(pairs: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = pairs.into_iter().unzip();
        ParamSet { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor of `other` whose name exists here. Shapes must
    /// agree; all disagreements are listed in the error.
    pub fn copy_matching(&mut self, other: &ParamSet) -> Result<usize> {
        let mut mismatches = Vec::new();
        let mut copied = 0;
        for (name, src) in other.iter() {
            if let Some(dst) = self.get_mut(name) {
                if dst.shape() != src.shape() {
                    mismatches.push(format!("{name}: {:?} vs {:?}", dst.shape(), src.shape()));
                } else {
                    *dst = src.clone();
                    copied += 1;
                }
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::Config(format!(
                "architecture mismatch: {}",
                mismatches.join("; ")
            )));
        }
        Ok(copied)
    }

    pub(crate) fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut problems = Vec::new();
        for spec in specs {
            match self.get(&spec.name) {
                None => problems.push(format!("missing {}", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    problems.push(format!("{}: {:?} vs expected {:?}", spec.name, t.shape(), spec.shape))
                }
                Some(_) => {}
            }
        }
        for name in &self.names {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("architecture mismatch: {}", problems.join("; "))))
        }
    }

    pub(crate) fn reorder(self, specs: &[ParamSpec]) -> ParamSet {
        let mut pairs: Vec<Option<Tensor>> = self.tensors.into_iter().map(Some).collect();
        let names = self.names;
        let tensors = specs
            .iter()
            .map(|s| {
                let i = names.iter().position(|n| *n == s.name).unwrap();
                pairs[i].take().unwrap()
            })
            .collect();
        ParamSet {
            names: specs.iter().map(|s| s.name.to_string()).collect(),
            tensors,
        }
    }
}
