//! Named parameter storage and initialization.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named collection of every learnable tensor of a model.
///
/// Insertion order is the serialization order, so two models built from the
/// same configuration always list their tensors identically.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Parameter {
                name,
                msg: "duplicate parameter name".into(),
            });
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ModelParams) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Same names and shapes, every value zero.
    pub fn zeroed(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(k.clone(), v.clone())))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `expected`.
    pub fn check_layout(&self, expected: &ModelParams) -> Result<()> {
        for (name, want) in expected.iter() {
            match self.get(name) {
                None => {
                    return Err(Error::Parameter {
                        name: name.into(),
                        msg: "missing from checkpoint".into(),
                    })
                }
                Some(got) if got.shape() != want.shape() => {
                    return Err(Error::Parameter {
                        name: name.into(),
                        msg: format!("shape {:?}, model expects {:?}", got.shape(), want.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.names().find(|n| !expected.contains(n)) {
            return Err(Error::Parameter {
                name: extra.into(),
                msg: "not part of the configured model".into(),
            });
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter {
                name: name.into(),
                msg: "not bound in this graph".into(),
            })
    }
}

/// Seeded He-normal initializer: weights ~ N(0, 2 / fan_in), biases zero.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn he(&mut self, shape: &[usize]) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        Tensor::from_fn(shape, |_| normal.sample(&mut self.rng))
    }

    /// Adds `<prefix>.weight` and `<prefix>.bias`.
    pub fn layer(
        &mut self,
        params: &mut ModelParams,
        prefix: &str,
        weight_shape: &[usize],
    ) -> Result<()> {
        params.insert(format!("{prefix}.weight"), self.he(weight_shape))?;
        params.insert(format!("{prefix}.bias"), Tensor::zeros(&weight_shape[..1]))
    }
}
