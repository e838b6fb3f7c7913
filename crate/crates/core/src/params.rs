//! Named model parameters.

use std::collections::HashMap;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Seed used when a caller does not pick one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-a, a)` with `a = sqrt(1 / fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered collection of uniquely named parameters.
///
/// Registration order is stable for a given model configuration, so
/// iteration order, checkpoints and parameter counts are reproducible.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    seed: u64,
}

/// Graph variables for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bindings {
    /// Wraps graph variables that stand for a store's parameters, in
    /// registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// 64-bit FNV-1a, used to derive a per-parameter RNG stream from its name.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn init_tensor<T: Scalar>(shape: Shape, init: Init, seed: u64, name: &str) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Const(v) => Tensor::full(shape, T::of(v)),
        Init::Uniform { fan_in } => {
            let a = (1.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
            // Drawn in f64 so both precisions start from the same values.
            Tensor::<f64>::rand_uniform(shape, -a, a, &mut rng).cast()
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Each parameter draws from its own RNG stream
    /// keyed by `(seed, name)`, so adding or removing other parameters does
    /// not change its initial value.
    pub fn add(&mut self, name: &str, shape: Shape, init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let value = init_tensor(shape, init, self.seed, name);
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        Bindings {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    /// Adds every parameter to `g` as a constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bindings {
        Bindings {
            vars: self.params.iter().map(|p| g.input(p.value.clone())).collect(),
        }
    }

    /// Adds the gradients of a backward sweep into each parameter's
    /// accumulator. Parameters the loss does not reach receive zeros.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.vars) {
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = grads.get(v) {
                acc.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.sum_squares().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Same parameters converted to another precision (gradients dropped).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
        }
    }
}
