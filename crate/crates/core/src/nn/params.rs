use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is for. Running statistics are state, not trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::Gamma,
            "beta" => ParamKind::Beta,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named parameter and state storage for one model.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// FNV-1a, used to derive an independent init stream per parameter name.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter initialized from a stream keyed by
    /// `(seed, name)`, so a parameter's initial value does not depend on
    /// which other parameters exist.
    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
        seed: u64,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(config_err!("parameter `{name}` registered twice"));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
                Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(&mut rng)))
            }
        };
        Ok(self.insert(name.to_string(), kind, value))
    }

    pub(crate) fn insert(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, kind, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Replaces the value of `name`, which must already exist with the same shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| config_err!("unknown parameter `{name}`"))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "parameter `{name}`: shape {:?} does not match stored {:?}",
                value.shape(),
                slot.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every parameter of `other` whose name and shape exist here.
    /// Returns the number of copied tensors.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                let slot = &mut self.params[id.0];
                if slot.value.shape() == p.value.shape() && slot.kind == p.kind {
                    slot.value = p.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Order-sensitive FNV checksum over names and value bits of every
    /// tensor whose name starts with one of `prefixes`.
    pub fn checksum(&self, prefixes: &[&str]) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                feed(p.name.as_bytes());
                for v in p.value.data() {
                    feed(&v.as_f64().to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    prefix: String,
    seed: u64,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder {
            store,
            prefix: String::new(),
            seed,
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
            seed: self.seed,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind, init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.register(&full, shape, kind, init, self.seed)
    }
}

/// Gradients of trainable parameters, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Euclidean norm of the gradient of every parameter whose name starts with `prefix`.
    pub fn norms_under<'s>(
        &'s self,
        store: &'s ParamStore<T>,
        prefix: &'s str,
    ) -> impl Iterator<Item = (&'s str, f64)> + 's {
        store
            .iter()
            .filter(move |(_, p)| p.kind.trainable() && p.name.starts_with(prefix))
            .map(|(id, p)| (p.name.as_str(), self.get(id).map_or(0.0, Tensor::norm)))
    }
}
