//! Named, seeded trainable parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// How an entry's initial values are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f64 },
    Zeros,
    Ones,
}

impl Init {
    /// The `±1/√fan_in` rule used for linear, attention and conv weights.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    fn fill<T: Scalar>(&self, n: usize, seed: u64) -> Vec<T> {
        match *self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform { bound } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect()
            }
        }
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer, used to combine seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct ParamEntry<T: Scalar> {
    pub tensor: Tensor<T>,
    pub init: Init,
    pub seed: u64,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

pub struct ParameterStore<T: Scalar> {
    entries: BTreeMap<String, ParamEntry<T>>,
    seed: u64,
    pub(crate) step: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
            seed,
            step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of optimizer steps taken.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Root scope seeded from the store seed.
    pub fn root(&mut self) -> Scope<'_, T> {
        let seed = self.seed;
        Scope {
            store: self,
            prefix: String::new(),
            local: String::new(),
            seed,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub(crate) fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    /// Redraws every entry from its recorded initializer and clears optimizer state.
    pub fn reinitialize(&mut self) {
        for e in self.entries.values_mut() {
            let vals = e.init.fill::<T>(e.tensor.numel(), e.seed);
            e.tensor.update_data(|d| d.copy_from_slice(&vals));
            e.tensor.zero_grad();
            e.m.iter_mut().for_each(|v| *v = T::zero());
            e.v.iter_mut().for_each(|v| *v = T::zero());
        }
        self.step = 0;
    }

    pub fn zero_grad(&self) {
        self.entries.values().for_each(|e| e.tensor.zero_grad());
    }

    /// L2 norm over all currently held gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|e| e.tensor.grad())
            .flat_map(|g| g.into_iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// All parameter values concatenated in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries.values().flat_map(|e| e.tensor.to_vec()).collect()
    }

    fn insert(&mut self, name: String, shape: &[usize], init: Init, seed: u64) -> Result<Tensor<T>> {
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let n = numel(shape);
        let tensor = Tensor::param(init.fill(n, seed), shape)?;
        self.entries.insert(
            name,
            ParamEntry {
                tensor: tensor.clone(),
                init,
                seed,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(tensor)
    }
}

/// Hierarchical naming context for registering parameters. Values depend on
/// the scope seed and the path *relative to the last seeded scope*, so two
/// sub-networks built under equal seeds start out identical.
pub struct Scope<'a, T: Scalar> {
    store: &'a mut ParameterStore<T>,
    prefix: String,
    local: String,
    seed: u64,
}

fn join(a: &str, b: &str) -> String {
    if a.is_empty() {
        b.to_string()
    } else {
        format!("{a}.{b}")
    }
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        Scope {
            prefix: join(&self.prefix, name),
            local: join(&self.local, name),
            seed: self.seed,
            store: self.store,
        }
    }

    /// A child scope whose initial values are keyed only on `seed`.
    pub fn seeded(&mut self, name: &str, seed: u64) -> Scope<'_, T> {
        Scope {
            prefix: join(&self.prefix, name),
            local: String::new(),
            seed,
            store: self.store,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        let entry_seed = mix_seed(self.seed, fnv1a(join(&self.local, name).as_bytes()));
        self.store.insert(join(&self.prefix, name), shape, init, entry_seed)
    }
}
