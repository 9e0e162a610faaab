//! Named parameter storage with learning-rate groups and running state.

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

/// Handle to one entry of a [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// The shared coarse-stage backbone (embedding, transformer, coarse head).
    Backbone,
    /// Everything else: stage embeddings, encoders, decoders, refiners.
    Other,
}

#[derive(Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: ArrayD<T>,
    pub group: Group,
    /// Trainable entries receive optimizer updates; state entries (running
    /// normalization statistics) are only written by forward passes.
    pub trainable: bool,
}

/// Deterministic, insertion-ordered parameter store. Construction order is a
/// pure function of the model configuration, so ids line up across processes
/// and checkpoints can address entries by name.
#[derive(Clone)]
pub struct ParamRegistry<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
    rng: ChaCha12Rng,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new(seed: u64) -> Self {
        ParamRegistry {
            entries: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    fn insert(&mut self, name: String, value: ArrayD<T>, group: Group, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            trainable,
        });
        id
    }

    /// Truncated normal (std 0.02, clipped at two standard deviations).
    pub fn trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], group: Group) -> ParamId {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::cast(0.02 * self.sample_standard_trunc()));
        }
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        self.insert(name.into(), value, group, true)
    }

    fn sample_standard_trunc(&mut self) -> f64 {
        // Box-Muller with rejection outside two standard deviations.
        loop {
            let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = self.rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], group: Group) -> ParamId {
        self.insert(name.into(), ArrayD::zeros(IxDyn(shape)), group, true)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize], group: Group) -> ParamId {
        self.insert(name.into(), ArrayD::ones(IxDyn(shape)), group, true)
    }

    /// Non-trainable state (running mean starts at 0, running var at 1).
    pub fn state(&mut self, name: impl Into<String>, value: ArrayD<T>, group: Group) -> ParamId {
        self.insert(name.into(), value, group, false)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalars across trainable entries.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}
