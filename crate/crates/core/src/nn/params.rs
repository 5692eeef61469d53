//! Named parameter storage shared by all models.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Values plus non-trainable buffers (running statistics, queues), addressed
/// by unique names so checkpoints can round-trip by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    trainable: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.insert(name, value, true)
    }

    /// Non-trainable state updated outside the graph (running stats, queues).
    pub fn add_buffer(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Total element count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.len())
            .sum()
    }

    /// Replace a value by name, e.g. when restoring a checkpoint. The shape
    /// must match the registered parameter.
    pub fn set_by_name(&mut self, name: &str, value: ArrayD<f64>) -> crate::Result<()> {
        let idx = *self.by_name.get(name).ok_or_else(|| {
            crate::Error::Checkpoint(format!("unknown parameter `{name}`"))
        })?;
        if self.values[idx].shape() != value.shape() {
            return Err(crate::Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint provides {:?}",
                self.values[idx].shape(),
                value.shape()
            )));
        }
        self.values[idx] = value;
        Ok(())
    }
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

pub fn normal(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// He initialization for layers followed by a ReLU-family nonlinearity.
pub fn kaiming_normal(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn xavier_uniform(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
}
