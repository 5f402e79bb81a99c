//! Named trainable parameters.
//!
//! All parameters of a model live in one [`ParamStore`]; layers hold
//! [`ParamId`] handles. The store owns both values and the gradient buffers
//! the tape fills in during backward, which keeps optimizers and checkpoints
//! free of any graph machinery.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct Parameter<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    /// Weight decay never touches this parameter (loss-weight scalars).
    pub decay_exempt: bool,
    /// Optimizers skip frozen parameters.
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore<E: Element> {
    entries: Vec<Parameter<E>>,
    by_name: HashMap<String, ParamId>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<E>) -> ParamId {
        self.add_with(name, value, false)
    }

    pub fn add_with(&mut self, name: &str, value: Tensor<E>, decay_exempt: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            decay_exempt,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Parameters in definition order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(E::ZERO);
        }
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// (name, shape, element count) rows in definition order.
    pub fn summary(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.numel()))
            .collect()
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn check_grads_finite(&self) -> Result<()> {
        for p in &self.entries {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Weight initialization family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±sqrt(6/fan_in); for layers feeding a ReLU.
    FanIn,
    /// Uniform in ±sqrt(6/(fan_in+fan_out)); for gate and output layers.
    FanInOut,
}

/// Draw a weight tensor. `fan_in`/`fan_out` count input/output connections
/// (for conv: channels times kernel area). Biases are initialized to zero by
/// callers, not here.
pub fn init_weight<E: Element, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<E> {
    let bound = match init {
        Init::FanIn => (6.0 / fan_in as f64).sqrt(),
        Init::FanInOut => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape, data).expect("init shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Tensor<f32> = init_weight(vec![64, 32], 32, 64, Init::FanIn, &mut rng);
        let bound = (6.0f32 / 32.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));

        let g: Tensor<f32> = init_weight(vec![64, 32], 32, 64, Init::FanInOut, &mut rng);
        let bound = (6.0f32 / 96.0).sqrt();
        assert!(g.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn sample_mean_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Tensor<f64> = init_weight(vec![100, 100], 100, 100, Init::FanIn, &mut rng);
        let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn names_unique_and_ordered() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a.weight", Tensor::zeros(vec![2, 2]));
        let b = store.add("b.bias", Tensor::zeros(vec![2]));
        assert_eq!(store.lookup("a.weight"), Some(a));
        assert_eq!(store.lookup("b.bias"), Some(b));
        let names: Vec<_> = store.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(names, vec!["a.weight", "b.bias"]);
        assert_eq!(store.total_count(), 6);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_name_panics() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![1]));
        store.add("w", Tensor::zeros(vec![1]));
    }
}
