use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named trainable tensors plus their gradient buffers.
///
/// Gradients are written by [`Graph::backward_into`](super::Graph::backward_into) once per backward pass
/// and must be cleared with [`ParamStore::zero_grad`] before the next one.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    grads_pending: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std) initialised parameter.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grads_pending(&self) -> bool {
        self.grads_pending
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_pending = false;
    }

    pub(crate) fn begin_accumulate(&mut self) -> Result<()> {
        if self.grads_pending {
            return Err(Error::Autodiff(
                "gradients from a previous backward pass were not reset; call zero_grad first"
                    .into(),
            ));
        }
        self.grads_pending = true;
        Ok(())
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every parameter to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Copies values from `other` for every parameter with a matching name and shape.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut loaded = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.value(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    loaded += 1;
                }
            }
        }
        loaded
    }
}
