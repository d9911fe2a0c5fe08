use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Xavier-uniform `[fan_in, fan_out]` weight matrix.
    pub fn insert_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| F::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_full(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: F,
    ) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds `grads` into each tensor's gradient buffer. Repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients<F>) -> Result<()> {
        for (t, g) in self.tensors.iter_mut().zip(&grads.by_param) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub(crate) by_param: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Gradients {
            by_param: store.tensors.iter().map(|t| Some(vec![F::zero(); t.len()])).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, zeros when the parameter was unreachable from the loss.
    pub fn get_or_zeros(&self, id: ParamId, len: usize) -> Vec<F> {
        self.get(id)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); len])
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.by_param.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn global_norm(&self) -> F {
        self.by_param
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| *v * *v)
            .sum::<F>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&[F]>)> {
        self.by_param
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_deref()))
    }
}
