use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors plus non-trainable buffers (running statistics,
/// singular-vector estimates). Insertion order is the serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

/// Graph handles for every parameter of one store, valid for a single graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Index of a buffer inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn named_buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffer_names.iter().map(String::as_str).zip(&self.buffers)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_names.iter().position(|n| n == name).map(BufferId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Records every parameter as a trainable leaf on `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|t| graph.leaf(t.clone())).collect() }
    }

    /// Records every parameter as a constant (inference, or frozen networks).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|t| graph.constant(t.clone())).collect() }
    }

    /// Gradients for every parameter in store order; parameters the loss
    /// does not reach get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, bound: &Bound) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros = |s: &ParamStore| s.values.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { beta1, beta2, eps, step: 0, first: zeros(store), second: zeros(store) }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f32) {
        assert_eq!(grads.len(), store.values.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, g) in grads.iter().enumerate() {
            let w = store.values[i].data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                w[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + self.eps);
            }
        }
    }
}

/// He-uniform initialisation for a weight with `fan_in` inputs per output.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Glorot-uniform initialisation.
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-bound..bound)).collect())
}
