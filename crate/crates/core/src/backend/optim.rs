use super::graph::Grads;
use super::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor together with its gradient buffer and ADAM moments.
#[derive(Clone, Debug)]
pub struct Parameter<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Float> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let n = value.numel();
        Parameter {
            name,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Number of optimizer steps applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float> {
    params: Vec<Parameter<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Adds the gradients from one backward pass into the parameter buffers.
    /// Gradients from repeated calls accumulate until [`Self::zero_grad`].
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// Bias-corrected ADAM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one update to every parameter and clears the gradients.
    pub fn step<T: Float>(&self, store: &mut ParamStore<T>) {
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let eps = T::lit(self.eps);
        for p in &mut store.params {
            p.step += 1;
            let t = p.step as i32;
            let lr_t = T::lit(self.lr / (1.0 - self.beta1.powi(t)));
            let bc2 = T::lit(1.0 - self.beta2.powi(t)).sqrt();
            let values = p.value.data_mut();
            for (((x, g), m), v) in values.iter_mut().zip(&mut p.grad).zip(&mut p.m).zip(&mut p.v) {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                *x -= lr_t * *m / (v.sqrt() / bc2 + eps);
                *g = T::zero();
            }
        }
    }
}
