//! Named parameter storage shared by the model, optimizer, and checkpoints.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ops::BinaryOp;
use crate::tensor::{Element, Tensor};

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One parameter slot: value, accumulated gradient, and a trainable flag.
/// Non-trainable slots hold buffers such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values held by trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        p.grad = crate::ops::binary(BinaryOp::Add, &p.grad, g).expect("gradient shape mismatch");
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Plain SGD with decoupled-style weight decay folded into the gradient:
    /// p <- p - lr * (grad + wd * p). Gradients are zeroed afterwards.
    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) {
        let lr = T::from_f64(lr);
        let wd = T::from_f64(weight_decay);
        for p in &mut self.params {
            if p.trainable {
                let data = p.value.data_mut();
                for (v, g) in data.iter_mut().zip(p.grad.data()) {
                    *v = v.sub(lr.mul(g.add(wd.mul(*v))));
                }
            }
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Euclidean norm over all trainable gradients, for diagnostics.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let n = p.grad.l2_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Casts every parameter to another precision, keeping names and flags.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Truncated normal sample: N(0, std), redrawn while |x| > 2*std.
pub fn trunc_normal<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let mut draw = || loop {
        // Box-Muller on uniforms from the seeded stream
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std;
        if z.abs() <= 2.0 * std {
            return z;
        }
    };
    Tensor::from_fn(shape, |_| T::from_f64(draw()))
}
