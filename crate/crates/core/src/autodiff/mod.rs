//! Reverse-mode differentiation over a per-pass tape.
//!
//! A [`Graph`] records one forward pass as an append-only list of nodes, so
//! topological order is just index order. Each node keeps its forward value;
//! backward rules receive the upstream gradient plus references to parent
//! values and return one partial per parent. Tapes are never shared between
//! concurrent passes.

mod fd;
mod param;

pub use fd::{fd_check, fd_check_sampled};
pub use param::{trunc_normal, Param, ParamId, ParamStore};

use crate::ops::{self, BinaryOp, UnaryOp};
use crate::spectral;
use crate::tensor::{Element, Tensor, TensorError, TensorResult};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Ctx<'a, T: Element> {
    g: &'a Tensor<T>,
    xs: &'a [&'a Tensor<T>],
}

type Rule<T> = Box<dyn Fn(&Ctx<'_, T>) -> TensorResult<Vec<Tensor<T>>> + Send>;

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<usize>,
    rule: Option<Rule<T>>,
}

/// One recorded forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(usize, ParamId)>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Element> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient at an arbitrary node; only populated by `backward_retain`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    /// Accumulates the parameter gradients into the store.
    pub fn apply_to(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<usize>, rule: Option<Rule<T>>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, vec![], None)
    }

    /// Trainable leaf bound to a parameter slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), vec![], None);
        self.bindings.push((v.0, id));
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = ops::binary(BinaryOp::Add, self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|c: &Ctx<T>| Ok(vec![c.g.clone(), c.g.clone()]))),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = ops::binary(BinaryOp::Sub, self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|c: &Ctx<T>| {
                Ok(vec![c.g.clone(), c.g.map(|v| v.neg())])
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = ops::binary(BinaryOp::Mul, self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|c: &Ctx<T>| {
                Ok(vec![
                    ops::binary(BinaryOp::Mul, c.g, c.xs[1])?,
                    ops::binary(BinaryOp::Mul, c.g, c.xs[0])?,
                ])
            })),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = ops::scale(self.value(x), c);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |ctx: &Ctx<T>| Ok(vec![ops::scale(ctx.g, c)]))),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = ops::add_scalar(self.value(x), c);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|ctx: &Ctx<T>| Ok(vec![ctx.g.clone()]))),
        )
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let out = ops::unary(op, self.value(x));
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |c: &Ctx<T>| {
                let d = ops::unary_grad(op, c.xs[0]);
                ops::binary(BinaryOp::Mul, c.g, &d).map(|t| vec![t])
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Softplus, x)
    }

    // ---- linear algebra ----

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> TensorResult<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(
            out,
            vec![x.0, w.0, b.0],
            Some(Box::new(|c: &Ctx<T>| {
                let (dx, dw, db) = ops::linear_backward(c.xs[0], c.xs[1], c.g);
                Ok(vec![dx, dw, db])
            })),
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> TensorResult<Var> {
        let out = ops::depthwise_conv2d(self.value(x), self.value(k), stride, pad)?;
        Ok(self.push(
            out,
            vec![x.0, k.0],
            Some(Box::new(move |c: &Ctx<T>| {
                let (dx, dk) = ops::depthwise_conv2d_backward(c.xs[0], c.xs[1], c.g, stride, pad);
                Ok(vec![dx, dk])
            })),
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> TensorResult<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), Some(self.value(b)), stride, pad)?;
        Ok(self.push(
            out,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |c: &Ctx<T>| {
                let (dx, dw, db) = ops::conv2d_backward(c.xs[0], c.xs[1], c.g, stride, pad);
                Ok(vec![dx, dw, db])
            })),
        ))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> TensorResult<Var> {
        let out = ops::add_channel_bias(self.value(x), self.value(b))?;
        Ok(self.push(
            out,
            vec![x.0, b.0],
            Some(Box::new(|c: &Ctx<T>| {
                let (bt, ch, h, w) = (c.xs[0].dim(0), c.xs[0].dim(1), c.xs[0].dim(2), c.xs[0].dim(3));
                let hw = h * w;
                let mut db = vec![T::ZERO; ch];
                let gd = c.g.data();
                for bi in 0..bt {
                    for (ci, dbv) in db.iter_mut().enumerate() {
                        for &gv in &gd[(bi * ch + ci) * hw..(bi * ch + ci + 1) * hw] {
                            *dbv = dbv.add(gv);
                        }
                    }
                }
                Ok(vec![c.g.clone(), Tensor::new(vec![ch], db)?])
            })),
        ))
    }

    // ---- normalization ----

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> TensorResult<Var> {
        let out = ops::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |c: &Ctx<T>| {
                let (dx, dg, db) = ops::layernorm_backward(c.xs[0], c.xs[1], c.g, eps);
                Ok(vec![dx, dg, db])
            })),
        ))
    }

    /// Batch-statistics normalization; also returns the batch mean/var so the
    /// caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> TensorResult<(Var, Tensor<T>, Tensor<T>)> {
        let (out, mean, var) =
            ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (mean_c, var_c) = (mean.clone(), var.clone());
        let v = self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |c: &Ctx<T>| {
                let (dx, dg, db) = ops::batchnorm_backward(c.xs[0], c.xs[1], &mean_c, &var_c, c.g, eps);
                Ok(vec![dx, dg, db])
            })),
        );
        Ok((v, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> TensorResult<Var> {
        let out = ops::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let (mean_c, var_c) = (mean.clone(), var.clone());
        Ok(self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |c: &Ctx<T>| {
                // fixed statistics: a per-channel affine map
                let (bt, ch, h, w) = (c.xs[0].dim(0), c.xs[0].dim(1), c.xs[0].dim(2), c.xs[0].dim(3));
                let hw = h * w;
                let gd = c.g.data();
                let xd = c.xs[0].data();
                let gad = c.xs[1].data();
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dgamma = vec![T::ZERO; ch];
                let mut dbeta = vec![T::ZERO; ch];
                for ci in 0..ch {
                    let inv = T::ONE.div(var_c.data()[ci].add(T::from_f64(eps)).sqrt());
                    let mu = mean_c.data()[ci];
                    let ga = gad[ci];
                    for bi in 0..bt {
                        let base = (bi * ch + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = gd[base + i].mul(ga).mul(inv);
                            let xhat = xd[base + i].sub(mu).mul(inv);
                            dgamma[ci] = dgamma[ci].add(gd[base + i].mul(xhat));
                            dbeta[ci] = dbeta[ci].add(gd[base + i]);
                        }
                    }
                }
                Ok(vec![
                    Tensor::new(c.xs[0].shape().to_vec(), dx)?,
                    Tensor::new(vec![ch], dgamma)?,
                    Tensor::new(vec![ch], dbeta)?,
                ])
            })),
        ))
    }

    // ---- shape plumbing ----

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> TensorResult<Var> {
        let out = self.value(x).permute(axes)?;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |c: &Ctx<T>| Ok(vec![c.g.permute(&inverse)?]))),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.value(x).reshape(shape)?;
        let orig = self.value(x).shape().to_vec();
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |c: &Ctx<T>| Ok(vec![c.g.reshape(&orig)?]))),
        ))
    }

    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let out = ops::narrow_last(self.value(x), start, len)?;
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |c: &Ctx<T>| {
                let full = *c.xs[0].shape().last().unwrap();
                let mut dx = Tensor::zeros(c.xs[0].shape());
                for (grow, drow) in c.g.data().chunks(len).zip(dx.data_mut().chunks_mut(full)) {
                    drow[start..start + len].copy_from_slice(grow);
                }
                Ok(vec![dx])
            })),
        ))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = ops::concat_last(self.value(a), self.value(b))?;
        let ca = *self.value(a).shape().last().unwrap();
        let cb = *self.value(b).shape().last().unwrap();
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |c: &Ctx<T>| {
                Ok(vec![
                    ops::narrow_last(c.g, 0, ca)?,
                    ops::narrow_last(c.g, ca, cb)?,
                ])
            })),
        ))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> TensorResult<Var> {
        let out = ops::mean_axes(self.value(x), axes)?;
        let in_shape = self.value(x).shape().to_vec();
        let axes = axes.to_vec();
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |c: &Ctx<T>| {
                Ok(vec![ops::mean_axes_backward(c.g, &in_shape, &axes)])
            })),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc = acc.add(v);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::scalar(acc),
            vec![x.0],
            Some(Box::new(move |c: &Ctx<T>| {
                Ok(vec![Tensor::full(&shape, c.g.item())])
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- spectral ----

    /// Orthonormal DCT over the last two axes; the adjoint is the inverse.
    pub fn dct2(&mut self, x: Var) -> TensorResult<Var> {
        let out = spectral::dct2(self.value(x))?;
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(|c: &Ctx<T>| Ok(vec![spectral::idct2(c.g)?]))),
        ))
    }

    pub fn idct2(&mut self, x: Var) -> TensorResult<Var> {
        let out = spectral::idct2(self.value(x))?;
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(|c: &Ctx<T>| Ok(vec![spectral::dct2(c.g)?]))),
        ))
    }

    pub fn mul_bcast_batch(&mut self, x: Var, m: Var) -> TensorResult<Var> {
        let out = ops::mul_bcast_batch(self.value(x), self.value(m))?;
        Ok(self.push(
            out,
            vec![x.0, m.0],
            Some(Box::new(|c: &Ctx<T>| {
                let dx = ops::mul_bcast_batch(c.g, c.xs[1])?;
                // dm = sum over batch of g .* x
                let chunk = c.xs[1].len();
                let mut dm = vec![T::ZERO; chunk];
                for (grow, xrow) in c.g.data().chunks(chunk).zip(c.xs[0].data().chunks(chunk)) {
                    for ((o, &gv), &xv) in dm.iter_mut().zip(grow).zip(xrow) {
                        *o = o.add(gv.mul(xv));
                    }
                }
                Ok(vec![dx, Tensor::new(c.xs[1].shape().to_vec(), dm)?])
            })),
        ))
    }

    /// Heat conduction step with gradient flow into both the field and the
    /// decay coefficients.
    pub fn hco(&mut self, x: Var, decay: Var) -> TensorResult<Var> {
        let freq = self.dct2(x)?;
        let damped = self.mul_bcast_batch(freq, decay)?;
        self.idct2(damped)
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> TensorResult<Var> {
        let out = ops::scale_rows(self.value(x), self.value(s))?;
        Ok(self.push(
            out,
            vec![x.0, s.0],
            Some(Box::new(|c: &Ctx<T>| {
                let dx = ops::scale_rows(c.g, c.xs[1])?;
                let cdim = c.xs[0].dim(1);
                let mut ds = vec![T::ZERO; c.xs[1].len()];
                for ((grow, xrow), o) in c
                    .g
                    .data()
                    .chunks(cdim)
                    .zip(c.xs[0].data().chunks(cdim))
                    .zip(ds.iter_mut())
                {
                    for (&gv, &xv) in grow.iter().zip(xrow) {
                        *o = o.add(gv.mul(xv));
                    }
                }
                Ok(vec![dx, Tensor::new(c.xs[1].shape().to_vec(), ds)?])
            })),
        ))
    }

    // ---- losses and routing ----

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let out = ops::softmax_last(self.value(x));
        let p = out.clone();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |c: &Ctx<T>| {
                Ok(vec![softmax_backward(&p, c.g, 1.0)])
            })),
        )
    }

    /// Mean softmax cross-entropy against one-hot targets; gradient w.r.t.
    /// the logits is exactly (probs - target) / B.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &Tensor<T>) -> TensorResult<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() || z.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                left: z.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let b = z.dim(0);
        let c = z.dim(1);
        let mut loss = 0.0f64;
        for (row, trow) in z.data().chunks(c).zip(targets.data().chunks(c)) {
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut lse = 0.0f64;
            let mut dot = 0.0f64;
            for (&v, &t) in row.iter().zip(trow) {
                lse += (v.sub(m)).to_f64().exp();
                dot += t.to_f64() * v.to_f64();
            }
            loss += m.to_f64() + lse.ln() - dot;
        }
        loss /= b as f64;
        let targets = targets.clone();
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            vec![logits.0],
            Some(Box::new(move |ctx: &Ctx<T>| {
                let p = ops::softmax_last(ctx.xs[0]);
                let scale = ctx.g.item().to_f64() / b as f64;
                let d = p
                    .zip_map(&targets, "ce_backward", |pv, tv| {
                        T::from_f64((pv.to_f64() - tv.to_f64()) * scale)
                    })
                    .unwrap();
                Ok(vec![d])
            })),
        ))
    }

    /// The per-class binary cross-entropy written over softmax scores,
    /// averaged over classes then over the batch. Logs are clamped at 1e-12.
    pub fn bce_literal_mean(&mut self, probs: Var, targets: &Tensor<T>) -> TensorResult<Var> {
        let p = self.value(probs);
        if p.shape() != targets.shape() || p.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bce_literal_mean",
                left: p.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let b = p.dim(0);
        let c = p.dim(1);
        let n = (b * c) as f64;
        let eps = 1e-12f64;
        let mut loss = 0.0f64;
        for (&pv, &tv) in p.data().iter().zip(targets.data()) {
            let pv = pv.to_f64();
            let tv = tv.to_f64();
            loss -= tv * pv.max(eps).ln() + (1.0 - tv) * (1.0 - pv).max(eps).ln();
        }
        loss /= n;
        let targets = targets.clone();
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            vec![probs.0],
            Some(Box::new(move |ctx: &Ctx<T>| {
                let scale = ctx.g.item().to_f64() / n;
                let d = ctx.xs[0]
                    .zip_map(&targets, "bce_backward", |pv, tv| {
                        let pv = pv.to_f64();
                        let tv = tv.to_f64();
                        T::from_f64(-scale * (tv / pv.max(eps) - (1.0 - tv) / (1.0 - pv).max(eps)))
                    })
                    .unwrap();
                Ok(vec![d])
            })),
        ))
    }

    /// Straight-through Gumbel-Softmax: the forward value is the one-hot
    /// argmax of (logits + noise) / tau, the backward rule uses the soft
    /// sample's Jacobian. `noise` must be pre-drawn Gumbel(0,1) values.
    pub fn gumbel_softmax_st(&mut self, logits: Var, tau: f64, noise: &Tensor<T>) -> TensorResult<Var> {
        if tau <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "gumbel_softmax_st",
                reason: format!("temperature must be positive, got {tau}"),
            });
        }
        let z = self.value(logits);
        if z.shape() != noise.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gumbel_softmax_st",
                left: z.shape().to_vec(),
                right: noise.shape().to_vec(),
            });
        }
        let perturbed = ops::binary(BinaryOp::Add, z, noise)?;
        let scaled = ops::scale(&perturbed, 1.0 / tau);
        let soft = ops::softmax_last(&scaled);
        let hard = row_onehot_argmax(&soft);
        Ok(self.push(
            hard,
            vec![logits.0],
            Some(Box::new(move |c: &Ctx<T>| {
                Ok(vec![softmax_backward(&soft, c.g, 1.0 / tau)])
            })),
        ))
    }

    /// Deterministic argmax one-hot; gradient is exactly zero.
    pub fn hard_onehot(&mut self, logits: Var) -> Var {
        let hard = row_onehot_argmax(self.value(logits));
        let in_shape = self.value(logits).shape().to_vec();
        self.push(
            hard,
            vec![logits.0],
            Some(Box::new(move |_c: &Ctx<T>| Ok(vec![Tensor::zeros(&in_shape)]))),
        )
    }

    // ---- backward ----

    /// Gradients of a scalar loss w.r.t. bound parameters. Node gradients are
    /// freed as soon as they are consumed.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients<T>> {
        self.run_backward(loss, false)
    }

    /// Like [`backward`](Self::backward) but retains the gradient at every
    /// node, for diagnostics and tests.
    pub fn backward_retain(&self, loss: Var) -> TensorResult<Gradients<T>> {
        self.run_backward(loss, true)
    }

    fn run_backward(&self, loss: Var, retain: bool) -> TensorResult<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                reason: "loss must be scalar".into(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut retained: Vec<Option<Tensor<T>>> = if retain {
            (0..n).map(|_| None).collect()
        } else {
            Vec::new()
        };
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));
        let mut param_grads: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let parent_vals: Vec<&Tensor<T>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parts = rule(&Ctx {
                    g: &g,
                    xs: &parent_vals,
                })?;
                debug_assert_eq!(parts.len(), node.parents.len());
                for (&p, part) in node.parents.iter().zip(parts) {
                    match &mut grads[p] {
                        Some(acc) => {
                            *acc = ops::binary(BinaryOp::Add, acc, &part)?;
                        }
                        slot @ None => *slot = Some(part),
                    }
                }
            }
            if retain {
                retained[i] = Some(g);
            } else if let Some(&(_, id)) = self.bindings.iter().find(|(node, _)| *node == i) {
                param_grads.push((id, g));
            }
        }
        if retain {
            for &(node, id) in &self.bindings {
                if let Some(g) = &retained[node] {
                    param_grads.push((id, g.clone()));
                }
            }
        }
        Ok(Gradients {
            by_node: retained,
            params: param_grads,
        })
    }
}

fn softmax_backward<T: Element>(p: &Tensor<T>, g: &Tensor<T>, scale: f64) -> Tensor<T> {
    let c = *p.shape().last().unwrap();
    let mut out = vec![T::ZERO; p.len()];
    for ((prow, grow), orow) in p
        .data()
        .chunks(c)
        .zip(g.data().chunks(c))
        .zip(out.chunks_mut(c))
    {
        let mut dot = T::ZERO;
        for (&pv, &gv) in prow.iter().zip(grow) {
            dot = dot.add(pv.mul(gv));
        }
        for ((&pv, &gv), o) in prow.iter().zip(grow).zip(orow.iter_mut()) {
            *o = pv.mul(gv.sub(dot)).mul(T::from_f64(scale));
        }
    }
    Tensor::new(p.shape().to_vec(), out).unwrap()
}

/// Row-wise one-hot at the argmax, ties toward the lowest index.
pub fn row_onehot_argmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().unwrap();
    let mut out = vec![T::ZERO; x.len()];
    for (row, orow) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        orow[best] = T::ONE;
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let loss = g.sum_all(xv);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::ones(&[3]), true);
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        assert!(g.backward(xv).is_err());
    }

    #[test]
    fn two_backward_passes_identical() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::from_fn(&[4], |i| 0.3 * i as f64 - 0.5), true);
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let s = g.sigmoid(xv);
        let m = g.mul(s, xv).unwrap();
        let loss = g.sum_all(m);
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert_eq!(g1.param(x).unwrap(), g2.param(x).unwrap());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*x + x) -> dloss/dx = 2x + 1
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.add(sq, xv).unwrap();
        let loss = g.sum_all(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn hard_onehot_gradient_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::new(vec![1, 3], vec![0.1, 0.3, 0.2]).unwrap(), true);
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let oh = g.hard_onehot(xv);
        assert_eq!(g.value(oh).data(), &[0.0, 1.0, 0.0]);
        let loss = g.sum_all(oh);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(x).unwrap().max_abs(), 0.0);
    }
}
