//! Adaptive fusion of the two pooled modality features.
//!
//! Three strategies produce a 2C-wide fused vector: plain concatenation,
//! concatenation after removing the elementwise common component, and a
//! gated concatenation with learned per-modality weights. A small policy MLP
//! scores the three options per sample; training samples a one-hot route via
//! straight-through Gumbel-Softmax, inference takes the argmax and runs only
//! the selected strategy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{trunc_normal, Graph, ParamId, ParamStore, Var};
use crate::model::INIT_STD;
use crate::ops;
use crate::tensor::{Element, Tensor, TensorError, TensorResult};

pub const STRATEGIES: usize = 3;
pub const DEFAULT_TAU: f64 = 1.0;

/// Which fusion path feeds the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Policy-routed selection among the three strategies.
    Route,
    /// Complementary concatenation only.
    Mcf,
    /// Discriminative (common-feature removal) only.
    Mdf,
    /// Gated per-modality weighting only.
    Msf,
    /// Uniform random strategy per sample (the ablation baseline).
    Random,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "route" => Some(FusionMode::Route),
            "mcf" => Some(FusionMode::Mcf),
            "mdf" => Some(FusionMode::Mdf),
            "msf" => Some(FusionMode::Msf),
            "random" => Some(FusionMode::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Route => "route",
            FusionMode::Mcf => "mcf",
            FusionMode::Mdf => "mdf",
            FusionMode::Msf => "msf",
            FusionMode::Random => "random",
        }
    }
}

/// How the route is materialized during a training forward pass.
pub enum RoutePlan<T: Element> {
    /// Straight-through Gumbel-Softmax with pre-drawn noise [B,3].
    Gumbel { noise: Tensor<T>, tau: f64 },
    /// Fully soft routing (no straight-through); used by gradient checks.
    Soft { noise: Tensor<T>, tau: f64 },
    /// Deterministic argmax one-hot (inference-mode wiring).
    Argmax,
    /// A fixed strategy for every sample.
    Fixed(usize),
    /// Pre-drawn per-sample strategy choices.
    Random(Vec<usize>),
}

/// Draws Gumbel(0,1) noise: -ln(-ln u).
pub fn gumbel_noise<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.random::<f64>().max(1e-300);
        T::from_f64(-(-u.ln()).ln())
    })
}

/// Policy-router and gated-fusion parameters.
pub struct FusionParams {
    pub feature_dim: usize,
    policy_fc1_w: ParamId,
    policy_fc1_b: ParamId,
    policy_fc2_w: ParamId,
    policy_fc2_b: ParamId,
    msf_w: ParamId,
    msf_b: ParamId,
    per_channel_msf: bool,
}

/// Inference-time fusion outcome for a batch.
#[derive(Debug, Clone)]
pub struct FusionBundle<T: Element> {
    pub feat_rgb: Tensor<T>,
    pub feat_event: Tensor<T>,
    pub fused: Tensor<T>,
    /// One-hot route per sample, [B,3].
    pub route: Tensor<T>,
    pub route_logits: Tensor<T>,
}

impl<T: Element> FusionBundle<T> {
    /// Counts of samples routed to each strategy.
    pub fn histogram(&self) -> [usize; STRATEGIES] {
        let mut h = [0usize; STRATEGIES];
        for row in self.route.data().chunks(STRATEGIES) {
            for (i, &v) in row.iter().enumerate() {
                if v.to_f64() > 0.5 {
                    h[i] += 1;
                }
            }
        }
        h
    }
}

impl FusionParams {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        feature_dim: usize,
        per_channel_msf: bool,
    ) -> Self {
        let c2 = 2 * feature_dim;
        let msf_out = if per_channel_msf { c2 } else { 2 };
        FusionParams {
            feature_dim,
            policy_fc1_w: store.add_param("fusion.policy.fc1.w", trunc_normal(rng, &[c2, c2], INIT_STD), true),
            policy_fc1_b: store.add_param("fusion.policy.fc1.b", Tensor::zeros(&[c2]), true),
            policy_fc2_w: store.add_param(
                "fusion.policy.fc2.w",
                trunc_normal(rng, &[c2, STRATEGIES], INIT_STD),
                true,
            ),
            policy_fc2_b: store.add_param("fusion.policy.fc2.b", Tensor::zeros(&[STRATEGIES]), true),
            msf_w: store.add_param("fusion.msf.w", trunc_normal(rng, &[c2, msf_out], INIT_STD), true),
            msf_b: store.add_param("fusion.msf.b", Tensor::zeros(&[msf_out]), true),
            per_channel_msf,
        }
    }

    // ---- graph (training) path ----

    /// Complementary fusion: concat(F_R, F_E).
    pub fn mcf<T: Element>(&self, g: &mut Graph<T>, fr: Var, fe: Var) -> TensorResult<Var> {
        g.concat_last(fr, fe)
    }

    /// Discriminative fusion: concat(F_R - F_R*F_E, F_E - F_R*F_E).
    pub fn mdf<T: Element>(&self, g: &mut Graph<T>, fr: Var, fe: Var) -> TensorResult<Var> {
        let common = g.mul(fr, fe)?;
        let r = g.sub(fr, common)?;
        let e = g.sub(fe, common)?;
        g.concat_last(r, e)
    }

    /// Gated fusion: concat(w_R*F_R, w_E*F_E) with sigmoid weights predicted
    /// from the concatenated features.
    pub fn msf<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fr: Var,
        fe: Var,
    ) -> TensorResult<Var> {
        let cat = g.concat_last(fr, fe)?;
        let w = g.param(store, self.msf_w);
        let b = g.param(store, self.msf_b);
        let logits = g.linear(cat, w, b)?;
        let gates = g.sigmoid(logits);
        let batch = g.value(fr).dim(0);
        if self.per_channel_msf {
            let c = self.feature_dim;
            let wr = g.narrow_last(gates, 0, c)?;
            let we = g.narrow_last(gates, c, c)?;
            let r = g.mul(wr, fr)?;
            let e = g.mul(we, fe)?;
            g.concat_last(r, e)
        } else {
            let wr = g.narrow_last(gates, 0, 1)?;
            let wr = g.reshape(wr, &[batch])?;
            let we = g.narrow_last(gates, 1, 1)?;
            let we = g.reshape(we, &[batch])?;
            let r = g.scale_rows(fr, wr)?;
            let e = g.scale_rows(fe, we)?;
            g.concat_last(r, e)
        }
    }

    fn policy_logits<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fr: Var,
        fe: Var,
    ) -> TensorResult<Var> {
        let cat = g.concat_last(fr, fe)?;
        let w1 = g.param(store, self.policy_fc1_w);
        let b1 = g.param(store, self.policy_fc1_b);
        let h = g.linear(cat, w1, b1)?;
        let h = g.gelu(h);
        let w2 = g.param(store, self.policy_fc2_w);
        let b2 = g.param(store, self.policy_fc2_b);
        g.linear(h, w2, b2)
    }

    /// Routes and fuses inside the graph. Returns (fused, route, logits);
    /// `route` is one-hot except under `RoutePlan::Soft`.
    pub fn route<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fr: Var,
        fe: Var,
        plan: &RoutePlan<T>,
    ) -> TensorResult<(Var, Var, Var)> {
        if g.value(fr).shape() != g.value(fe).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "route",
                left: g.value(fr).shape().to_vec(),
                right: g.value(fe).shape().to_vec(),
            });
        }
        let batch = g.value(fr).dim(0);
        let logits = self.policy_logits(g, store, fr, fe)?;
        if let RoutePlan::Fixed(i) = plan {
            if *i >= STRATEGIES {
                return Err(TensorError::InvalidArgument {
                    op: "route",
                    reason: format!("strategy index {i} out of range"),
                });
            }
            let mut route = Tensor::zeros(&[batch, STRATEGIES]);
            for b in 0..batch {
                route.data_mut()[b * STRATEGIES + i] = T::ONE;
            }
            let fused = match i {
                0 => self.mcf(g, fr, fe)?,
                1 => self.mdf(g, fr, fe)?,
                _ => self.msf(g, store, fr, fe)?,
            };
            let route = g.leaf(route);
            return Ok((fused, route, logits));
        }
        let route = match plan {
            RoutePlan::Gumbel { noise, tau } => g.gumbel_softmax_st(logits, *tau, noise)?,
            RoutePlan::Soft { noise, tau } => {
                let z = g.leaf(noise.clone());
                let z = g.add(logits, z)?;
                let z = g.scale(z, 1.0 / tau);
                g.softmax_last(z)
            }
            RoutePlan::Argmax => g.hard_onehot(logits),
            RoutePlan::Random(choices) => {
                if choices.len() != batch {
                    return Err(TensorError::InvalidArgument {
                        op: "route",
                        reason: format!("{} choices for batch {batch}", choices.len()),
                    });
                }
                let mut route = Tensor::zeros(&[batch, STRATEGIES]);
                for (b, &c) in choices.iter().enumerate() {
                    route.data_mut()[b * STRATEGIES + c % STRATEGIES] = T::ONE;
                }
                g.leaf(route)
            }
            RoutePlan::Fixed(_) => unreachable!(),
        };
        let f1 = self.mcf(g, fr, fe)?;
        let f2 = self.mdf(g, fr, fe)?;
        let f3 = self.msf(g, store, fr, fe)?;
        let mut fused: Option<Var> = None;
        for (i, fi) in [f1, f2, f3].into_iter().enumerate() {
            let col = g.narrow_last(route, i, 1)?;
            let col = g.reshape(col, &[batch])?;
            let masked = g.scale_rows(fi, col)?;
            fused = Some(match fused {
                None => masked,
                Some(acc) => g.add(acc, masked)?,
            });
        }
        Ok((fused.unwrap(), route, logits))
    }

    // ---- raw (inference) path ----

    pub fn mcf_raw<T: Element>(&self, fr: &Tensor<T>, fe: &Tensor<T>) -> TensorResult<Tensor<T>> {
        ops::concat_last(fr, fe)
    }

    pub fn mdf_raw<T: Element>(&self, fr: &Tensor<T>, fe: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let common = ops::binary(ops::BinaryOp::Mul, fr, fe)?;
        let r = ops::binary(ops::BinaryOp::Sub, fr, &common)?;
        let e = ops::binary(ops::BinaryOp::Sub, fe, &common)?;
        ops::concat_last(&r, &e)
    }

    pub fn msf_raw<T: Element>(
        &self,
        store: &ParamStore<T>,
        fr: &Tensor<T>,
        fe: &Tensor<T>,
    ) -> TensorResult<Tensor<T>> {
        let cat = ops::concat_last(fr, fe)?;
        let logits = ops::linear(&cat, store.value(self.msf_w), store.value(self.msf_b))?;
        let gates = ops::unary(ops::UnaryOp::Sigmoid, &logits);
        if self.per_channel_msf {
            let c = self.feature_dim;
            let wr = ops::narrow_last(&gates, 0, c)?;
            let we = ops::narrow_last(&gates, c, c)?;
            let r = ops::binary(ops::BinaryOp::Mul, &wr, fr)?;
            let e = ops::binary(ops::BinaryOp::Mul, &we, fe)?;
            ops::concat_last(&r, &e)
        } else {
            let b = fr.dim(0);
            let wr = ops::narrow_last(&gates, 0, 1)?.reshape(&[b])?;
            let we = ops::narrow_last(&gates, 1, 1)?.reshape(&[b])?;
            let r = ops::scale_rows(fr, &wr)?;
            let e = ops::scale_rows(fe, &we)?;
            ops::concat_last(&r, &e)
        }
    }

    pub fn policy_logits_raw<T: Element>(
        &self,
        store: &ParamStore<T>,
        fr: &Tensor<T>,
        fe: &Tensor<T>,
    ) -> TensorResult<Tensor<T>> {
        let cat = ops::concat_last(fr, fe)?;
        let h = ops::linear(&cat, store.value(self.policy_fc1_w), store.value(self.policy_fc1_b))?;
        let h = ops::unary(ops::UnaryOp::Gelu, &h);
        ops::linear(&h, store.value(self.policy_fc2_w), store.value(self.policy_fc2_b))
    }

    /// Inference fusion: deterministic argmax route; only the selected
    /// strategy is evaluated for each sample.
    pub fn route_infer<T: Element>(
        &self,
        store: &ParamStore<T>,
        fr: &Tensor<T>,
        fe: &Tensor<T>,
        mode: FusionMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> TensorResult<FusionBundle<T>> {
        let batch = fr.dim(0);
        let c = *fr.shape().last().unwrap();
        let logits = self.policy_logits_raw(store, fr, fe)?;
        let choices: Vec<usize> = match mode {
            FusionMode::Route => logits
                .data()
                .chunks(STRATEGIES)
                .map(|row| {
                    let mut best = 0usize;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect(),
            FusionMode::Mcf => vec![0; batch],
            FusionMode::Mdf => vec![1; batch],
            FusionMode::Msf => vec![2; batch],
            FusionMode::Random => {
                let rng = rng.ok_or_else(|| TensorError::InvalidArgument {
                    op: "route_infer",
                    reason: "random mode needs an rng".into(),
                })?;
                (0..batch).map(|_| rng.random_range(0..STRATEGIES)).collect()
            }
        };
        let mut route = Tensor::zeros(&[batch, STRATEGIES]);
        let mut fused = Tensor::zeros(&[batch, 2 * c]);
        for (b, &choice) in choices.iter().enumerate() {
            route.data_mut()[b * STRATEGIES + choice] = T::ONE;
            let fr_row = Tensor::new(vec![1, c], fr.data()[b * c..(b + 1) * c].to_vec())?;
            let fe_row = Tensor::new(vec![1, c], fe.data()[b * c..(b + 1) * c].to_vec())?;
            let frow = match choice {
                0 => self.mcf_raw(&fr_row, &fe_row)?,
                1 => self.mdf_raw(&fr_row, &fe_row)?,
                _ => self.msf_raw(store, &fr_row, &fe_row)?,
            };
            fused.data_mut()[b * 2 * c..(b + 1) * 2 * c].copy_from_slice(frow.data());
        }
        Ok(FusionBundle {
            feat_rgb: fr.clone(),
            feat_event: fe.clone(),
            fused,
            route,
            route_logits: logits,
        })
    }
}
