//! The complete classifier: backbone + fusion router + head, with a graph
//! path for training and a raw path for inference.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::fusion::{gumbel_noise, FusionBundle, FusionMode, FusionParams, RoutePlan, DEFAULT_TAU, STRATEGIES};
use crate::head::{HeadParams, LossMode, Prediction};
use crate::model::{Backbone, BnUpdate, ModelSpec};
use crate::tensor::{Element, Tensor, TensorResult};

pub struct Classifier {
    pub backbone: Backbone,
    pub fusion: FusionParams,
    pub head: HeadParams,
}

/// Everything the trainer needs from one forward pass.
pub struct TrainForward<T: Element> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub route_hist: [usize; STRATEGIES],
}

/// Which stream(s) to feed; the suppressed stream is zeroed at the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamMask {
    pub zero_rgb: bool,
    pub zero_event: bool,
}

impl Classifier {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        spec: &ModelSpec,
    ) -> TensorResult<Self> {
        let backbone = Backbone::build(store, rng, spec)?;
        let fusion = FusionParams::build(store, rng, spec.feature_dim(), spec.msf_per_channel);
        let head = HeadParams::build(store, rng, 2 * spec.feature_dim(), spec.num_classes)?;
        Ok(Classifier {
            backbone,
            fusion,
            head,
        })
    }

    fn route_plan<T: Element>(
        &self,
        mode: FusionMode,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> RoutePlan<T> {
        match mode {
            FusionMode::Route => RoutePlan::Gumbel {
                noise: gumbel_noise(rng, &[batch, STRATEGIES]),
                tau: DEFAULT_TAU,
            },
            FusionMode::Mcf => RoutePlan::Fixed(0),
            FusionMode::Mdf => RoutePlan::Fixed(1),
            FusionMode::Msf => RoutePlan::Fixed(2),
            FusionMode::Random => {
                use rand::Rng;
                RoutePlan::Random((0..batch).map(|_| rng.random_range(0..STRATEGIES)).collect())
            }
        }
    }

    /// Training pass over one batch. `rng` drives the routing stochasticity
    /// (Gumbel noise or random strategy choices) and nothing else.
    #[allow(clippy::too_many_arguments)]
    pub fn train_forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        rgb: &Tensor<T>,
        evt: &Tensor<T>,
        targets: &Tensor<T>,
        mode: FusionMode,
        loss_mode: LossMode,
        rng: &mut ChaCha8Rng,
        mask: StreamMask,
    ) -> TensorResult<TrainForward<T>> {
        let plan = self.route_plan(mode, rgb.dim(0), rng);
        self.forward_with_plan(store, rgb, evt, targets, &plan, loss_mode, mask, true)
    }

    /// Forward with an explicit routing plan; used by the trainer and by the
    /// gradient checks (which need the fully differentiable soft plan).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_plan<T: Element>(
        &self,
        store: &ParamStore<T>,
        rgb: &Tensor<T>,
        evt: &Tensor<T>,
        targets: &Tensor<T>,
        plan: &RoutePlan<T>,
        loss_mode: LossMode,
        mask: StreamMask,
        train: bool,
    ) -> TensorResult<TrainForward<T>> {
        let mut graph = Graph::new();
        let mut bn_updates = Vec::new();
        let (fr, fe) = self.backbone.forward(
            &mut graph,
            store,
            rgb,
            evt,
            train,
            &mut bn_updates,
            mask.zero_rgb,
            mask.zero_event,
        )?;
        let (fused, route, _logits) = self.fusion.route(&mut graph, store, fr, fe, plan)?;
        let logits = self.head.logits(&mut graph, store, fused)?;
        let loss = self.head.loss(&mut graph, logits, targets, loss_mode)?;
        let mut route_hist = [0usize; STRATEGIES];
        for row in graph.value(route).data().chunks(STRATEGIES) {
            for (i, &v) in row.iter().enumerate() {
                if v.to_f64() > 0.5 {
                    route_hist[i] += 1;
                }
            }
        }
        Ok(TrainForward {
            graph,
            loss,
            logits,
            bn_updates,
            route_hist,
        })
    }

    /// Inference: eval-mode backbone, deterministic routing (or the given
    /// override mode), raw head. Only the selected fusion path executes.
    pub fn infer<T: Element>(
        &self,
        store: &ParamStore<T>,
        rgb: &Tensor<T>,
        evt: &Tensor<T>,
        mode: FusionMode,
        rng: Option<&mut ChaCha8Rng>,
        mask: StreamMask,
    ) -> TensorResult<(Prediction<T>, FusionBundle<T>)> {
        let mut graph = Graph::new();
        let mut bn_updates = Vec::new();
        let (fr, fe) = self.backbone.forward(
            &mut graph,
            store,
            rgb,
            evt,
            false,
            &mut bn_updates,
            mask.zero_rgb,
            mask.zero_event,
        )?;
        let fr_t = graph.value(fr).clone();
        let fe_t = graph.value(fe).clone();
        drop(graph);
        let bundle = self.fusion.route_infer(store, &fr_t, &fe_t, mode, rng)?;
        let pred = self.head.predict(store, &bundle.fused)?;
        Ok((pred, bundle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::one_hot;
    use rand::SeedableRng;

    #[test]
    fn train_and_infer_shapes() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Classifier::build(&mut store, &mut rng, &spec).unwrap();
        let rgb = Tensor::from_fn(&[2, 1, 3, 16, 16], |i| ((i % 7) as f64) / 7.0);
        let evt = Tensor::from_fn(&[2, 1, 3, 16, 16], |i| ((i % 5) as f64) / 5.0);
        let targets = one_hot::<f64>(&[0, 2], 4);
        let fwd = net
            .train_forward(
                &store,
                &rgb,
                &evt,
                &targets,
                FusionMode::Route,
                LossMode::CrossEntropy,
                &mut rng,
                StreamMask::default(),
            )
            .unwrap();
        assert_eq!(fwd.graph.value(fwd.logits).shape(), &[2, 4]);
        assert!(fwd.graph.value(fwd.loss).item().is_finite());
        assert_eq!(fwd.route_hist.iter().sum::<usize>(), 2);

        let (pred, bundle) = net
            .infer(&store, &rgb, &evt, FusionMode::Route, None, StreamMask::default())
            .unwrap();
        assert_eq!(pred.probs.shape(), &[2, 4]);
        assert_eq!(bundle.fused.shape(), &[2, 2 * spec.feature_dim()]);
    }

    #[test]
    fn zeroed_stream_changes_features() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Classifier::build(&mut store, &mut rng, &spec).unwrap();
        let rgb = Tensor::from_fn(&[1, 1, 3, 16, 16], |i| ((i % 9) as f64) / 9.0);
        let evt = Tensor::from_fn(&[1, 1, 3, 16, 16], |i| ((i % 4) as f64) / 4.0);
        let (full, _) = net
            .infer(&store, &rgb, &evt, FusionMode::Mcf, None, StreamMask::default())
            .unwrap();
        let (rgb_only, _) = net
            .infer(
                &store,
                &rgb,
                &evt,
                FusionMode::Mcf,
                None,
                StreamMask { zero_rgb: false, zero_event: true },
            )
            .unwrap();
        assert!(full.logits.max_abs_diff(&rgb_only.logits) > 0.0);
    }
}
