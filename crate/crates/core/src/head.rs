//! Classification head, training losses, and top-k metrics.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{trunc_normal, Graph, ParamId, ParamStore, Var};
use crate::model::{INIT_STD, LN_EPS};
use crate::ops;
use crate::tensor::{Element, Tensor, TensorError, TensorResult};

/// Training loss form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Standard multi-class softmax cross-entropy.
    CrossEntropy,
    /// Per-class binary cross-entropy over softmax scores, averaged over
    /// classes then batch.
    Literal,
}

impl LossMode {
    pub fn parse(s: &str) -> Option<LossMode> {
        match s {
            "ce" => Some(LossMode::CrossEntropy),
            "literal" => Some(LossMode::Literal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::CrossEntropy => "ce",
            LossMode::Literal => "literal",
        }
    }
}

/// Class scores for a batch: raw logits plus softmax probabilities.
#[derive(Debug, Clone)]
pub struct Prediction<T: Element> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// LayerNorm + linear over the fused feature.
pub struct HeadParams {
    ln_g: ParamId,
    ln_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    pub num_classes: usize,
}

impl HeadParams {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        num_classes: usize,
    ) -> TensorResult<Self> {
        if num_classes < 2 {
            return Err(TensorError::InvalidArgument {
                op: "head",
                reason: format!("need at least 2 classes, got {num_classes}"),
            });
        }
        Ok(HeadParams {
            ln_g: store.add_param("head.ln.g", Tensor::ones(&[in_dim]), true),
            ln_b: store.add_param("head.ln.b", Tensor::zeros(&[in_dim]), true),
            fc_w: store.add_param("head.fc.w", trunc_normal(rng, &[in_dim, num_classes], INIT_STD), true),
            fc_b: store.add_param("head.fc.b", Tensor::zeros(&[num_classes]), true),
            num_classes,
        })
    }

    /// Graph path: fused [B,2C] -> logits [B,classes].
    pub fn logits<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var) -> TensorResult<Var> {
        let ln_g = g.param(store, self.ln_g);
        let ln_b = g.param(store, self.ln_b);
        let y = g.layernorm(fused, ln_g, ln_b, LN_EPS)?;
        let w = g.param(store, self.fc_w);
        let b = g.param(store, self.fc_b);
        g.linear(y, w, b)
    }

    /// Raw path for inference: logits and clamped softmax probabilities.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, fused: &Tensor<T>) -> TensorResult<Prediction<T>> {
        let y = ops::layernorm(fused, store.value(self.ln_g), store.value(self.ln_b), LN_EPS)?;
        let logits = ops::linear(&y, store.value(self.fc_w), store.value(self.fc_b))?;
        let probs = ops::softmax_last(&logits);
        Ok(Prediction { logits, probs })
    }

    /// Scalar training loss from logits and one-hot targets.
    pub fn loss<T: Element>(
        &self,
        g: &mut Graph<T>,
        logits: Var,
        targets: &Tensor<T>,
        mode: LossMode,
    ) -> TensorResult<Var> {
        validate_one_hot(targets)?;
        match mode {
            LossMode::CrossEntropy => g.cross_entropy_mean(logits, targets),
            LossMode::Literal => {
                let probs = g.softmax_last(logits);
                g.bce_literal_mean(probs, targets)
            }
        }
    }
}

pub fn validate_one_hot<T: Element>(targets: &Tensor<T>) -> TensorResult<()> {
    let c = *targets.shape().last().unwrap();
    for (i, row) in targets.data().chunks(c).enumerate() {
        let mut ones = 0usize;
        for &v in row {
            let f = v.to_f64();
            if f == 1.0 {
                ones += 1;
            } else if f != 0.0 {
                return Err(TensorError::InvalidArgument {
                    op: "loss",
                    reason: format!("row {i} is not one-hot"),
                });
            }
        }
        if ones != 1 {
            return Err(TensorError::InvalidArgument {
                op: "loss",
                reason: format!("row {i} has {ones} ones"),
            });
        }
    }
    Ok(())
}

/// One-hot encodes labels into [B,C].
pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (b, &l) in labels.iter().enumerate() {
        assert!(l < classes, "label {l} out of {classes}");
        t.data_mut()[b * classes + l] = T::ONE;
    }
    t
}

/// Fraction of samples whose true class is among the k highest logits; ties
/// break toward the lowest index.
pub fn topk_accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize], k: usize) -> TensorResult<f64> {
    let c = *logits.shape().last().unwrap();
    if k == 0 || k > c {
        return Err(TensorError::InvalidArgument {
            op: "topk_accuracy",
            reason: format!("k={k} out of range for {c} classes"),
        });
    }
    if logits.dim(0) != labels.len() {
        return Err(TensorError::InvalidArgument {
            op: "topk_accuracy",
            reason: format!("{} rows vs {} labels", logits.dim(0), labels.len()),
        });
    }
    let mut correct = 0usize;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let target = row[label];
        // rank = classes that sort strictly ahead of the true one
        let mut rank = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > target || (v == target && j < label) {
                rank += 1;
            }
        }
        if rank < k {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn head_rejects_single_class() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(HeadParams::build(&mut store, &mut rng, 8, 1).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = HeadParams::build(&mut store, &mut rng, 4, 10).unwrap();
        *store.value_mut(head.fc_w) = Tensor::zeros(&[4, 10]);
        let fused = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let pred = head.predict(&store, &fused).unwrap();
        for &p in pred.probs.data() {
            assert!((p - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = HeadParams::build(&mut store, &mut rng, 6, 5).unwrap();
        let fused = Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.7).cos());
        let pred = head.predict(&store, &fused).unwrap();
        for row in pred.probs.data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for &p in row {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn top1_of_logits() {
        let logits = t(&[1, 3], &[0.1, 2.0, -1.0]);
        assert_eq!(topk_accuracy(&logits, &[1], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&logits, &[0], 1).unwrap(), 0.0);
    }

    #[test]
    fn topk_full_k_is_one() {
        let logits = t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, -1.0, -2.0, -3.0, -4.0]);
        assert_eq!(topk_accuracy(&logits, &[0, 3], 4).unwrap(), 1.0);
    }

    #[test]
    fn topk_batch_fraction() {
        let logits = t(
            &[4, 2],
            &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        );
        // labels: 0,0,1,1 -> first three correct top-1
        assert_eq!(topk_accuracy(&logits, &[0, 0, 1, 1], 1).unwrap(), 0.75);
    }

    #[test]
    fn topk_rejects_bad_k() {
        let logits = t(&[1, 3], &[0.0, 0.0, 0.0]);
        assert!(topk_accuracy(&logits, &[0], 4).is_err());
    }

    #[test]
    fn top5_at_least_top1() {
        let logits = Tensor::from_fn(&[8, 9], |i| ((i * 37 % 11) as f64).sin());
        let labels: Vec<usize> = (0..8).map(|i| i % 9).collect();
        let t1 = topk_accuracy(&logits, &labels, 1).unwrap();
        let t5 = topk_accuracy(&logits, &labels, 5).unwrap();
        assert!(t5 >= t1);
    }

    #[test]
    fn top1_invariant_under_monotone_transform() {
        let logits = Tensor::from_fn(&[6, 5], |i| ((i * 13 % 7) as f64) * 0.3 - 1.0);
        let labels: Vec<usize> = (0..6).map(|i| (i * 2) % 5).collect();
        let base = topk_accuracy(&logits, &labels, 1).unwrap();
        let squashed = logits.map(|v| (3.0 * v + 1.0).tanh());
        assert_eq!(topk_accuracy(&squashed, &labels, 1).unwrap(), base);
    }

    #[test]
    fn ce_uniform_prediction_is_ln_c() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 10]));
        let targets = one_hot::<f64>(&[3, 7], 10);
        let loss = g.cross_entropy_mean(logits, &targets).unwrap();
        assert!((g.value(loss).item() - (10.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_perfect_prediction_near_zero() {
        let mut g = Graph::new();
        let mut z = Tensor::<f64>::zeros(&[1, 4]);
        z.data_mut()[2] = 60.0;
        let logits = g.leaf(z);
        let targets = one_hot::<f64>(&[2], 4);
        let loss = g.cross_entropy_mean(logits, &targets).unwrap();
        assert!(g.value(loss).item() >= 0.0);
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn ce_gradient_is_probs_minus_targets_over_batch() {
        let mut store = ParamStore::<f64>::new();
        let z = store.add_param("z", t(&[2, 3], &[0.2, -0.4, 0.9, 1.5, 0.0, -0.3]), true);
        let targets = one_hot::<f64>(&[2, 0], 3);
        let mut g = Graph::new();
        let zv = g.param(&store, z);
        let loss = g.cross_entropy_mean(zv, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let probs = ops::softmax_last(store.value(z));
        let expected = probs
            .zip_map(&targets, "exp", |p, t| (p - t) / 2.0)
            .unwrap();
        assert!(grads.param(z).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn literal_loss_hand_value() {
        // B=1, probs [0.7, 0.3], label 0 -> -(ln 0.7 + ln 0.7)/2
        let mut g = Graph::new();
        let probs = g.leaf(t(&[1, 2], &[0.7, 0.3]));
        let targets = one_hot::<f64>(&[0], 2);
        let loss = g.bce_literal_mean(probs, &targets).unwrap();
        let expected = -(0.7f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        assert!((g.value(loss).item() - 0.3567).abs() < 1e-4);
    }

    #[test]
    fn losses_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        for _ in 0..20 {
            let z = Tensor::<f64>::from_fn(&[3, 5], |_| rng.random::<f64>() * 6.0 - 3.0);
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
            let targets = one_hot::<f64>(&labels, 5);
            let mut g = Graph::new();
            let zv = g.leaf(z);
            let ce = g.cross_entropy_mean(zv, &targets).unwrap();
            assert!(g.value(ce).item() >= 0.0);
            let probs = g.softmax_last(zv);
            let lit = g.bce_literal_mean(probs, &targets).unwrap();
            assert!(g.value(lit).item() >= 0.0);
        }
    }

    #[test]
    fn loss_rejects_non_one_hot() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = HeadParams::build(&mut store, &mut rng, 4, 3).unwrap();
        let mut g = Graph::new();
        let fused = g.leaf(Tensor::zeros(&[1, 4]));
        let logits = head.logits(&mut g, &store, fused).unwrap();
        let bad = t(&[1, 3], &[0.5, 0.5, 0.0]);
        assert!(head.loss(&mut g, logits, &bad, LossMode::CrossEntropy).is_err());
    }
}
