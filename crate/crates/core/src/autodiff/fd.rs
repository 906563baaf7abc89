//! Central-difference gradient oracle, independent of the backward rules.

use super::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{Element, TensorError, TensorResult};

/// Builds a fresh forward pass over the current store contents and returns
/// the graph plus the scalar loss node. Any stochastic choices must be frozen
/// (same seed on every call) so the loss is a deterministic function of the
/// parameters.
pub type LossBuilder<'a, T> = dyn FnMut(&ParamStore<T>) -> TensorResult<(Graph<T>, Var)> + 'a;

/// Checks the analytic gradient of `build`'s loss w.r.t. parameter `id`
/// against central differences at every coordinate. Returns the max over
/// coordinates of |analytic - numeric| / max(1, |analytic|).
pub fn fd_check<T: Element>(
    build: &mut LossBuilder<'_, T>,
    store: &mut ParamStore<T>,
    id: ParamId,
    h: f64,
) -> TensorResult<f64> {
    let n = store.value(id).len();
    let coords: Vec<usize> = (0..n).collect();
    fd_check_sampled(build, store, id, h, &coords)
}

/// Same as [`fd_check`] but over a caller-chosen subset of coordinates, for
/// parameters too large to sweep exhaustively.
pub fn fd_check_sampled<T: Element>(
    build: &mut LossBuilder<'_, T>,
    store: &mut ParamStore<T>,
    id: ParamId,
    h: f64,
    coords: &[usize],
) -> TensorResult<f64> {
    if h <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "fd_check",
            reason: format!("step h must be positive, got {h}"),
        });
    }
    let (graph, loss) = build(store)?;
    let grads = graph.backward(loss)?;
    let analytic = grads
        .param(id)
        .ok_or_else(|| TensorError::InvalidArgument {
            op: "fd_check",
            reason: format!("parameter {} received no gradient", store.name(id)),
        })?
        .clone();
    drop(graph);

    let mut max_rel = 0.0f64;
    for &i in coords {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = T::from_f64(orig.to_f64() + h);
        let (gp, lp) = build(store)?;
        let plus = gp.value(lp).item().to_f64();
        drop(gp);
        store.value_mut(id).data_mut()[i] = T::from_f64(orig.to_f64() - h);
        let (gm, lm) = build(store)?;
        let minus = gm.value(lm).item().to_f64();
        drop(gm);
        store.value_mut(id).data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i].to_f64();
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn rejects_non_positive_step() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::scalar(3.0), true);
        let mut build = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.param(s, x);
            let sq = g.mul(xv, xv)?;
            let loss = g.sum_all(sq);
            Ok((g, loss))
        };
        assert!(fd_check(&mut build, &mut store, x, 0.0).is_err());
    }

    #[test]
    fn exact_for_quadratic() {
        // f(x) = x^2 at x=3: central differences are exact up to rounding
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::scalar(3.0), true);
        let mut build = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.param(s, x);
            let sq = g.mul(xv, xv)?;
            let loss = g.sum_all(sq);
            Ok((g, loss))
        };
        let err = fd_check(&mut build, &mut store, x, 1e-6).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn linear_sigmoid_chain() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add_param(
            "w",
            Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]).unwrap(),
            true,
        );
        let b = store.add_param("b", Tensor::new(vec![2], vec![0.05, -0.02]).unwrap(), true);
        let x = Tensor::new(vec![2, 3], vec![0.9, -0.3, 0.4, 0.2, 0.8, -0.6]).unwrap();
        let mut build = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            let y = g.linear(xv, wv, bv)?;
            let sy = g.sigmoid(y);
            let loss = g.sum_all(sy);
            Ok((g, loss))
        };
        for id in [w, b] {
            let err = fd_check(&mut build, &mut store, id, 1e-6).unwrap();
            assert!(err < 1e-5, "rel err {err}");
        }
    }
}
