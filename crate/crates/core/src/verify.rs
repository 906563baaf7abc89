//! Executable invariant suites: every contract in the crate, runnable as a
//! batch with pass/fail reporting. The CLI `verify` subcommand and the
//! acceptance tests share these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{fd_check, fd_check_sampled, Graph, ParamId, ParamStore, Var};
use crate::events::{stack_event_counts, EventPoint, EventStream};
use crate::fusion::{gumbel_noise, FusionParams, RoutePlan, STRATEGIES};
use crate::head::{one_hot, LossMode};
use crate::model::ModelSpec;
use crate::net::{Classifier, StreamMask};
use crate::ops::UnaryOp;
use crate::spectral::{build_decay, dct2, hco_forward, idct2, FrequencyGrid};
use crate::tensor::{Element, Tensor, TensorResult};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub suite: &'static str,
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = format!("suite {}\n", self.suite);
        for c in &self.checks {
            s.push_str(&format!(
                "  [{}] {}{}\n",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                if c.detail.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", c.detail)
                }
            ));
        }
        s.push_str(&format!(
            "suite {}: {}/{} passed\n",
            self.suite,
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        ));
        s
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn rand_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64((rng.random::<f64>() - 0.5) * 2.0 * scale))
}

// ---------------------------------------------------------------- spectral

/// O(N^2) evaluation of the DCT-II definition; the oracle against which the
/// separable implementation is checked.
pub fn dct2_reference(x: &Tensor<f64>) -> Tensor<f64> {
    use std::f64::consts::PI;
    let h = x.dim(x.rank() - 2);
    let w = x.dim(x.rank() - 1);
    let mut out = vec![0.0; h * w];
    for k in 0..h {
        for l in 0..w {
            let sk = if k == 0 { (1.0 / h as f64).sqrt() } else { (2.0 / h as f64).sqrt() };
            let sl = if l == 0 { (1.0 / w as f64).sqrt() } else { (2.0 / w as f64).sqrt() };
            let mut acc = 0.0;
            for n in 0..h {
                for m in 0..w {
                    acc += x.data()[n * w + m]
                        * (PI * (n as f64 + 0.5) * k as f64 / h as f64).cos()
                        * (PI * (m as f64 + 0.5) * l as f64 / w as f64).cos();
                }
            }
            out[k * w + l] = sk * sl * acc;
        }
    }
    Tensor::new(vec![h, w], out).unwrap()
}

pub fn spectral_suite(seed: u64) -> Report {
    spectral_suite_with_fault(seed, 0.0)
}

/// `fault` scales the forward transform by (1 + fault), simulating a broken
/// DCT normalization; any nonzero fault must trip the isometry and
/// round-trip checks.
pub fn spectral_suite_with_fault(seed: u64, fault: f64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let dct_under_test = |x: &Tensor<f64>| -> Tensor<f64> {
        let y = dct2(x).unwrap();
        if fault != 0.0 {
            crate::ops::scale(&y, 1.0 + fault)
        } else {
            y
        }
    };

    // brute-force oracle agreement
    let x22 = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let d = dct_under_test(&x22).max_abs_diff(&dct2_reference(&x22));
    checks.push(check("dct2 2x2 vs brute-force double sum", d < 1e-10, format!("max err {d:.2e}")));
    let x44 = rand_tensor::<f64>(&mut rng, &[4, 4], 1.0);
    let d = dct_under_test(&x44).max_abs_diff(&dct2_reference(&x44));
    checks.push(check("dct2 4x4 vs brute-force double sum", d < 1e-10, format!("max err {d:.2e}")));

    // round-trip and isometry over 100 random shapes
    let mut max_rt = 0.0f64;
    let mut max_iso = 0.0f64;
    for _ in 0..100 {
        let h = rng.random_range(1..=32);
        let w = rng.random_range(1..=32);
        let x = rand_tensor::<f64>(&mut rng, &[h, w], 1.0);
        let y = dct_under_test(&x);
        max_rt = max_rt.max(idct2(&y).unwrap().max_abs_diff(&x));
        max_iso = max_iso.max((y.l2_norm() - x.l2_norm()).abs());
    }
    checks.push(check("idct2(dct2(x)) round trip, 100 shapes <=32x32", max_rt < 1e-6, format!("max err {max_rt:.2e}")));
    checks.push(check("dct2 isometry, 100 shapes", max_iso < 1e-6, format!("max err {max_iso:.2e}")));

    // heat physics
    let x = rand_tensor::<f64>(&mut rng, &[1, 2, 8, 8], 1.0);
    let grid = FrequencyGrid::new(8, 8);
    let k0 = Tensor::<f64>::zeros(&[2, 8, 8]);
    let ident = hco_forward(&x, &build_decay(&grid, &k0, 1.0).unwrap()).unwrap();
    let d = ident.max_abs_diff(&x);
    checks.push(check("zero diffusivity is identity", d < 1e-6, format!("max err {d:.2e}")));

    let mut max_mean = 0.0f64;
    let mut energy_ok = true;
    let mut max_semi = 0.0f64;
    for _ in 0..50 {
        let k = Tensor::<f64>::from_fn(&[2, 8, 8], |_| 0.05 + rng.random::<f64>() * 1.5);
        let t1 = 0.1 + rng.random::<f64>() * 1.5;
        let t2 = 0.1 + rng.random::<f64>() * 1.5;
        let x = rand_tensor::<f64>(&mut rng, &[1, 2, 8, 8], 1.0);
        let d1 = build_decay(&grid, &k, t1).unwrap();
        let d2 = build_decay(&grid, &k, t2).unwrap();
        let d12 = build_decay(&grid, &k, t1 + t2).unwrap();
        let y1 = hco_forward(&x, &d1).unwrap();
        energy_ok &= y1.l2_norm() <= x.l2_norm();
        for c in 0..2 {
            let xm: f64 = x.data()[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0;
            let ym: f64 = y1.data()[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0;
            max_mean = max_mean.max((xm - ym).abs());
        }
        let two = hco_forward(&y1, &d2).unwrap();
        let joint = hco_forward(&x, &d12).unwrap();
        max_semi = max_semi.max(two.max_abs_diff(&joint));
    }
    checks.push(check("per-channel mean conservation, 50 draws", max_mean < 1e-6, format!("max err {max_mean:.2e}")));
    checks.push(check("energy non-expansion, 50 draws", energy_ok, String::new()));
    checks.push(check("semigroup composition, 50 draws", max_semi < 1e-5, format!("max err {max_semi:.2e}")));

    // linearity
    let a = rand_tensor::<f64>(&mut rng, &[1, 1, 6, 6], 1.0);
    let b = rand_tensor::<f64>(&mut rng, &[1, 1, 6, 6], 1.0);
    let g6 = FrequencyGrid::new(6, 6);
    let k = Tensor::<f64>::full(&[1, 6, 6], 0.8);
    let dk = build_decay(&g6, &k, 1.0).unwrap();
    let mixed = a.zip_map(&b, "mix", |u, v| 1.3 * u - 0.7 * v).unwrap();
    let lhs = hco_forward(&mixed, &dk).unwrap();
    let ha = hco_forward(&a, &dk).unwrap();
    let hb = hco_forward(&b, &dk).unwrap();
    let rhs = ha.zip_map(&hb, "mix", |u, v| 1.3 * u - 0.7 * v).unwrap();
    let d = lhs.max_abs_diff(&rhs);
    checks.push(check("linearity", d < 1e-6, format!("max err {d:.2e}")));

    Report {
        suite: "spectral",
        checks,
    }
}

// ---------------------------------------------------------------- gradients

struct OpCase<T: Element> {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    scale: f64,
    #[allow(clippy::type_complexity)]
    build: Box<dyn Fn(&mut Graph<T>, &ParamStore<T>, &[ParamId]) -> TensorResult<Var>>,
}

fn sig_sum<T: Element>(g: &mut Graph<T>, v: Var) -> Var {
    let s = g.sigmoid(v);
    g.sum_all(s)
}

fn op_cases<T: Element>() -> Vec<OpCase<T>> {
    let unary = |name: &'static str, op: UnaryOp, scale: f64| OpCase::<T> {
        name,
        shapes: vec![vec![2, 5]],
        scale,
        build: Box::new(move |g, s, ids| {
            let x = g.param(s, ids[0]);
            let y = g.unary(op, x);
            Ok(g.sum_all(y))
        }),
    };
    vec![
        OpCase {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let a = g.param(s, ids[0]);
                let b = g.param(s, ids[1]);
                let y = g.add(a, b)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "sub",
            shapes: vec![vec![2, 3], vec![2, 3]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let a = g.param(s, ids[0]);
                let b = g.param(s, ids[1]);
                let y = g.sub(a, b)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let a = g.param(s, ids[0]);
                let b = g.param(s, ids[1]);
                let y = g.mul(a, b)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "scale_and_shift",
            shapes: vec![vec![3, 3]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let y = g.scale(x, -1.7);
                let y = g.add_scalar(y, 0.3);
                Ok(sig_sum(g, y))
            }),
        },
        unary("sigmoid", UnaryOp::Sigmoid, 1.5),
        unary("silu", UnaryOp::Silu, 1.5),
        unary("gelu", UnaryOp::Gelu, 1.5),
        unary("softplus", UnaryOp::Softplus, 1.5),
        unary("exp", UnaryOp::Exp, 0.5),
        OpCase {
            name: "linear",
            shapes: vec![vec![2, 3], vec![3, 4], vec![4]],
            scale: 0.7,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let w = g.param(s, ids[1]);
                let b = g.param(s, ids[2]);
                let y = g.linear(x, w, b)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "depthwise_conv2d stride1",
            shapes: vec![vec![1, 2, 5, 5], vec![2, 3, 3]],
            scale: 0.6,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let k = g.param(s, ids[1]);
                let y = g.depthwise_conv2d(x, k, 1, 1)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "depthwise_conv2d stride2",
            shapes: vec![vec![1, 2, 6, 6], vec![2, 3, 3]],
            scale: 0.6,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let k = g.param(s, ids[1]);
                let y = g.depthwise_conv2d(x, k, 2, 1)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "conv2d",
            shapes: vec![vec![1, 2, 4, 4], vec![3, 2, 3, 3], vec![3]],
            scale: 0.5,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let w = g.param(s, ids[1]);
                let b = g.param(s, ids[2]);
                let y = g.conv2d(x, w, b, 2, 1)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "add_channel_bias",
            shapes: vec![vec![2, 3, 2, 2], vec![3]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let b = g.param(s, ids[1]);
                let y = g.add_channel_bias(x, b)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "layernorm",
            shapes: vec![vec![3, 6], vec![6], vec![6]],
            scale: 1.0,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let ga = g.param(s, ids[1]);
                let be = g.param(s, ids[2]);
                let y = g.layernorm(x, ga, be, 1e-5)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "batchnorm train",
            shapes: vec![vec![2, 3, 3, 3], vec![3], vec![3]],
            scale: 1.0,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let ga = g.param(s, ids[1]);
                let be = g.param(s, ids[2]);
                let (y, _, _) = g.batchnorm_train(x, ga, be, 1e-5)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "batchnorm eval",
            shapes: vec![vec![2, 2, 3, 3], vec![2], vec![2]],
            scale: 1.0,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let ga = g.param(s, ids[1]);
                let be = g.param(s, ids[2]);
                let rm = Tensor::from_fn(&[2], |i| T::from_f64(0.1 * i as f64));
                let rv = Tensor::from_fn(&[2], |i| T::from_f64(0.5 + 0.3 * i as f64));
                let y = g.batchnorm_eval(x, ga, be, &rm, &rv, 1e-5)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "permute+reshape",
            shapes: vec![vec![2, 3, 4]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let y = g.permute(x, &[2, 0, 1])?;
                let y = g.reshape(y, &[4, 6])?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "narrow+concat",
            shapes: vec![vec![2, 6]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let a = g.narrow_last(x, 0, 3)?;
                let b = g.narrow_last(x, 3, 3)?;
                let m = g.mul(a, b)?;
                let y = g.concat_last(m, a)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "mean_axes",
            shapes: vec![vec![2, 3, 4]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let y = g.mean_axes(x, &[0, 2])?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "dct2",
            shapes: vec![vec![2, 4, 4]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let y = g.dct2(x)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "idct2",
            shapes: vec![vec![2, 4, 4]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let y = g.idct2(x)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "mul_bcast_batch",
            shapes: vec![vec![2, 3, 4], vec![3, 4]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let m = g.param(s, ids[1]);
                let y = g.mul_bcast_batch(x, m)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "heat step with learned decay",
            shapes: vec![vec![1, 2, 4, 4], vec![2, 4, 4]],
            scale: 0.7,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let kraw = g.param(s, ids[1]);
                let k = g.softplus(kraw);
                let om: Tensor<T> = {
                    let grid = FrequencyGrid::new(4, 4);
                    let plane: Tensor<T> = grid.omega_sq();
                    let mut data = Vec::new();
                    for _ in 0..2 {
                        data.extend_from_slice(plane.data());
                    }
                    Tensor::new(vec![2, 4, 4], data).unwrap()
                };
                let omv = g.leaf(om);
                let kw = g.mul(k, omv)?;
                let neg = g.scale(kw, -1.0);
                let decay = g.exp(neg);
                let y = g.hco(x, decay)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "scale_rows",
            shapes: vec![vec![3, 4], vec![3]],
            scale: 0.8,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let r = g.param(s, ids[1]);
                let y = g.scale_rows(x, r)?;
                Ok(sig_sum(g, y))
            }),
        },
        OpCase {
            name: "softmax",
            shapes: vec![vec![2, 5], vec![2, 5]],
            scale: 1.0,
            build: Box::new(|g, s, ids| {
                let x = g.param(s, ids[0]);
                let w = g.param(s, ids[1]);
                let p = g.softmax_last(x);
                let y = g.mul(p, w)?;
                Ok(g.sum_all(y))
            }),
        },
        OpCase {
            name: "cross entropy",
            shapes: vec![vec![3, 5]],
            scale: 1.0,
            build: Box::new(|g, s, ids| {
                let z = g.param(s, ids[0]);
                let targets = one_hot::<T>(&[1, 4, 0], 5);
                g.cross_entropy_mean(z, &targets)
            }),
        },
        OpCase {
            name: "literal bce over softmax",
            shapes: vec![vec![3, 4]],
            scale: 1.0,
            build: Box::new(|g, s, ids| {
                let z = g.param(s, ids[0]);
                let p = g.softmax_last(z);
                let targets = one_hot::<T>(&[0, 2, 3], 4);
                g.bce_literal_mean(p, &targets)
            }),
        },
        OpCase {
            name: "gumbel soft relaxation",
            shapes: vec![vec![2, 3], vec![2, 3]],
            scale: 1.0,
            build: Box::new(|g, s, ids| {
                let z = g.param(s, ids[0]);
                let w = g.param(s, ids[1]);
                // frozen noise, fully soft path (the straight-through hard
                // sample is piecewise constant and has no meaningful fd check)
                let mut nrng = ChaCha8Rng::seed_from_u64(1234);
                let noise = gumbel_noise::<T>(&mut nrng, &[2, 3]);
                let nv = g.leaf(noise);
                let zn = g.add(z, nv)?;
                let soft = g.softmax_last(zn);
                let y = g.mul(soft, w)?;
                Ok(g.sum_all(y))
            }),
        },
    ]
}

fn run_op_checks<T: Element>(seed: u64, h: f64, tol: f64, label: &str) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for case in op_cases::<T>() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<T>::new();
        let ids: Vec<ParamId> = case
            .shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| store.add_param(&format!("p{i}"), rand_tensor(&mut rng, shape, case.scale), true))
            .collect();
        let build = &case.build;
        let mut builder = |s: &ParamStore<T>| {
            let mut g = Graph::new();
            let loss = build(&mut g, s, &ids)?;
            Ok((g, loss))
        };
        let mut worst = 0.0f64;
        let mut failed = None;
        for &id in &ids {
            match fd_check(&mut builder, &mut store, id, h) {
                Ok(err) => worst = worst.max(err),
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
        }
        match failed {
            Some(e) => out.push(check(&format!("{} grad {label}", case.name), false, e)),
            None => out.push(check(
                &format!("{} grad {label}", case.name),
                worst < tol,
                format!("max rel err {worst:.2e}"),
            )),
        }
    }
    out
}

/// Gradient check of the full miniature pipeline (soft routing, so every
/// parameter including the policy MLP gets a meaningful derivative).
pub fn pipeline_grad_check(seed: u64, coords_per_param: usize, h: f64) -> TensorResult<f64> {
    let spec = ModelSpec::mini(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let net = Classifier::build(&mut store, &mut rng, &spec)?;
    let rgb = rand_tensor::<f64>(&mut rng, &[1, 1, 3, 16, 16], 0.5);
    let evt = rand_tensor::<f64>(&mut rng, &[1, 1, 3, 16, 16], 0.5);
    let targets = one_hot::<f64>(&[2], 4);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = gumbel_noise::<f64>(&mut noise_rng, &[1, STRATEGIES]);
    let mut builder = move |s: &ParamStore<f64>| {
        let plan = RoutePlan::Soft {
            noise: noise.clone(),
            tau: 1.0,
        };
        let fwd = net.forward_with_plan(
            s,
            &rgb,
            &evt,
            &targets,
            &plan,
            LossMode::CrossEntropy,
            StreamMask::default(),
            true,
        )?;
        Ok((fwd.graph, fwd.loss))
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut coord_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| coord_rng.random_range(0..n)).collect()
        };
        let err = fd_check_sampled(&mut builder, &mut store, id, h, &coords)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn grad_suite(seed: u64) -> Report {
    let mut checks = run_op_checks::<f64>(seed, 1e-6, 1e-4, "f64");
    checks.extend(run_op_checks::<f32>(seed, 1e-2, 1e-2, "f32"));
    match pipeline_grad_check(seed, 6, 1e-6) {
        Ok(err) => checks.push(check(
            "miniature pipeline grad (sampled coords, f64)",
            err < 1e-3,
            format!("max rel err {err:.2e}"),
        )),
        Err(e) => checks.push(check("miniature pipeline grad (sampled coords, f64)", false, e.to_string())),
    }
    Report {
        suite: "grad",
        checks,
    }
}

// ---------------------------------------------------------------- fusion

pub fn fusion_suite(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut store = ParamStore::<f64>::new();
    let fusion = FusionParams::build(&mut store, &mut rng, 3, false);

    // exact algebra
    {
        let mut g = Graph::new();
        let fr = g.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let fe = g.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let mut store1 = ParamStore::<f64>::new();
        let f1p = FusionParams::build(&mut store1, &mut rng, 1, false);
        let f1 = f1p.mcf(&mut g, fr, fe).unwrap();
        let f2 = f1p.mdf(&mut g, fr, fe).unwrap();
        checks.push(check(
            "mcf([2],[3]) = [2,3]",
            g.value(f1).data() == [2.0, 3.0],
            String::new(),
        ));
        checks.push(check(
            "mdf([2],[3]) = [-4,-3]",
            g.value(f2).data() == [-4.0, -3.0],
            String::new(),
        ));
    }

    // routed output equals selected strategy exactly
    {
        let fr_t = rand_tensor::<f64>(&mut rng, &[8, 3], 1.0);
        let fe_t = rand_tensor::<f64>(&mut rng, &[8, 3], 1.0);
        let mut g = Graph::new();
        let fr = g.leaf(fr_t);
        let fe = g.leaf(fe_t);
        let noise = gumbel_noise::<f64>(&mut rng, &[8, STRATEGIES]);
        let plan = RoutePlan::Gumbel { noise, tau: 1.0 };
        let (fused, route, _) = fusion.route(&mut g, &store, fr, fe, &plan).unwrap();
        let all = [
            fusion.mcf(&mut g, fr, fe).unwrap(),
            fusion.mdf(&mut g, fr, fe).unwrap(),
            fusion.msf(&mut g, &store, fr, fe).unwrap(),
        ];
        let mut exact = true;
        for b in 0..8 {
            let choice = (0..STRATEGIES)
                .find(|&i| g.value(route).at(&[b, i]) > 0.5)
                .unwrap();
            for j in 0..6 {
                exact &= g.value(fused).at(&[b, j]) == g.value(all[choice]).at(&[b, j]);
            }
        }
        checks.push(check("routed output identical to selected strategy", exact, String::new()));
    }

    // empirical route distribution vs softmax(logits) at tau=1
    {
        let n = 100_000usize;
        let logits_row = [0.5f64, -0.3, 0.2];
        let mut z = Tensor::<f64>::zeros(&[n, 3]);
        for row in z.data_mut().chunks_mut(3) {
            row.copy_from_slice(&logits_row);
        }
        let mut g = Graph::new();
        let zv = g.leaf(z);
        let noise = gumbel_noise::<f64>(&mut rng, &[n, 3]);
        let oh = g.gumbel_softmax_st(zv, 1.0, &noise).unwrap();
        let mut hist = [0usize; 3];
        for row in g.value(oh).data().chunks(3) {
            for i in 0..3 {
                if row[i] > 0.5 {
                    hist[i] += 1;
                }
            }
        }
        let m = logits_row.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits_row.iter().map(|&v| (v - m).exp()).collect();
        let z_sum: f64 = exps.iter().sum();
        let mut max_dev = 0.0f64;
        for i in 0..3 {
            let p = exps[i] / z_sum;
            let f = hist[i] as f64 / n as f64;
            max_dev = max_dev.max((p - f).abs());
        }
        checks.push(check(
            "gumbel frequencies within 0.01 of softmax over 1e5 draws",
            max_dev < 0.01,
            format!("max dev {max_dev:.4}"),
        ));
    }

    // straight-through wiring
    {
        let mut g = Graph::new();
        let fr = g.leaf(rand_tensor::<f64>(&mut rng, &[2, 3], 1.0));
        let fe = g.leaf(rand_tensor::<f64>(&mut rng, &[2, 3], 1.0));
        let noise = gumbel_noise::<f64>(&mut rng, &[2, STRATEGIES]);
        let plan = RoutePlan::Gumbel { noise, tau: 1.0 };
        let (fused, _, logits) = fusion.route(&mut g, &store, fr, fe, &plan).unwrap();
        let loss = g.sum_all(fused);
        let grads = g.backward_retain(loss).unwrap();
        let train_grad = grads.wrt(logits).unwrap().max_abs();
        let mut g2 = Graph::new();
        let fr2 = g2.leaf(rand_tensor::<f64>(&mut rng, &[2, 3], 1.0));
        let fe2 = g2.leaf(rand_tensor::<f64>(&mut rng, &[2, 3], 1.0));
        let (fused2, _, logits2) = fusion.route(&mut g2, &store, fr2, fe2, &RoutePlan::Argmax).unwrap();
        let loss2 = g2.sum_all(fused2);
        let grads2 = g2.backward_retain(loss2).unwrap();
        let infer_grad = grads2.wrt(logits2).unwrap().max_abs();
        checks.push(check("straight-through gradient nonzero in training", train_grad > 0.0, String::new()));
        checks.push(check("routing gradient exactly zero at inference", infer_grad == 0.0, String::new()));
    }

    Report {
        suite: "fusion",
        checks,
    }
}

// ---------------------------------------------------------------- ingestion

pub fn ingest_suite(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // conservation over 1000 random streams
    let mut conserved = true;
    let mut perm_invariant = true;
    for trial in 0..1000 {
        let h = rng.random_range(2..8);
        let w = rng.random_range(2..8);
        let t_frames = rng.random_range(1..4usize);
        let timestamps: Vec<u64> = (0..t_frames).map(|i| (i as u64 + 1) * 100).collect();
        let n = rng.random_range(0..60);
        let mut points: Vec<EventPoint> = (0..n)
            .map(|_| EventPoint {
                t: rng.random_range(0..(t_frames as u64 * 100 + 50)),
                x: rng.random_range(0..w) as u16,
                y: rng.random_range(0..h) as u16,
                p: if rng.random::<bool>() { 1 } else { -1 },
            })
            .collect();
        points.sort_by_key(|e| e.t);
        let in_window = points.iter().filter(|e| e.t <= timestamps[t_frames - 1]).count();
        let stream = EventStream {
            points: points.clone(),
            needed_sort: false,
        };
        let (counts, dropped) = stack_event_counts(&stream, &timestamps, h, w).unwrap();
        let total: u32 = counts.iter().sum();
        conserved &= total as usize == in_window && dropped == n - in_window;
        if trial % 100 == 0 && n > 1 {
            // permutation invariance within windows
            let mut shuffled = points.clone();
            shuffled.reverse();
            let s2 = EventStream {
                points: shuffled,
                needed_sort: false,
            };
            let (c2, _) = stack_event_counts(&s2, &timestamps, h, w).unwrap();
            perm_invariant &= c2 == counts;
        }
    }
    checks.push(check("event-count conservation, 1000 random streams", conserved, String::new()));
    checks.push(check("stacking is permutation-invariant", perm_invariant, String::new()));

    // disk round trip on a small synthetic set
    let dir = std::env::temp_dir().join(format!(
        "heatnet-verify-ingest-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    let mut cfg = crate::events::synth::SynthConfig::clean(&dir, 3, 2, 16);
    cfg.jitter = 0;
    let round_trip = (|| -> Result<bool, crate::events::EventError> {
        crate::events::synth::synth_generate(&cfg, seed)?;
        let ds = crate::events::load_dataset(&dir, crate::events::Split::Train)?;
        if ds.is_empty() {
            return Ok(false);
        }
        let entry = &ds.entries[0];
        let s1 = crate::events::parse_events(&entry.dir.join("events.csv"))?;
        let meta = crate::events::parse_meta(&entry.dir.join("meta"))?;
        let a = crate::events::stack_events::<f64>(&s1, &meta.timestamps, meta.height, meta.width)?;
        let s2 = crate::events::parse_events(&entry.dir.join("events.csv"))?;
        let b = crate::events::stack_events::<f64>(&s2, &meta.timestamps, meta.height, meta.width)?;
        let unit_range = a.frames.data().iter().all(|v| (0.0..=1.0).contains(&v.to_f64()));
        Ok(a.counts == b.counts && s1.points == s2.points && unit_range)
    })();
    std::fs::remove_dir_all(&dir).ok();
    match round_trip {
        Ok(ok) => checks.push(check("disk round-trip bit-exact, values in [0,1]", ok, String::new())),
        Err(e) => checks.push(check("disk round-trip bit-exact, values in [0,1]", false, e.to_string())),
    }

    Report {
        suite: "ingest",
        checks,
    }
}

/// All suites in spec order.
pub fn all_suites(seed: u64) -> Vec<Report> {
    vec![
        spectral_suite(seed),
        grad_suite(seed),
        fusion_suite(seed),
        ingest_suite(seed),
    ]
}
