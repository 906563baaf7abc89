//! Analytic cost accounting and the wall-clock scaling harness.
//!
//! FLOPs count one multiply-add as two operations. The heat-conduction layer
//! costs 2*C*H*W*(H+W) per transform direction (separable dense DCT) plus
//! C*H*W for the frequency-domain decay product, so its wall time grows as
//! N^1.5 in the token count N = H*W. A deliberately naive dense-attention
//! layer is bundled purely as the quadratic yardstick.

use std::time::Instant;

use crate::model::ModelSpec;
use crate::ops;
use crate::spectral::{build_decay, hco_forward, FrequencyGrid};
use crate::tensor::{Element, Tensor, TensorError, TensorResult};

/// Analytic and measured costs for one configuration.
#[derive(Debug, Clone)]
pub struct CostReport {
    /// Analytic FLOPs of one forward pass over a single frame pair.
    pub flops: u64,
    /// Trainable plus buffer scalars in the full two-stream model.
    pub params: u64,
    /// Median wall time of the stage-1 heat layer over warm runs.
    pub wall_ms: f64,
    /// Stage-1 token count H*W.
    pub tokens: usize,
    /// Per-component FLOPs, labelled.
    pub breakdown: Vec<(String, u64)>,
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<28} {:>16}\n", "component", "flops"));
        for (name, f) in &self.breakdown {
            s.push_str(&format!("{name:<28} {f:>16}\n"));
        }
        s.push_str(&format!("{:<28} {:>16}\n", "total", self.flops));
        s.push_str(&format!(
            "params {}  tokens {}  stage1-layer median {:.3} ms\n",
            self.params, self.tokens, self.wall_ms
        ));
        s
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "flops={}\nparams={}\nwall_ms={}\ntokens={}\ngflops={:.3}\nparams_m={:.3}\n",
            self.flops,
            self.params,
            self.wall_ms,
            self.tokens,
            self.flops as f64 / 1e9,
            self.params as f64 / 1e6
        )
    }
}

/// dct2 (or idct2) over [C,H,W]: 2*C*H*W*(H+W) flops per direction.
pub fn dct2_flops(c: usize, h: usize, w: usize) -> u64 {
    2 * (c as u64) * (h as u64) * (w as u64) * ((h + w) as u64)
}

/// Full heat-conduction step: both transform directions plus the decay
/// product.
pub fn hco_flops(c: usize, h: usize, w: usize) -> u64 {
    2 * dct2_flops(c, h, w) + (c * h * w) as u64
}

fn linear_flops(rows: u64, cin: u64, cout: u64) -> u64 {
    2 * rows * cin * cout
}

fn conv2d_flops(cin: u64, cout: u64, k: u64, oh: u64, ow: u64) -> u64 {
    2 * cout * cin * k * k * oh * ow
}

/// Parameter count of a linear with bias.
pub fn linear_params(cin: usize, cout: usize) -> u64 {
    (cin * cout + cout) as u64
}

/// Analytic cost of one forward pass (single frame pair, both modalities)
/// plus the exact parameter count of the full model.
pub fn count_costs(spec: &ModelSpec) -> TensorResult<CostReport> {
    spec.validate()?;
    let channels = spec.stage_channels();
    let res = spec.stage_resolutions();
    let d = spec.fve_dim as u64;
    let mut breakdown: Vec<(String, u64)> = Vec::new();
    let mut params: u64 = 0;

    // stems (per modality)
    let r2 = (spec.resolution / 2) as u64;
    let r4 = (spec.resolution / 4) as u64;
    let mid = (channels[0] / 2).max(1) as u64;
    let c_in = spec.in_channels as u64;
    let stem_flops = conv2d_flops(c_in, mid, 3, r2, r2) + conv2d_flops(mid, channels[0] as u64, 3, r4, r4);
    breakdown.push(("stem (x2 modalities)".into(), 2 * stem_flops));
    // conv weights + biases + bn affine and buffers
    params += 2 * ((mid * c_in * 9 + mid) + (channels[0] as u64 * mid * 9 + channels[0] as u64));
    params += 2 * (4 * mid + 4 * channels[0] as u64);

    // stages
    for (s, (&c, &depth)) in channels.iter().zip(&spec.stage_depths).enumerate() {
        let (cu, ru) = (c as u64, res[s] as u64);
        let hw = ru * ru;
        let per_mod_block = 2 * 9 * cu * hw                  // depthwise conv (shared weights, run per stream)
            + linear_flops(hw, cu, 2 * cu)                    // in-projection
            + linear_flops(hw, d, cu)                         // diffusivity predictor over the FVE grid
            + hco_flops(c, res[s], res[s])                    // heat mix
            + linear_flops(hw, cu, cu)                        // gate
            + linear_flops(hw, cu, cu)                        // out
            + 10 * cu * hw; // norms, activations, elementwise
        let block_total = 2 * per_mod_block;
        breakdown.push((format!("stage{} blocks x{depth}", s + 1), depth as u64 * block_total));
        // params: dw shared; per-modality linears, norms, k-predictor
        let block_params = (9 * cu + cu)
            + 2 * (linear_params(c, 2 * c) + 2 * cu + linear_params(c, c) + linear_params(c, c) + linear_params(spec.fve_dim, c));
        params += depth as u64 * block_params;
        if s + 1 < channels.len() {
            let rn = res[s + 1] as u64;
            let cn = channels[s + 1] as u64;
            let down = conv2d_flops(cu, cn, 3, rn, rn);
            breakdown.push((format!("down{} (x2 modalities)", s + 1), 2 * down));
            params += 2 * ((cn * cu * 9 + cn) + 2 * cn);
            // fve projection: depthwise on D channels
            breakdown.push((format!("fve proj{} (x2)", s + 1), 2 * 2 * 9 * d * rn * rn));
            params += 2 * (9 * d + d);
        }
    }
    // fve tables
    params += 2 * (res[0] * res[0]) as u64 * d;

    // fusion + head on pooled features
    let c_out = spec.feature_dim() as u64;
    let fused = 2 * c_out;
    let fusion_flops = linear_flops(1, fused, fused) + linear_flops(1, fused, 3) // policy
        + linear_flops(1, fused, if spec.msf_per_channel { fused } else { 2 })   // gates
        + 8 * fused;
    breakdown.push(("fusion".into(), fusion_flops));
    params += linear_params(2 * spec.feature_dim(), 2 * spec.feature_dim())
        + linear_params(2 * spec.feature_dim(), 3)
        + linear_params(2 * spec.feature_dim(), if spec.msf_per_channel { 2 * spec.feature_dim() } else { 2 });
    let head_flops = linear_flops(1, fused, spec.num_classes as u64) + 8 * fused;
    breakdown.push(("head".into(), head_flops));
    params += 2 * fused + linear_params(2 * spec.feature_dim(), spec.num_classes);

    let flops = breakdown.iter().map(|(_, f)| f).sum();
    // measured probe: stage-1 heat layer at desk-safe sizes
    let probe_side = res[0].min(64);
    let wall_ms = time_hco_layer::<f32>(channels[0].min(32), probe_side, 11, 2);
    Ok(CostReport {
        flops,
        params,
        wall_ms,
        tokens: res[0] * res[0],
        breakdown,
    })
}

/// Median wall-clock of `f` over `runs` timed executions after `warmup`
/// discarded ones.
pub fn measure_median_ms(mut f: impl FnMut(), runs: usize, warmup: usize) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

fn time_hco_layer<T: Element>(c: usize, side: usize, runs: usize, warmup: usize) -> f64 {
    let grid = FrequencyGrid::new(side, side);
    let k = Tensor::<T>::full(&[c, side, side], T::from_f64(0.7));
    let decay = build_decay(&grid, &k, 1.0).unwrap();
    let x = Tensor::<T>::from_fn(&[1, c, side, side], |i| T::from_f64(((i % 13) as f64) / 13.0 - 0.5));
    measure_median_ms(
        || {
            let y = hco_forward(&x, &decay).unwrap();
            std::hint::black_box(&y);
        },
        runs,
        warmup,
    )
}

/// Naive dense self-attention over N tokens of width d: QKV projections,
/// full N x N score matrix, softmax, value mix. Quadratic by construction.
pub fn naive_attention<T: Element>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    if x.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op: "naive_attention",
            shape: x.shape().to_vec(),
            reason: "expected [N,d]".into(),
        });
    }
    let d = x.dim(1);
    let q = ops::matmul(x, wq)?;
    let k = ops::matmul(x, wk)?;
    let v = ops::matmul(x, wv)?;
    let kt = k.permute(&[1, 0])?;
    let scores = ops::matmul(&q, &kt)?;
    let scaled = ops::scale(&scores, 1.0 / (d as f64).sqrt());
    let attn = ops::softmax_last(&scaled);
    ops::matmul(&attn, &v)
}

/// One measured point of the scaling sweep.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub side: usize,
    pub tokens: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub hco: Vec<ScalingRow>,
    pub attention: Vec<ScalingRow>,
    pub hco_slope: f64,
    pub attention_slope: f64,
    /// Set when run-to-run spread exceeded 20% of the median anywhere;
    /// results should then be re-measured.
    pub rerun_advisory: bool,
    /// True when timing ran on the caller's (possibly parallel) pool instead
    /// of the default single thread.
    pub parallel: bool,
}

impl ScalingReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<12} {:>10} {:>14} {:>14}\n",
            "resolution", "tokens", "hco ms", "attention ms"
        ));
        for (h, a) in self.hco.iter().zip(&self.attention) {
            s.push_str(&format!(
                "{:<12} {:>10} {:>14.3} {:>14.3}\n",
                format!("{0}x{0}", h.side),
                h.tokens,
                h.wall_ms,
                a.wall_ms
            ));
        }
        s.push_str(&format!(
            "log-log slope: hco {:.3}, attention {:.3}{}{}\n",
            self.hco_slope,
            self.attention_slope,
            if self.rerun_advisory { "  (high variance, rerun advised)" } else { "" },
            if self.parallel { "  (parallel timing; slopes less stable)" } else { "" }
        ));
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for r in &self.hco {
            s.push_str(&format!("hco_ms_{}={}\n", r.tokens, r.wall_ms));
        }
        for r in &self.attention {
            s.push_str(&format!("attention_ms_{}={}\n", r.tokens, r.wall_ms));
        }
        s.push_str(&format!("hco_slope={}\n", self.hco_slope));
        s.push_str(&format!("attention_slope={}\n", self.attention_slope));
        s.push_str(&format!("rerun_advisory={}\n", self.rerun_advisory));
        s.push_str(&format!("parallel={}\n", self.parallel));
        s
    }
}

/// Least-squares slope of ln(time) against ln(tokens).
pub fn fit_loglog_slope(rows: &[ScalingRow]) -> f64 {
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| (r.tokens as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.wall_ms.max(1e-9).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Times the heat layer and the attention yardstick over square resolutions
/// and fits their log-log scaling exponents. Runs on a dedicated
/// single-thread pool unless `parallel` is set (recorded in the report).
pub fn scaling_bench(
    sides: &[usize],
    channels: usize,
    attn_dim: usize,
    runs: usize,
    parallel: bool,
) -> TensorResult<ScalingReport> {
    if parallel {
        let mut r = scaling_bench_inner(sides, channels, attn_dim, runs)?;
        r.parallel = true;
        return Ok(r);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool");
    pool.install(|| scaling_bench_inner(sides, channels, attn_dim, runs))
}

fn scaling_bench_inner(sides: &[usize], channels: usize, attn_dim: usize, runs: usize) -> TensorResult<ScalingReport> {
    if sides.len() < 3 {
        return Err(TensorError::InvalidArgument {
            op: "scaling_bench",
            reason: format!("need >=3 resolutions, got {}", sides.len()),
        });
    }
    let runs = runs.max(10);
    let mut hco = Vec::new();
    let mut attention = Vec::new();
    let mut advisory = false;
    for &side in sides {
        let tokens = side * side;
        // heat layer over [1,C,side,side]
        let grid = FrequencyGrid::new(side, side);
        let k = Tensor::<f32>::full(&[channels, side, side], 0.7);
        let decay = build_decay(&grid, &k, 1.0)?;
        let x = Tensor::<f32>::from_fn(&[1, channels, side, side], |i| ((i % 17) as f32) / 17.0 - 0.5);
        let (ms, spread) = measure_with_spread(
            || {
                let y = hco_forward(&x, &decay).unwrap();
                std::hint::black_box(&y);
            },
            runs,
        );
        advisory |= spread > 0.2;
        hco.push(ScalingRow {
            side,
            tokens,
            wall_ms: ms,
        });
        // attention over [tokens, d]
        let xa = Tensor::<f32>::from_fn(&[tokens, attn_dim], |i| ((i % 23) as f32) / 23.0 - 0.5);
        let wq = Tensor::<f32>::from_fn(&[attn_dim, attn_dim], |i| ((i % 7) as f32) / 70.0);
        let wk = Tensor::<f32>::from_fn(&[attn_dim, attn_dim], |i| ((i % 11) as f32) / 110.0);
        let wv = Tensor::<f32>::from_fn(&[attn_dim, attn_dim], |i| ((i % 5) as f32) / 50.0);
        let (ms, spread) = measure_with_spread(
            || {
                let y = naive_attention(&xa, &wq, &wk, &wv).unwrap();
                std::hint::black_box(&y);
            },
            runs,
        );
        advisory |= spread > 0.2;
        attention.push(ScalingRow {
            side,
            tokens,
            wall_ms: ms,
        });
    }
    Ok(ScalingReport {
        hco_slope: fit_loglog_slope(&hco),
        attention_slope: fit_loglog_slope(&attention),
        hco,
        attention,
        rerun_advisory: advisory,
        parallel: false,
    })
}

/// (median, interquartile spread / median) over `runs` timed calls with two
/// warmup executions.
fn measure_with_spread(mut f: impl FnMut(), runs: usize) -> (f64, f64) {
    for _ in 0..2 {
        f();
    }
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let q1 = times[times.len() / 4];
    let q3 = times[(times.len() * 3) / 4];
    (median, (q3 - q1) / median.max(1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::net::Classifier;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dct2_flops_formula_instance() {
        // C=1, 4x4: 2*1*16*(4+4) = 256 per direction
        assert_eq!(dct2_flops(1, 4, 4), 256);
    }

    #[test]
    fn linear_param_count() {
        // C -> 2C with bias: 2C^2 + 2C
        let c = 32;
        assert_eq!(linear_params(c, 2 * c), (2 * c * c + 2 * c) as u64);
    }

    #[test]
    fn analytic_params_match_built_store() {
        let spec = ModelSpec::desk(4);
        let report = count_costs(&spec).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _net = Classifier::build(&mut store, &mut rng, &spec).unwrap();
        let actual: u64 = store.iter().map(|(_, p)| p.value.len() as u64).sum();
        assert_eq!(report.params, actual);
    }

    #[test]
    fn reports_are_deterministic_in_flops() {
        let spec = ModelSpec::desk(4);
        let a = count_costs(&spec).unwrap();
        let b = count_costs(&spec).unwrap();
        assert_eq!(a.flops, b.flops);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn full_size_config_magnitudes() {
        // order-of-magnitude only: tens of GFLOPs per frame pair, tens of
        // millions of parameters
        let spec = ModelSpec::full(300);
        let r = count_costs(&spec).unwrap();
        let gflops = r.flops as f64 / 1e9;
        let params_m = r.params as f64 / 1e6;
        assert!((10.0..=100.0).contains(&gflops), "gflops {gflops}");
        assert!((10.0..=100.0).contains(&params_m), "params {params_m}M");
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let rows: Vec<ScalingRow> = [(32usize, 1.0f64), (64, 8.0), (128, 64.0)]
            .iter()
            .map(|&(side, ms)| ScalingRow {
                side,
                tokens: side * side,
                wall_ms: ms,
            })
            .collect();
        // time ~ tokens^1.5 exactly
        let slope = fit_loglog_slope(&rows);
        assert!((slope - 1.5).abs() < 1e-9);
    }

    #[test]
    fn attention_output_shape() {
        let x = Tensor::<f64>::from_fn(&[6, 4], |i| (i as f64) / 10.0);
        let w = Tensor::<f64>::from_fn(&[4, 4], |i| ((i % 3) as f64) / 5.0);
        let y = naive_attention(&x, &w, &w, &w).unwrap();
        assert_eq!(y.shape(), &[6, 4]);
    }

    #[test]
    fn scaling_bench_needs_three_points() {
        assert!(scaling_bench(&[8, 16], 4, 8, 10, true).is_err());
    }
}
