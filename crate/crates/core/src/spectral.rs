//! Frequency-domain heat conduction over 2D feature maps.
//!
//! Feature planes are treated as temperature fields: the forward operator
//! transforms to the cosine basis, damps each frequency by
//! `exp(-k*(wx^2+wy^2)*t)`, and transforms back. With the orthonormal DCT the
//! inverse is the transpose, so the round trip is exact and energy can only
//! decay.

use std::f64::consts::PI;

use crate::ops::matmul_into_seq;
use crate::tensor::{Element, Tensor, TensorError, TensorResult};

/// Orthonormal DCT-II matrix of size n: M[k][j] = s_k * cos(pi*(j+0.5)*k/n),
/// with s_0 = sqrt(1/n) and s_k = sqrt(2/n) otherwise. M * M^T = I.
pub fn dct_matrix<T: Element>(n: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * n);
    let s0 = (1.0 / n as f64).sqrt();
    let s = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let sk = if k == 0 { s0 } else { s };
        for j in 0..n {
            let v = sk * (PI * (j as f64 + 0.5) * k as f64 / n as f64).cos();
            data.push(T::from_f64(v));
        }
    }
    Tensor::new(vec![n, n], data).unwrap()
}

fn check_min_rank2<T: Element>(op: &'static str, x: &Tensor<T>) -> TensorResult<(usize, usize)> {
    if x.rank() < 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected at least 2 dims".into(),
        });
    }
    let h = x.dim(x.rank() - 2);
    let w = x.dim(x.rank() - 1);
    Ok((h, w))
}

/// Applies `rows` on the left and `cols^T` on the right of every trailing
/// HxW plane: out = rows * plane * cols^T. Planes are independent, so they
/// run in parallel when the total work is worth it.
fn separable_2d<T: Element>(x: &Tensor<T>, rows: &Tensor<T>, cols: &Tensor<T>) -> Tensor<T> {
    use rayon::prelude::*;
    let r = x.rank();
    let h = x.dim(r - 2);
    let w = x.dim(r - 1);
    let planes = x.len() / (h * w);
    let rd = rows.data();
    // cols^T materialized once so the inner matmul is row-major friendly
    let mut cols_t = vec![T::ZERO; w * w];
    let cd = cols.data();
    for i in 0..w {
        for j in 0..w {
            cols_t[j * w + i] = cd[i * w + j];
        }
    }
    let mut out = vec![T::ZERO; x.len()];
    let xd = x.data();
    let one = |oplane: &mut [T], p: usize| {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        let mut tmp = vec![T::ZERO; h * w];
        matmul_into_seq(rd, plane, &mut tmp, h, h, w);
        matmul_into_seq(&tmp, &cols_t, oplane, h, w, w);
    };
    if planes > 1 && planes * h * w * (h + w) >= 32 * 1024 {
        out.par_chunks_mut(h * w).enumerate().for_each(|(p, o)| one(o, p));
    } else {
        for (p, o) in out.chunks_mut(h * w).enumerate() {
            one(o, p);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Orthonormal type-II DCT over the last two axes. Parseval holds:
/// `||dct2(x)|| == ||x||`.
pub fn dct2<T: Element>(x: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (h, w) = check_min_rank2("dct2", x)?;
    let mh = dct_matrix::<T>(h);
    let mw = dct_matrix::<T>(w);
    Ok(separable_2d(x, &mh, &mw))
}

/// Exact inverse of [`dct2`] (type-III with matching normalization, i.e. the
/// transpose transform).
pub fn idct2<T: Element>(x: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (h, w) = check_min_rank2("idct2", x)?;
    let mh = dct_matrix::<T>(h).permute(&[1, 0]).unwrap();
    let mw = dct_matrix::<T>(w).permute(&[1, 0]).unwrap();
    Ok(separable_2d(x, &mh, &mw))
}

/// DCT-native discretization of the spatial frequencies: omega[i] = pi*i/n.
#[derive(Debug, Clone)]
pub struct FrequencyGrid {
    pub h: usize,
    pub w: usize,
    /// Frequencies along the height axis, pi*h/H.
    pub omega_x: Vec<f64>,
    /// Frequencies along the width axis, pi*w/W.
    pub omega_y: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(h: usize, w: usize) -> Self {
        FrequencyGrid {
            h,
            w,
            omega_x: (0..h).map(|i| PI * i as f64 / h as f64).collect(),
            omega_y: (0..w).map(|i| PI * i as f64 / w as f64).collect(),
        }
    }

    /// omega_x^2 + omega_y^2 as an [H,W] tensor.
    pub fn omega_sq<T: Element>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.h * self.w);
        for &ox in &self.omega_x {
            for &oy in &self.omega_y {
                data.push(T::from_f64(ox * ox + oy * oy));
            }
        }
        Tensor::new(vec![self.h, self.w], data).unwrap()
    }
}

/// Per-channel, per-frequency decay coefficients `exp(-k*(wx^2+wy^2)*t)`.
///
/// Entries live in (0, 1]; the DC entry is exactly 1, so the spatial mean of
/// a field is conserved by the heat operator.
#[derive(Debug, Clone)]
pub struct DecayMatrix<T: Element> {
    pub values: Tensor<T>,
    pub k: Tensor<T>,
    pub t: f64,
}

/// Builds the decay matrix from a frequency grid and a non-negative
/// diffusivity field k of shape [C,H,W].
pub fn build_decay<T: Element>(
    grid: &FrequencyGrid,
    k: &Tensor<T>,
    t: f64,
) -> TensorResult<DecayMatrix<T>> {
    if k.rank() != 3 || k.dim(1) != grid.h || k.dim(2) != grid.w {
        return Err(TensorError::ShapeMismatch {
            op: "build_decay",
            left: k.shape().to_vec(),
            right: vec![k.dim(0), grid.h, grid.w],
        });
    }
    if t <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "build_decay",
            reason: format!("diffusion time must be positive, got {t}"),
        });
    }
    if k.data().iter().any(|v| v.to_f64() < 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "build_decay",
            reason: "diffusivity k must be non-negative".into(),
        });
    }
    let c = k.dim(0);
    let om = grid.omega_sq::<T>();
    let omd = om.data();
    let hw = grid.h * grid.w;
    let mut data = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let kd = &k.data()[ch * hw..(ch + 1) * hw];
        for (kv, ov) in kd.iter().zip(omd) {
            let e = (-kv.to_f64() * ov.to_f64() * t).exp();
            data.push(T::from_f64(e));
        }
    }
    Ok(DecayMatrix {
        values: Tensor::new(vec![c, grid.h, grid.w], data).unwrap(),
        k: k.clone(),
        t,
    })
}

/// Heat conduction step: out = idct2(dct2(u0) .* decay), per channel.
pub fn hco_forward<T: Element>(u0: &Tensor<T>, decay: &DecayMatrix<T>) -> TensorResult<Tensor<T>> {
    if u0.rank() != 4 || u0.shape()[1..] != *decay.values.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "hco_forward",
            left: u0.shape().to_vec(),
            right: decay.values.shape().to_vec(),
        });
    }
    let freq = dct2(u0)?;
    let damped = crate::ops::mul_bcast_batch(&freq, &decay.values)?;
    idct2(&damped)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(N^2) evaluation of the DCT-II definition, independent of the
    /// separable matrix-product implementation path.
    fn dct2_brute(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
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

    fn lcg(seed: &mut u64) -> f64 {
        // xorshift64*, mapped to [-1, 1)
        let mut x = *seed;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        *seed = x;
        let v = (x.wrapping_mul(0x2545F4914F6CDD1D) >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * v - 1.0
    }

    #[test]
    fn dct2_constant_field_is_dc_only() {
        let c = 3.25;
        let x = Tensor::<f64>::full(&[5, 7], c);
        let y = dct2(&x).unwrap();
        let expected = c * (35.0f64).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-12);
        for &v in &y.data()[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn dct2_matches_brute_force_2x2() {
        let x = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fast = dct2(&x).unwrap();
        let brute = dct2_brute(&x, 2, 2);
        assert!(fast.max_abs_diff(&brute) < 1e-12);
    }

    #[test]
    fn dct2_matches_brute_force_random_4x4() {
        let mut seed = 0xC0FFEE;
        let x = Tensor::<f64>::from_fn(&[4, 4], |_| lcg(&mut seed));
        let fast = dct2(&x).unwrap();
        let brute = dct2_brute(&x, 4, 4);
        assert!(fast.max_abs_diff(&brute) < 1e-12);
    }

    #[test]
    fn idct2_round_trip_7x5() {
        let mut seed = 99;
        let x = Tensor::<f64>::from_fn(&[7, 5], |_| lcg(&mut seed));
        let back = idct2(&dct2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn idct2_of_zeros_is_zeros() {
        let x = Tensor::<f64>::zeros(&[4, 4]);
        assert!(idct2(&x).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn idct2_of_scaled_dc_is_ones() {
        let mut x = Tensor::<f64>::zeros(&[3, 4]);
        x.data_mut()[0] = (12.0f64).sqrt();
        let y = idct2(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dct2_is_isometry() {
        let mut seed = 7;
        let x = Tensor::<f64>::from_fn(&[2, 6, 9], |_| lcg(&mut seed));
        let y = dct2(&x).unwrap();
        assert!((y.l2_norm() - x.l2_norm()).abs() < 1e-6);
    }

    #[test]
    fn grid_frequencies_start_at_zero_increasing() {
        let g = FrequencyGrid::new(4, 6);
        assert_eq!(g.omega_x[0], 0.0);
        assert_eq!(g.omega_y[0], 0.0);
        assert!(g.omega_x.windows(2).all(|w| w[0] < w[1]));
        assert!(g.omega_y.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn build_decay_zero_k_is_all_ones() {
        let g = FrequencyGrid::new(3, 3);
        let k = Tensor::<f64>::zeros(&[2, 3, 3]);
        let d = build_decay(&g, &k, 1.0).unwrap();
        for &v in d.values.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn build_decay_dc_entry_is_one() {
        let g = FrequencyGrid::new(4, 4);
        let k = Tensor::<f64>::full(&[1, 4, 4], 17.3);
        let d = build_decay(&g, &k, 2.5).unwrap();
        assert_eq!(d.values.data()[0], 1.0);
        for &v in d.values.data() {
            assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn build_decay_scalar_value() {
        // k=1, t=1, wx=pi/2, wy=0 -> exp(-pi^2/4)
        let g = FrequencyGrid::new(2, 2);
        let k = Tensor::<f64>::ones(&[1, 2, 2]);
        let d = build_decay(&g, &k, 1.0).unwrap();
        // entry (h=1, w=0): omega_x = pi/2, omega_y = 0
        let expected = (-(PI * PI) / 4.0).exp();
        assert!((d.values.at(&[0, 1, 0]) - expected).abs() < 1e-12);
        assert!((expected - 0.0848).abs() < 1e-4);
    }

    #[test]
    fn build_decay_rejects_bad_inputs() {
        let g = FrequencyGrid::new(2, 2);
        let mut k = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(build_decay(&g, &k, 0.0).is_err());
        k.data_mut()[1] = -0.5;
        assert!(build_decay(&g, &k, 1.0).is_err());
    }

    #[test]
    fn decay_monotone_along_axes_for_uniform_k() {
        let g = FrequencyGrid::new(5, 6);
        let k = Tensor::<f64>::full(&[1, 5, 6], 0.7);
        let d = build_decay(&g, &k, 1.3).unwrap();
        for i in 0..5 {
            for j in 1..6 {
                assert!(d.values.at(&[0, i, j]) <= d.values.at(&[0, i, j - 1]));
            }
        }
        for j in 0..6 {
            for i in 1..5 {
                assert!(d.values.at(&[0, i, j]) <= d.values.at(&[0, i - 1, j]));
            }
        }
    }

    #[test]
    fn hco_zero_diffusivity_is_identity() {
        let mut seed = 5;
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |_| lcg(&mut seed));
        let g = FrequencyGrid::new(4, 4);
        let k = Tensor::<f64>::zeros(&[3, 4, 4]);
        let d = build_decay(&g, &k, 1.0).unwrap();
        let y = hco_forward(&x, &d).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn hco_infinite_time_leaves_mean_field() {
        let mut seed = 21;
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |_| lcg(&mut seed));
        let g = FrequencyGrid::new(4, 4);
        let k = Tensor::<f64>::ones(&[2, 4, 4]);
        let d = build_decay(&g, &k, 1e6 / (PI * PI / 16.0)).unwrap();
        let y = hco_forward(&x, &d).unwrap();
        for c in 0..2 {
            let mut mean = 0.0;
            for i in 0..16 {
                mean += x.data()[c * 16 + i];
            }
            mean /= 16.0;
            for i in 0..16 {
                assert!((y.data()[c * 16 + i] - mean).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn hco_matches_matrix_oracle() {
        // explicit dense evaluation: dct -> decay -> idct with brute loops
        let mut seed = 1234;
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| lcg(&mut seed));
        let g = FrequencyGrid::new(4, 4);
        let k = Tensor::<f64>::ones(&[1, 4, 4]);
        let d = build_decay(&g, &k, 0.5).unwrap();
        let fast = hco_forward(&x, &d).unwrap();

        let plane = Tensor::<f64>::new(vec![4, 4], x.data().to_vec()).unwrap();
        let freq = dct2_brute(&plane, 4, 4);
        let mut damped = vec![0.0; 16];
        for i in 0..16 {
            damped[i] = freq.data()[i] * d.values.data()[i];
        }
        // inverse via transpose: u[n,m] = sum_kl damped[k,l]*sk*sl*cos(...)cos(...)
        let mut back = vec![0.0; 16];
        for n in 0..4 {
            for m in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    for l in 0..4 {
                        let sk = if k == 0 { (1.0 / 4.0f64).sqrt() } else { (2.0 / 4.0f64).sqrt() };
                        let sl = if l == 0 { (1.0 / 4.0f64).sqrt() } else { (2.0 / 4.0f64).sqrt() };
                        acc += damped[k * 4 + l]
                            * sk
                            * sl
                            * (PI * (n as f64 + 0.5) * k as f64 / 4.0).cos()
                            * (PI * (m as f64 + 0.5) * l as f64 / 4.0).cos();
                    }
                }
                back[n * 4 + m] = acc;
            }
        }
        for i in 0..16 {
            assert!((fast.data()[i] - back[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn hco_semigroup_composition() {
        let mut seed = 77;
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |_| lcg(&mut seed));
        let g = FrequencyGrid::new(5, 5);
        let k = Tensor::<f64>::from_fn(&[2, 5, 5], |_| lcg(&mut seed).abs());
        let (t1, t2) = (0.4, 1.1);
        let once =
            hco_forward(&hco_forward(&x, &build_decay(&g, &k, t1).unwrap()).unwrap(), &build_decay(&g, &k, t2).unwrap())
                .unwrap();
        let joint = hco_forward(&x, &build_decay(&g, &k, t1 + t2).unwrap()).unwrap();
        assert!(once.max_abs_diff(&joint) < 1e-5);
    }

    #[test]
    fn hco_energy_non_expansion_and_mean_conservation() {
        let mut seed = 31;
        let x = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |_| lcg(&mut seed));
        let g = FrequencyGrid::new(6, 6);
        let k = Tensor::<f64>::from_fn(&[1, 6, 6], |_| 0.1 + lcg(&mut seed).abs());
        let d = build_decay(&g, &k, 1.0).unwrap();
        let y = hco_forward(&x, &d).unwrap();
        assert!(y.l2_norm() <= x.l2_norm());
        let mx: f64 = x.data().iter().sum::<f64>() / 36.0;
        let my: f64 = y.data().iter().sum::<f64>() / 36.0;
        assert!((mx - my).abs() < 1e-6);
    }

    #[test]
    fn hco_linearity() {
        let mut seed = 3;
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| lcg(&mut seed));
        let y = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| lcg(&mut seed));
        let g = FrequencyGrid::new(4, 4);
        let k = Tensor::<f64>::full(&[1, 4, 4], 0.6);
        let d = build_decay(&g, &k, 1.0).unwrap();
        let (a, b) = (1.7, -0.4);
        let mixed = x.zip_map(&y, "mix", |u, v| a * u + b * v).unwrap();
        let lhs = hco_forward(&mixed, &d).unwrap();
        let hx = hco_forward(&x, &d).unwrap();
        let hy = hco_forward(&y, &d).unwrap();
        let rhs = hx.zip_map(&hy, "mix", |u, v| a * u + b * v).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }
}
