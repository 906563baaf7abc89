//! Raw numeric kernels shared by the forward path and the backward rules.
//!
//! Kernels are pure: inputs are borrowed, outputs are fresh tensors. Heavy
//! loops parallelize over disjoint output regions, so results are identical
//! regardless of thread count.

use rayon::prelude::*;

use crate::tensor::{shape_len, Element, Tensor, TensorError, TensorResult};

/// Below this many output elements the sequential path wins.
const PAR_THRESHOLD: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Silu,
    Gelu,
    Exp,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Sum,
    Max,
    Argmax,
}

pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    // 1 / (1 + e^-x), split by sign for stability
    if x.to_f64() >= 0.0 {
        let e = x.neg().exp();
        T::ONE.div(T::ONE.add(e))
    } else {
        let e = x.exp();
        e.div(T::ONE.add(e))
    }
}

pub fn silu_scalar<T: Element>(x: T) -> T {
    x.mul(sigmoid_scalar(x))
}

/// GeLU via the tanh approximation.
pub fn gelu_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let x3 = x.mul(x).mul(x);
    let inner = c.mul(x.add(k.mul(x3)));
    let half = T::from_f64(0.5);
    half.mul(x).mul(T::ONE.add(inner.tanh()))
}

pub fn softplus_scalar<T: Element>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|)
    let m = x.maximum(T::ZERO);
    m.add(x.abs().neg().exp().ln_1p())
}

pub fn unary<T: Element>(op: UnaryOp, x: &Tensor<T>) -> Tensor<T> {
    match op {
        UnaryOp::Sigmoid => x.map(sigmoid_scalar),
        UnaryOp::Silu => x.map(silu_scalar),
        UnaryOp::Gelu => x.map(gelu_scalar),
        UnaryOp::Exp => x.map(|v| v.exp()),
        UnaryOp::Softplus => x.map(softplus_scalar),
    }
}

/// Derivative of a unary op at `x` (elementwise).
pub fn unary_grad<T: Element>(op: UnaryOp, x: &Tensor<T>) -> Tensor<T> {
    match op {
        UnaryOp::Sigmoid => x.map(|v| {
            let s = sigmoid_scalar(v);
            s.mul(T::ONE.sub(s))
        }),
        UnaryOp::Silu => x.map(|v| {
            let s = sigmoid_scalar(v);
            s.add(v.mul(s).mul(T::ONE.sub(s)))
        }),
        UnaryOp::Gelu => x.map(|v| {
            let c = T::from_f64(0.7978845608028654);
            let k = T::from_f64(0.044715);
            let v2 = v.mul(v);
            let inner = c.mul(v.add(k.mul(v2).mul(v)));
            let t = inner.tanh();
            let sech2 = T::ONE.sub(t.mul(t));
            let half = T::from_f64(0.5);
            let three_k = T::from_f64(3.0 * 0.044715);
            half.mul(T::ONE.add(t))
                .add(half.mul(v).mul(sech2).mul(c).mul(T::ONE.add(three_k.mul(v2))))
        }),
        UnaryOp::Exp => x.map(|v| v.exp()),
        UnaryOp::Softplus => x.map(sigmoid_scalar),
    }
}

pub fn binary<T: Element>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    match op {
        BinaryOp::Add => a.zip_map(b, "add", |x, y| x.add(y)),
        BinaryOp::Sub => a.zip_map(b, "sub", |x, y| x.sub(y)),
        BinaryOp::Mul => a.zip_map(b, "mul", |x, y| x.mul(y)),
    }
}

/// Unified elementwise entry: binary ops take two same-shape tensors, unary
/// ops exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Silu,
    Gelu,
    Exp,
}

pub fn elementwise<T: Element>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> TensorResult<Tensor<T>> {
    let uop = match op {
        ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => {
            let rhs = b.ok_or_else(|| TensorError::InvalidArgument {
                op: "elementwise",
                reason: format!("{op:?} needs a second operand"),
            })?;
            let bop = match op {
                ElementwiseOp::Add => BinaryOp::Add,
                ElementwiseOp::Sub => BinaryOp::Sub,
                _ => BinaryOp::Mul,
            };
            return binary(bop, a, rhs);
        }
        ElementwiseOp::Sigmoid => UnaryOp::Sigmoid,
        ElementwiseOp::Silu => UnaryOp::Silu,
        ElementwiseOp::Gelu => UnaryOp::Gelu,
        ElementwiseOp::Exp => UnaryOp::Exp,
    };
    if b.is_some() {
        return Err(TensorError::InvalidArgument {
            op: "elementwise",
            reason: format!("{op:?} takes one operand"),
        });
    }
    Ok(unary(uop, a))
}

pub fn scale<T: Element>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    x.map(|v| v.mul(c))
}

pub fn add_scalar<T: Element>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    x.map(|v| v.add(c))
}

/// C[m,n] = A[m,k] * B[k,n], row-major ikj loop.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    let mut out = vec![T::ZERO; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// out[m,n] += a[m,k] * b[k,n] over raw row-major slices. Parallel work is
/// split into row blocks large enough to amortize task overhead.
pub(crate) fn matmul_into<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let block = |out_block: &mut [T], row0: usize| {
        for (r, out_row) in out_block.chunks_mut(n).enumerate() {
            let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (kk, &av) in a_row.iter().enumerate() {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = o.add(av.mul(bv));
                }
            }
        }
    };
    let rows_per_block = (PAR_THRESHOLD / (k * n).max(1)).clamp(1, m);
    if m * k * n >= 4 * PAR_THRESHOLD && m > rows_per_block {
        out.par_chunks_mut(rows_per_block * n)
            .enumerate()
            .for_each(|(i, blk)| block(blk, i * rows_per_block));
    } else {
        block(out, 0);
    }
}

/// Strictly sequential variant for callers that parallelize at a coarser
/// granularity.
pub(crate) fn matmul_into_seq<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let _ = m;
    for (r, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[r * k..(r + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = o.add(av.mul(bv));
            }
        }
    }
}

pub(crate) fn transpose2d<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Affine map over the last axis: y[..., j] = sum_i x[..., i] w[i, j] + b[j].
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let cin = *x.shape().last().ok_or_else(|| TensorError::InvalidShape {
        op: "linear",
        shape: x.shape().to_vec(),
        reason: "rank-0 input".into(),
    })?;
    if w.rank() != 2 || w.dim(0) != cin {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let cout = w.dim(1);
    if b.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let rows = x.len() / cin;
    let mut out = vec![T::ZERO; rows * cout];
    for r in out.chunks_mut(cout) {
        r.copy_from_slice(b.data());
    }
    matmul_into(x.data(), w.data(), &mut out, rows, cin, cout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)
}

/// Accumulates dw[cin,cout] += x^T g over row blocks with the small dw held
/// hot in cache; parallel blocks produce partials summed in fixed order.
fn outer_accumulate<T: Element>(xd: &[T], gd: &[T], rows: usize, cin: usize, cout: usize) -> Vec<T> {
    let block = |r0: usize, r1: usize| {
        let mut acc = vec![T::ZERO; cin * cout];
        for r in r0..r1 {
            let x_row = &xd[r * cin..(r + 1) * cin];
            let g_row = &gd[r * cout..(r + 1) * cout];
            for (i, &xv) in x_row.iter().enumerate() {
                let dst = &mut acc[i * cout..(i + 1) * cout];
                for (o, &gv) in dst.iter_mut().zip(g_row) {
                    *o = o.add(xv.mul(gv));
                }
            }
        }
        acc
    };
    if rows * cin * cout >= 4 * PAR_THRESHOLD && rows >= 8 {
        let nblocks = rayon::current_num_threads().max(1) * 2;
        let per = rows.div_ceil(nblocks);
        let partials: Vec<Vec<T>> = (0..nblocks)
            .into_par_iter()
            .map(|b| block(b * per, ((b + 1) * per).min(rows)))
            .collect();
        let mut dw = vec![T::ZERO; cin * cout];
        for p in partials {
            for (o, v) in dw.iter_mut().zip(p) {
                *o = o.add(v);
            }
        }
        dw
    } else {
        block(0, rows)
    }
}

/// Backward of `linear`: returns (dx, dw, db).
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let cin = w.dim(0);
    let cout = w.dim(1);
    let rows = x.len() / cin;
    // dx = g . w^T
    let wt = transpose2d(w.data(), cin, cout);
    let mut dx = vec![T::ZERO; rows * cin];
    matmul_into(g.data(), &wt, &mut dx, rows, cout, cin);
    let xd = x.data();
    let gd = g.data();
    let dw = outer_accumulate(xd, gd, rows, cin, cout);
    // db = column sums of g
    let mut db = vec![T::ZERO; cout];
    for r in 0..rows {
        for (o, &gv) in db.iter_mut().zip(&gd[r * cout..(r + 1) * cout]) {
            *o = o.add(gv);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![cin, cout], dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Per-channel spatial convolution, no channel mixing.
///
/// `x` is [B,C,H,W], `k` is [C,kh,kw]; `pad` of (k-1)/2 at stride 1 preserves
/// the spatial dims ('same' mode for odd kernels).
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> TensorResult<Tensor<T>> {
    if x.rank() != 4 || k.rank() != 3 || x.dim(1) != k.dim(0) {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d",
            left: x.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw) = (k.dim(1), k.dim(2));
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(bb)) => (a, bb),
        _ => {
            return Err(TensorError::InvalidArgument {
                op: "depthwise_conv2d",
                reason: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            })
        }
    };
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::ZERO; b * c * oh * ow];
    let plane = |o_plane: &mut [T], bc: usize| {
        let (bi, ci) = (bc / c, bc % c);
        let x_plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
        let kern = &kd[ci * kh * kw..(ci + 1) * kh * kw];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = T::ZERO;
                for u in 0..kh {
                    let ii = (oi * stride + u) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..kw {
                        let jj = (oj * stride + v) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        acc = acc.add(x_plane[ii as usize * w + jj as usize].mul(kern[u * kw + v]));
                    }
                }
                o_plane[oi * ow + oj] = acc;
            }
        }
    };
    if b * c * oh * ow * kh * kw >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(bc, p)| plane(p, bc));
    } else {
        for (bc, p) in out.chunks_mut(oh * ow).enumerate() {
            plane(p, bc);
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Backward of `depthwise_conv2d`: returns (dx, dk).
pub fn depthwise_conv2d_backward<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw) = (k.dim(1), k.dim(2));
    let (oh, ow) = (g.dim(2), g.dim(3));
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut dx = vec![T::ZERO; xd.len()];
    // dx: scatter, parallel over (b,c) planes (disjoint writes)
    let dx_plane = |d_plane: &mut [T], bc: usize| {
        let ci = bc % c;
        let g_plane = &gd[bc * oh * ow..(bc + 1) * oh * ow];
        let kern = &kd[ci * kh * kw..(ci + 1) * kh * kw];
        for oi in 0..oh {
            for oj in 0..ow {
                let gv = g_plane[oi * ow + oj];
                for u in 0..kh {
                    let ii = (oi * stride + u) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..kw {
                        let jj = (oj * stride + v) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let di = ii as usize * w + jj as usize;
                        d_plane[di] = d_plane[di].add(gv.mul(kern[u * kw + v]));
                    }
                }
            }
        }
    };
    if b * c * oh * ow * kh * kw >= PAR_THRESHOLD {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(bc, p)| dx_plane(p, bc));
    } else {
        for (bc, p) in dx.chunks_mut(h * w).enumerate() {
            dx_plane(p, bc);
        }
    }
    // dk: per-channel accumulation over batch (parallel over channels)
    let mut dk = vec![T::ZERO; kd.len()];
    let dk_chan = |dk_c: &mut [T], ci: usize| {
        for bi in 0..b {
            let bc = bi * c + ci;
            let x_plane = &xd[bc * h * w..(bc + 1) * h * w];
            let g_plane = &gd[bc * oh * ow..(bc + 1) * oh * ow];
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = g_plane[oi * ow + oj];
                    for u in 0..kh {
                        let ii = (oi * stride + u) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = (oj * stride + v) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dk_c[u * kw + v] =
                                dk_c[u * kw + v].add(gv.mul(x_plane[ii as usize * w + jj as usize]));
                        }
                    }
                }
            }
        }
    };
    if b * c * oh * ow * kh * kw >= PAR_THRESHOLD {
        dk.par_chunks_mut(kh * kw).enumerate().for_each(|(ci, p)| dk_chan(p, ci));
    } else {
        for (ci, p) in dk.chunks_mut(kh * kw).enumerate() {
            dk_chan(p, ci);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(k.shape().to_vec(), dk).unwrap(),
    )
}

/// Full convolution with channel mixing: x [B,Ci,H,W], w [Co,Ci,kh,kw], b [Co].
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> TensorResult<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(bb)) => (a, bb),
        _ => {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            })
        }
    };
    if let Some(bt) = bias {
        if bt.shape() != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: w.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
    }
    // weights rearranged to [Ci,kh,kw,Co] so the Co loop is contiguous
    let mut wt = vec![T::ZERO; w.len()];
    let wdat = w.data();
    for o in 0..co {
        for i in 0..ci {
            for u in 0..kh {
                for v in 0..kw {
                    wt[((i * kh + u) * kw + v) * co + o] = wdat[((o * ci + i) * kh + u) * kw + v];
                }
            }
        }
    }
    let xd = x.data();
    let mut out = vec![T::ZERO; b * co * oh * ow];
    let batch_plane = |o_batch: &mut [T], bi: usize| {
        let x_batch = &xd[bi * ci * h * wd..(bi + 1) * ci * h * wd];
        let mut acc = vec![T::ZERO; co];
        for oi in 0..oh {
            for oj in 0..ow {
                match bias {
                    Some(bt) => acc.copy_from_slice(bt.data()),
                    None => acc.iter_mut().for_each(|a| *a = T::ZERO),
                }
                for i in 0..ci {
                    let x_plane = &x_batch[i * h * wd..(i + 1) * h * wd];
                    for u in 0..kh {
                        let ii = (oi * stride + u) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = (oj * stride + v) as isize - pad as isize;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            let xv = x_plane[ii as usize * wd + jj as usize];
                            let w_row = &wt[((i * kh + u) * kw + v) * co..((i * kh + u) * kw + v + 1) * co];
                            for (a, &wv) in acc.iter_mut().zip(w_row) {
                                *a = a.add(xv.mul(wv));
                            }
                        }
                    }
                }
                for o in 0..co {
                    o_batch[(o * oh + oi) * ow + oj] = acc[o];
                }
            }
        }
    };
    if b * co * oh * ow * ci * kh * kw >= PAR_THRESHOLD {
        out.par_chunks_mut(co * oh * ow)
            .enumerate()
            .for_each(|(bi, p)| batch_plane(p, bi));
    } else {
        for (bi, p) in out.chunks_mut(co * oh * ow).enumerate() {
            batch_plane(p, bi);
        }
    }
    Tensor::new(vec![b, co, oh, ow], out)
}

/// Patch matrix for convolution backward: [B*OH*OW, Ci*kh*kw] with zeros at
/// padded positions.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    xd: &[T],
    b: usize,
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let kdim = ci * kh * kw;
    let mut cols = vec![T::ZERO; b * oh * ow * kdim];
    let fill_batch = |c_batch: &mut [T], bi: usize| {
        let x_batch = &xd[bi * ci * h * wd..(bi + 1) * ci * h * wd];
        for oi in 0..oh {
            for oj in 0..ow {
                let row = &mut c_batch[(oi * ow + oj) * kdim..(oi * ow + oj + 1) * kdim];
                for i in 0..ci {
                    let x_plane = &x_batch[i * h * wd..(i + 1) * h * wd];
                    for u in 0..kh {
                        let ii = (oi * stride + u) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = (oj * stride + v) as isize - pad as isize;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            row[(i * kh + u) * kw + v] = x_plane[ii as usize * wd + jj as usize];
                        }
                    }
                }
            }
        }
    };
    if b > 1 && b * oh * ow * kdim >= PAR_THRESHOLD {
        cols.par_chunks_mut(oh * ow * kdim)
            .enumerate()
            .for_each(|(bi, p)| fill_batch(p, bi));
    } else {
        for (bi, p) in cols.chunks_mut(oh * ow * kdim).enumerate() {
            fill_batch(p, bi);
        }
    }
    cols
}

/// Backward of `conv2d` via the patch-matrix route: both weight and input
/// gradients reduce to dense matrix products plus one scatter pass.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let (oh, ow) = (g.dim(2), g.dim(3));
    let rows = b * oh * ow;
    let kdim = ci * kh * kw;
    // g as [rows, co]
    let g_rows = g.permute(&[0, 2, 3, 1]).unwrap();
    let grd = g_rows.data();

    // dw[(ci,u,v),co] = cols^T . g_rows, then rearranged to [co,ci,kh,kw]
    let cols = im2col(x.data(), b, ci, h, wd, kh, kw, stride, pad, oh, ow);
    let dw_mat = outer_accumulate(&cols, grd, rows, kdim, co);
    let mut dw = vec![T::ZERO; w.len()];
    for o in 0..co {
        for kidx in 0..kdim {
            dw[o * kdim + kidx] = dw_mat[kidx * co + o];
        }
    }

    // dx patches = g_rows . w (w viewed as [co, kdim]), scattered back
    let mut dx_cols = vec![T::ZERO; rows * kdim];
    matmul_into(grd, w.data(), &mut dx_cols, rows, co, kdim);
    let mut dx = vec![T::ZERO; x.len()];
    let scatter_batch = |d_batch: &mut [T], bi: usize| {
        let c_batch = &dx_cols[bi * oh * ow * kdim..(bi + 1) * oh * ow * kdim];
        for oi in 0..oh {
            for oj in 0..ow {
                let row = &c_batch[(oi * ow + oj) * kdim..(oi * ow + oj + 1) * kdim];
                for i in 0..ci {
                    for u in 0..kh {
                        let ii = (oi * stride + u) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = (oj * stride + v) as isize - pad as isize;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            let di = (i * h + ii as usize) * wd + jj as usize;
                            d_batch[di] = d_batch[di].add(row[(i * kh + u) * kw + v]);
                        }
                    }
                }
            }
        }
    };
    if b > 1 && rows * kdim >= PAR_THRESHOLD {
        dx.par_chunks_mut(ci * h * wd)
            .enumerate()
            .for_each(|(bi, p)| scatter_batch(p, bi));
    } else {
        for (bi, p) in dx.chunks_mut(ci * h * wd).enumerate() {
            scatter_batch(p, bi);
        }
    }

    // db = column sums of g_rows
    let mut db = vec![T::ZERO; co];
    for r in 0..rows {
        for (o, &gv) in db.iter_mut().zip(&grd[r * co..(r + 1) * co]) {
            *o = o.add(gv);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![co], db).unwrap(),
    )
}

/// Normalizes the last axis to zero mean / unit variance, then applies the
/// affine (gamma, beta).
pub fn layernorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> TensorResult<Tensor<T>> {
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "layernorm",
            reason: format!("eps must be > 0, got {eps}"),
        });
    }
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "layernorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let mut out = vec![T::ZERO; x.len()];
    let gd = gamma.data();
    let bd = beta.data();
    let xd = x.data();
    let block = |o_block: &mut [T], row0: usize| {
        for (r, orow) in o_block.chunks_mut(c).enumerate() {
            let row = &xd[(row0 + r) * c..(row0 + r + 1) * c];
            let (mean, var) = row_moments(row);
            let inv = T::ONE.div(var.add(T::from_f64(eps)).sqrt());
            for ((&v, o), (&g, &bb)) in row.iter().zip(orow.iter_mut()).zip(gd.iter().zip(bd)) {
                *o = g.mul(v.sub(mean).mul(inv)).add(bb);
            }
        }
    };
    let rows = x.len() / c;
    let rows_per_block = (PAR_THRESHOLD / c.max(1)).clamp(1, rows);
    if x.len() >= 4 * PAR_THRESHOLD && rows > rows_per_block {
        out.par_chunks_mut(rows_per_block * c)
            .enumerate()
            .for_each(|(i, blk)| block(blk, i * rows_per_block));
    } else {
        block(&mut out, 0);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn row_moments<T: Element>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut s = T::ZERO;
    for &v in row {
        s = s.add(v);
    }
    let mean = s.div(n);
    let mut q = T::ZERO;
    for &v in row {
        let d = v.sub(mean);
        q = q.add(d.mul(d));
    }
    (mean, q.div(n))
}

/// Backward of `layernorm`: returns (dx, dgamma, dbeta).
pub fn layernorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = *x.shape().last().unwrap();
    let n = T::from_f64(c as f64);
    let gd = gamma.data();
    let mut dx = vec![T::ZERO; x.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ((row, grow), drow) in x.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
        let (mean, var) = row_moments(row);
        let inv = T::ONE.div(var.add(T::from_f64(eps)).sqrt());
        // ghat = gamma .* g ; dx = (ghat - mean(ghat) - xhat*mean(ghat.*xhat)) * inv
        let mut sum_ghat = T::ZERO;
        let mut sum_ghat_xhat = T::ZERO;
        for ((&v, &gv), &ga) in row.iter().zip(grow).zip(gd) {
            let xhat = v.sub(mean).mul(inv);
            let ghat = ga.mul(gv);
            sum_ghat = sum_ghat.add(ghat);
            sum_ghat_xhat = sum_ghat_xhat.add(ghat.mul(xhat));
        }
        let m1 = sum_ghat.div(n);
        let m2 = sum_ghat_xhat.div(n);
        for (((&v, &gv), &ga), d) in row.iter().zip(grow).zip(gd).zip(drow.iter_mut()) {
            let xhat = v.sub(mean).mul(inv);
            let ghat = ga.mul(gv);
            *d = ghat.sub(m1).sub(xhat.mul(m2)).mul(inv);
        }
        for ((dg, db), (&v, &gv)) in dgamma.iter_mut().zip(dbeta.iter_mut()).zip(row.iter().zip(grow)) {
            let xhat = v.sub(mean).mul(inv);
            *dg = dg.add(gv.mul(xhat));
            *db = db.add(gv);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

/// Reduction over one axis; the reduced axis is removed from the shape.
/// `Argmax` breaks ties toward the lowest index and yields indices as floats.
pub fn reduce<T: Element>(op: ReduceOp, x: &Tensor<T>, axis: usize) -> TensorResult<Tensor<T>> {
    if axis >= x.rank() {
        return Err(TensorError::InvalidArgument {
            op: "reduce",
            reason: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = vec![T::ZERO; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut best = xd[o * n * inner + i];
            let mut best_idx = 0usize;
            let mut acc = T::ZERO;
            for j in 0..n {
                let v = xd[(o * n + j) * inner + i];
                acc = acc.add(v);
                if v > best {
                    best = v;
                    best_idx = j;
                }
            }
            out[o * inner + i] = match op {
                ReduceOp::Sum => acc,
                ReduceOp::Mean => acc.div(T::from_f64(n as f64)),
                ReduceOp::Max => best,
                ReduceOp::Argmax => T::from_f64(best_idx as f64),
            };
        }
    }
    Tensor::new(out_shape, out)
}

/// Mean over a set of axes (removed from the shape).
pub fn mean_axes<T: Element>(x: &Tensor<T>, axes: &[usize]) -> TensorResult<Tensor<T>> {
    let r = x.rank();
    let mut drop = vec![false; r];
    for &a in axes {
        if a >= r || drop[a] {
            return Err(TensorError::InvalidArgument {
                op: "mean_axes",
                reason: format!("bad axes {:?} for shape {:?}", axes, x.shape()),
            });
        }
        drop[a] = true;
    }
    let out_shape: Vec<usize> = x
        .shape()
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop[*i])
        .map(|(_, &d)| d)
        .collect();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let count: usize = x
        .shape()
        .iter()
        .enumerate()
        .filter(|(i, _)| drop[*i])
        .map(|(_, &d)| d)
        .product();
    // per-input-axis stride into the output (0 for reduced axes)
    let out_stride_of = output_axis_strides(x.shape(), &drop);
    let mut out = vec![T::ZERO; shape_len(&out_shape)];
    let inv = T::from_f64(1.0 / count as f64);
    let shape = x.shape();
    let mut idx = vec![0usize; r];
    let mut dst = 0usize;
    for &v in x.data() {
        out[dst] = out[dst].add(v.mul(inv));
        for a in (0..r).rev() {
            idx[a] += 1;
            dst += out_stride_of[a];
            if idx[a] < shape[a] {
                break;
            }
            dst -= shape[a] * out_stride_of[a];
            idx[a] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// For each input axis, the flat stride it contributes in the reduced output
/// (zero when the axis is reduced away).
fn output_axis_strides(in_shape: &[usize], drop: &[bool]) -> Vec<usize> {
    let r = in_shape.len();
    let mut out = vec![0usize; r];
    let mut stride = 1usize;
    for a in (0..r).rev() {
        if !drop[a] {
            out[a] = stride;
            stride *= in_shape[a];
        }
    }
    out
}

/// Broadcasts a mean gradient back over the reduced axes.
pub fn mean_axes_backward<T: Element>(
    g: &Tensor<T>,
    in_shape: &[usize],
    axes: &[usize],
) -> Tensor<T> {
    let r = in_shape.len();
    let mut drop = vec![false; r];
    for &a in axes {
        drop[a] = true;
    }
    let count: usize = in_shape
        .iter()
        .enumerate()
        .filter(|(i, _)| drop[*i])
        .map(|(_, &d)| d)
        .product();
    let inv = T::from_f64(1.0 / count as f64);
    let out_stride_of = output_axis_strides(in_shape, &drop);
    let gd = g.data();
    let n = shape_len(in_shape);
    let mut out = vec![T::ZERO; n];
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = gd[src].mul(inv);
        for a in (0..r).rev() {
            idx[a] += 1;
            src += out_stride_of[a];
            if idx[a] < in_shape[a] {
                break;
            }
            src -= in_shape[a] * out_stride_of[a];
            idx[a] = 0;
        }
    }
    Tensor::new(in_shape.to_vec(), out).unwrap()
}

/// Batch normalization over (B,H,W) per channel, using batch statistics.
/// Returns (y, mean[C], biased var[C]).
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> TensorResult<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = bn_dims(x, gamma, beta)?;
    let hw = h * w;
    let m = T::from_f64((b * hw) as f64);
    let xd = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ci in 0..c {
        let mut s = T::ZERO;
        for bi in 0..b {
            for &v in &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                s = s.add(v);
            }
        }
        let mu = s.div(m);
        let mut q = T::ZERO;
        for bi in 0..b {
            for &v in &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                let d = v.sub(mu);
                q = q.add(d.mul(d));
            }
        }
        mean[ci] = mu;
        var[ci] = q.div(m);
    }
    let mut out = vec![T::ZERO; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let inv = T::ONE.div(var[ci].add(T::from_f64(eps)).sqrt());
            let ga = gamma.data()[ci];
            let be = beta.data()[ci];
            let mu = mean[ci];
            let src = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (&v, o) in src.iter().zip(dst.iter_mut()) {
                *o = ga.mul(v.sub(mu).mul(inv)).add(be);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Tensor::new(vec![c], mean)?,
        Tensor::new(vec![c], var)?,
    ))
}

/// Batch normalization with fixed (running) statistics.
pub fn batchnorm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> TensorResult<Tensor<T>> {
    let (b, c, h, w) = bn_dims(x, gamma, beta)?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let inv = T::ONE.div(var.data()[ci].add(T::from_f64(eps)).sqrt());
            let ga = gamma.data()[ci];
            let be = beta.data()[ci];
            let mu = mean.data()[ci];
            let src = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (&v, o) in src.iter().zip(dst.iter_mut()) {
                *o = ga.mul(v.sub(mu).mul(inv)).add(be);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn bn_dims<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> TensorResult<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(TensorError::InvalidShape {
            op: "batchnorm",
            shape: x.shape().to_vec(),
            reason: "expected [B,C,H,W]".into(),
        });
    }
    let c = x.dim(1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    Ok((x.dim(0), c, x.dim(2), x.dim(3)))
}

/// Backward of `batchnorm_train`: returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let m = T::from_f64((b * hw) as f64);
    let xd = x.data();
    let gd = g.data();
    let mut dx = vec![T::ZERO; xd.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ci in 0..c {
        let mu = mean.data()[ci];
        let inv = T::ONE.div(var.data()[ci].add(T::from_f64(eps)).sqrt());
        let ga = gamma.data()[ci];
        let mut sum_g = T::ZERO;
        let mut sum_g_xhat = T::ZERO;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let xhat = xd[base + i].sub(mu).mul(inv);
                sum_g = sum_g.add(gd[base + i]);
                sum_g_xhat = sum_g_xhat.add(gd[base + i].mul(xhat));
            }
        }
        dgamma[ci] = sum_g_xhat;
        dbeta[ci] = sum_g;
        let m1 = ga.mul(sum_g).div(m);
        let m2 = ga.mul(sum_g_xhat).div(m);
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let xhat = xd[base + i].sub(mu).mul(inv);
                dx[base + i] = ga.mul(gd[base + i]).sub(m1).sub(xhat.mul(m2)).mul(inv);
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

/// Adds a per-channel bias to a [B,C,H,W] map.
pub fn add_channel_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if x.rank() != 4 || bias.shape() != [x.dim(1)] {
        return Err(TensorError::ShapeMismatch {
            op: "add_channel_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let mut out = x.data().to_vec();
    for bi in 0..b {
        for ci in 0..c {
            let bv = bias.data()[ci];
            for o in &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                *o = o.add(bv);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise softmax over the last axis, clamped away from exact 0/1.
pub fn softmax_last<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().unwrap();
    let mut out = vec![T::ZERO; x.len()];
    for (row, orow) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let mut m = row[0];
        for &v in row {
            m = m.maximum(v);
        }
        let mut s = T::ZERO;
        for (&v, o) in row.iter().zip(orow.iter_mut()) {
            let e = v.sub(m).exp();
            *o = e;
            s = s.add(e);
        }
        let inv = T::ONE.div(s);
        let floor = T::from_f64(1e-12);
        for o in orow.iter_mut() {
            *o = o.mul(inv).maximum(floor);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Slice of the last axis: columns [start, start+len).
pub fn narrow_last<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> TensorResult<Tensor<T>> {
    let c = *x.shape().last().unwrap();
    if start + len > c || len == 0 {
        return Err(TensorError::InvalidArgument {
            op: "narrow_last",
            reason: format!("range {start}..{} out of {c}", start + len),
        });
    }
    let rows = x.len() / c;
    let mut out = vec![T::ZERO; rows * len];
    for (row, orow) in x.data().chunks(c).zip(out.chunks_mut(len)) {
        orow.copy_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(shape, out)
}

/// Concatenation of two tensors along the last axis.
pub fn concat_last<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if a.rank() != b.rank() || a.shape()[..a.rank() - 1] != b.shape()[..b.rank() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_last",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ca = *a.shape().last().unwrap();
    let cb = *b.shape().last().unwrap();
    let rows = a.len() / ca;
    let mut out = vec![T::ZERO; rows * (ca + cb)];
    for ((ra, rb), orow) in a
        .data()
        .chunks(ca)
        .zip(b.data().chunks(cb))
        .zip(out.chunks_mut(ca + cb))
    {
        orow[..ca].copy_from_slice(ra);
        orow[ca..].copy_from_slice(rb);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::new(shape, out)
}

/// x [B, rest...] * m [rest...], broadcasting m over the batch axis.
pub fn mul_bcast_batch<T: Element>(x: &Tensor<T>, m: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if x.rank() < 2 || x.shape()[1..] != *m.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul_bcast_batch",
            left: x.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    let chunk = m.len();
    let md = m.data();
    let mut out = vec![T::ZERO; x.len()];
    for (xrow, orow) in x.data().chunks(chunk).zip(out.chunks_mut(chunk)) {
        for ((&xv, &mv), o) in xrow.iter().zip(md).zip(orow.iter_mut()) {
            *o = xv.mul(mv);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Scales each row of x [B, C] by s [B].
pub fn scale_rows<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if x.rank() != 2 || s.len() != x.dim(0) {
        return Err(TensorError::ShapeMismatch {
            op: "scale_rows",
            left: x.shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    let c = x.dim(1);
    let sd = s.data();
    let mut out = vec![T::ZERO; x.len()];
    for ((row, orow), &sv) in x.data().chunks(c).zip(out.chunks_mut(c)).zip(sd) {
        for (&v, o) in row.iter().zip(orow.iter_mut()) {
            *o = v.mul(sv);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    }

    #[test]
    fn silu_at_zero_is_zero() {
        assert_eq!(silu_scalar(0.0f64), 0.0);
    }

    #[test]
    fn gelu_matches_scalar_reference() {
        // reference: 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3))) at x=1
        let x = 1.0f64;
        let reference = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu_scalar(x) - reference).abs() < 1e-15);
    }

    #[test]
    fn binary_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let err = binary(BinaryOp::Add, &a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "got: {msg}");
    }

    #[test]
    fn linear_identity_weights() {
        let x = t64(&[2], &[1.0, 2.0]);
        let w = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2], &[0.0, 0.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_computed() {
        // x=[1,1], W=[[2],[3]], b=[1] -> 1*2+1*3+1 = 6
        let x = t64(&[2], &[1.0, 1.0]);
        let w = t64(&[2, 1], &[2.0, 3.0]);
        let b = t64(&[1], &[1.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_zero_input_broadcasts_bias() {
        let x = Tensor::<f64>::zeros(&[3, 2]);
        let w = t64(&[2, 2], &[0.3, -0.1, 0.7, 2.0]);
        let b = t64(&[2], &[5.0, -4.0]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[5.0, -4.0, 5.0, -4.0, 5.0, -4.0]);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| (i as f64).sin());
        let mut k = Tensor::<f64>::zeros(&[2, 3, 3]);
        k.data_mut()[4] = 1.0; // center of channel 0
        k.data_mut()[13] = 1.0; // center of channel 1
        let y = depthwise_conv2d(&x, &k, 1, 1).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn depthwise_ones_kernel_interior_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        let k = Tensor::<f64>::ones(&[1, 3, 3]);
        let y = depthwise_conv2d(&x, &k, 1, 1).unwrap();
        // interior value = 9 under 'same' padding
        assert_eq!(y.at(&[0, 0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0); // corner sees 2x2
    }

    #[test]
    fn depthwise_stride2_halves_dims() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 6]);
        let k = Tensor::<f64>::zeros(&[1, 3, 3]);
        let y = depthwise_conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 3]);
    }

    #[test]
    fn depthwise_kernel_too_big_errors() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f64>::zeros(&[1, 5, 5]);
        assert!(depthwise_conv2d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn layernorm_constant_row_collapses_to_beta() {
        let x = t64(&[1, 3], &[1.0, 1.0, 1.0]);
        let g = Tensor::<f64>::ones(&[3]);
        let b = Tensor::<f64>::zeros(&[3]);
        let y = layernorm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.max_abs() < 1e-6);
    }

    #[test]
    fn layernorm_standardized_input_fixed_point() {
        let x = t64(&[1, 2], &[-1.0, 1.0]);
        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let y = layernorm(&x, &g, &b, 1e-10).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_output_moments() {
        let x = Tensor::<f64>::from_fn(&[1, 8], |i| (i as f64 * 1.7).cos() * 3.0 + 0.5);
        let g = Tensor::<f64>::ones(&[8]);
        let b = Tensor::<f64>::zeros(&[8]);
        let y = layernorm(&x, &g, &b, 1e-12).unwrap();
        let (mean, var) = row_moments(y.data());
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn layernorm_requires_positive_eps() {
        let x = Tensor::<f64>::zeros(&[1, 1]);
        let g = Tensor::<f64>::ones(&[1]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(layernorm(&x, &g, &b, 0.0).is_err());
    }

    #[test]
    fn reduce_mean_and_sum() {
        let x = t64(&[2], &[2.0, 4.0]);
        assert_eq!(reduce(ReduceOp::Mean, &x, 0).unwrap().item(), 3.0);
        let ones = Tensor::<f64>::ones(&[2, 3]);
        let s = reduce(ReduceOp::Sum, &ones, 1).unwrap();
        assert_eq!(s.data(), &[3.0, 3.0]);
    }

    #[test]
    fn reduce_argmax_tie_breaks_low() {
        let x = t64(&[3], &[0.0, 5.0, 5.0]);
        assert_eq!(reduce(ReduceOp::Argmax, &x, 0).unwrap().item(), 1.0);
    }

    #[test]
    fn mean_axes_spatial() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64);
        let y = mean_axes(&x, &[1]).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 7.5, 8.5, 9.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t64(&[2, 3], &[0.1, 2.0, -1.0, 5.0, 5.0, 5.0]);
        let p = softmax_last(&x);
        for row in p.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_narrow_inverse() {
        let a = t64(&[2, 2], &[1.0, 2.0, 5.0, 6.0]);
        let b = t64(&[2, 1], &[3.0, 7.0]);
        let c = concat_last(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        assert_eq!(narrow_last(&c, 0, 2).unwrap(), a);
        assert_eq!(narrow_last(&c, 2, 1).unwrap(), b);
    }

    #[test]
    fn scale_rows_basic() {
        let x = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = t64(&[2], &[10.0, 0.5]);
        assert_eq!(scale_rows(&x, &s).unwrap().data(), &[10.0, 20.0, 1.5, 2.0]);
    }
}
