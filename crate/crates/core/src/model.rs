//! Two-stream backbone: stem, heat-conduction blocks, frequency-value
//! embeddings, and staged downsampling.
//!
//! Both modalities run through structurally identical streams. The depthwise
//! convolution inside each block shares weights across modalities; linears,
//! norms, and diffusivity predictors are modality-specific. Frequency value
//! embeddings (FVEs) are independently initialized only at stage 1 and are
//! propagated to later stages through strided depthwise projections, so every
//! later-stage embedding is a deterministic function of stage-1 state.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{trunc_normal, Graph, ParamId, ParamStore, Var};
use crate::spectral::FrequencyGrid;
use crate::tensor::{Element, Tensor, TensorError, TensorResult};

// Normalization eps doubles as a gradient-amplification cap: backward
// divides by sqrt(var+eps), and sparse event inputs can drive activation
// variance to ~0 at deep stages. 1e-3 bounds each layer's amplification
// at ~31x, which plain SGD tolerates.
pub const LN_EPS: f64 = 1e-3;
pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// He-style init for convolutions feeding batch norm: std = sqrt(2/fan_in).
/// A 0.02-std conv in front of BN leaves the batch variance so small that
/// the 1/sigma factor blows up the effective step size on sparse inputs.
fn conv_init_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// The two input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Event,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Event];

    pub fn idx(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Event => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Event => "event",
        }
    }
}

/// Static architecture description.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stage_depths: Vec<usize>,
    pub fve_dim: usize,
    pub resolution: usize,
    pub frames: usize,
    pub num_classes: usize,
    /// Residual connections around each block; switching them off yields the
    /// literal block equations.
    pub residual: bool,
    /// Per-channel (instead of per-modality-scalar) weights in the gated
    /// fusion strategy.
    pub msf_per_channel: bool,
}

impl ModelSpec {
    /// Desk-scale default: trains in minutes on CPU.
    pub fn desk(num_classes: usize) -> Self {
        ModelSpec {
            in_channels: 3,
            base_channels: 32,
            stage_depths: vec![1, 1, 2, 1],
            fve_dim: 32,
            resolution: 64,
            frames: 4,
            num_classes,
            residual: true,
            msf_per_channel: false,
        }
    }

    /// Full-size layout: 24 blocks as [2,2,18,2] with channel doubling.
    pub fn full(num_classes: usize) -> Self {
        ModelSpec {
            in_channels: 3,
            base_channels: 128,
            stage_depths: vec![2, 2, 18, 2],
            fve_dim: 128,
            resolution: 224,
            frames: 8,
            num_classes,
            residual: true,
            msf_per_channel: false,
        }
    }

    /// Miniature layout used by the exhaustive gradient checks.
    pub fn mini(num_classes: usize) -> Self {
        ModelSpec {
            in_channels: 3,
            base_channels: 8,
            stage_depths: vec![1, 1, 1, 1],
            fve_dim: 8,
            resolution: 16,
            frames: 1,
            num_classes,
            residual: true,
            msf_per_channel: false,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.num_stages()).map(|s| self.base_channels << s).collect()
    }

    /// Feature width after the final stage (per modality).
    pub fn feature_dim(&self) -> usize {
        self.base_channels << (self.num_stages() - 1)
    }

    /// Spatial side length at each stage: /4 from the stem, then /2 between
    /// stages (ceiling division, floor 1).
    pub fn stage_resolutions(&self) -> Vec<usize> {
        let mut r = self.resolution / 4;
        let mut out = Vec::with_capacity(self.num_stages());
        for s in 0..self.num_stages() {
            if s > 0 {
                r = (r + 1) / 2;
            }
            out.push(r.max(1));
        }
        out
    }

    pub fn validate(&self) -> TensorResult<()> {
        if self.resolution % 4 != 0 || self.resolution == 0 {
            return Err(TensorError::InvalidArgument {
                op: "model_spec",
                reason: format!("resolution {} must be a positive multiple of 4", self.resolution),
            });
        }
        if self.stage_depths.is_empty() || self.frames == 0 || self.num_classes < 2 {
            return Err(TensorError::InvalidArgument {
                op: "model_spec",
                reason: "need at least one stage, one frame, and two classes".into(),
            });
        }
        Ok(())
    }
}

/// Batch statistics captured during a training forward pass; the trainer
/// folds them into the running buffers after the step.
pub struct BnUpdate<T: Element> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub fn apply_bn_updates<T: Element>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64(BN_MOMENTUM);
    let one_m = T::from_f64(1.0 - BN_MOMENTUM);
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
            let cur = store.value(id).clone();
            let next = cur
                .zip_map(batch, "bn_update", |rv, bv| one_m.mul(rv).add(m.mul(bv)))
                .expect("bn buffer shape");
            *store.value_mut(id) = next;
        }
    }
}

struct BnParams {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BnParams {
    fn build<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BnParams {
            gamma: store.add_param(&format!("{name}.g"), Tensor::ones(&[c]), true),
            beta: store.add_param(&format!("{name}.b"), Tensor::zeros(&[c]), true),
            running_mean: store.add_param(&format!("{name}.rm"), Tensor::zeros(&[c]), false),
            running_var: store.add_param(&format!("{name}.rv"), Tensor::ones(&[c]), false),
        }
    }

    fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        train: bool,
        bn_out: &mut Vec<BnUpdate<T>>,
    ) -> TensorResult<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if train {
            let (y, mean, var) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
            bn_out.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
            });
            Ok(y)
        } else {
            g.batchnorm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean),
                store.value(self.running_var),
                BN_EPS,
            )
        }
    }
}

/// Patchifying stem: two stride-2 conv + BN + GeLU stages, one per modality.
pub struct StemParams {
    conv1_w: ParamId,
    conv1_b: ParamId,
    bn1: BnParams,
    conv2_w: ParamId,
    conv2_b: ParamId,
    bn2: BnParams,
}

impl StemParams {
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let mid = (c_out / 2).max(1);
        StemParams {
            conv1_w: store.add_param(
                &format!("{name}.conv1.w"),
                trunc_normal(rng, &[mid, c_in, 3, 3], conv_init_std(c_in * 9)),
                true,
            ),
            conv1_b: store.add_param(&format!("{name}.conv1.b"), Tensor::zeros(&[mid]), true),
            bn1: BnParams::build(store, &format!("{name}.bn1"), mid),
            conv2_w: store.add_param(
                &format!("{name}.conv2.w"),
                trunc_normal(rng, &[c_out, mid, 3, 3], conv_init_std(mid * 9)),
                true,
            ),
            conv2_b: store.add_param(&format!("{name}.conv2.b"), Tensor::zeros(&[c_out]), true),
            bn2: BnParams::build(store, &format!("{name}.bn2"), c_out),
        }
    }

    /// [B,C_in,H,W] -> [B,C_out,H/4,W/4]; H and W must be divisible by 4.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        train: bool,
        bn_out: &mut Vec<BnUpdate<T>>,
    ) -> TensorResult<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(TensorError::InvalidShape {
                op: "stem",
                shape: shape.to_vec(),
                reason: "spatial dims must be divisible by 4".into(),
            });
        }
        let w1 = g.param(store, self.conv1_w);
        let b1 = g.param(store, self.conv1_b);
        let y = g.conv2d(x, w1, b1, 2, 1)?;
        let y = self.bn1.forward(g, store, y, train, bn_out)?;
        let y = g.gelu(y);
        let w2 = g.param(store, self.conv2_w);
        let b2 = g.param(store, self.conv2_b);
        let y = g.conv2d(y, w2, b2, 2, 1)?;
        let y = self.bn2.forward(g, store, y, train, bn_out)?;
        Ok(g.gelu(y))
    }
}

/// Channel-split activations inside a block: the heat path X and gate path Z.
pub struct BlockState {
    pub x: Var,
    pub z: Var,
}

/// Splits a [..., 2C] projection evenly into the (X, Z) pair.
pub fn split_channels<T: Element>(g: &mut Graph<T>, y: Var) -> TensorResult<BlockState> {
    let width = *g.value(y).shape().last().unwrap();
    if width % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "split_channels",
            shape: g.value(y).shape().to_vec(),
            reason: "channel width must be even".into(),
        });
    }
    let c = width / 2;
    Ok(BlockState {
        x: g.narrow_last(y, 0, c)?,
        z: g.narrow_last(y, c, c)?,
    })
}

struct BlockModParams {
    in_w: ParamId,
    in_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
}

impl BlockModParams {
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        fve_dim: usize,
    ) -> Self {
        BlockModParams {
            in_w: store.add_param(&format!("{name}.in.w"), trunc_normal(rng, &[c, 2 * c], INIT_STD), true),
            in_b: store.add_param(&format!("{name}.in.b"), Tensor::zeros(&[2 * c]), true),
            ln_g: store.add_param(&format!("{name}.ln.g"), Tensor::ones(&[c]), true),
            ln_b: store.add_param(&format!("{name}.ln.b"), Tensor::zeros(&[c]), true),
            gate_w: store.add_param(&format!("{name}.gate.w"), trunc_normal(rng, &[c, c], INIT_STD), true),
            gate_b: store.add_param(&format!("{name}.gate.b"), Tensor::zeros(&[c]), true),
            out_w: store.add_param(&format!("{name}.out.w"), trunc_normal(rng, &[c, c], INIT_STD), true),
            out_b: store.add_param(&format!("{name}.out.b"), Tensor::zeros(&[c]), true),
            k_w: store.add_param(&format!("{name}.k.w"), trunc_normal(rng, &[fve_dim, c], INIT_STD), true),
            k_b: store.add_param(&format!("{name}.k.b"), Tensor::zeros(&[c]), true),
        }
    }
}

/// One two-stream heat-conduction block.
pub struct BlockParams {
    dw_w: ParamId,
    dw_b: ParamId,
    mods: [BlockModParams; 2],
    channels: usize,
}

impl BlockParams {
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        fve_dim: usize,
    ) -> Self {
        BlockParams {
            dw_w: store.add_param(&format!("{name}.dw.w"), trunc_normal(rng, &[c, 3, 3], conv_init_std(9)), true),
            dw_b: store.add_param(&format!("{name}.dw.b"), Tensor::zeros(&[c]), true),
            mods: [
                BlockModParams::build(store, rng, &format!("{name}.rgb"), c, fve_dim),
                BlockModParams::build(store, rng, &format!("{name}.event"), c, fve_dim),
            ],
            channels: c,
        }
    }

    /// Diffusivity prediction plus the heat-conduction mix for one modality.
    /// Returns the mixed field and the predicted k as [C,H,W].
    fn heat_layer<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_cf: Var,
        fve: Var,
        omega_sq: Var,
        modality: Modality,
    ) -> TensorResult<(Var, Var)> {
        let m = &self.mods[modality.idx()];
        let kw = g.param(store, m.k_w);
        let kb = g.param(store, m.k_b);
        // [H,W,D] -> [H,W,C] -> softplus keeps k > 0 -> [C,H,W]
        let k_hwc = g.linear(fve, kw, kb)?;
        let k_hwc = g.softplus(k_hwc);
        let k = g.permute(k_hwc, &[2, 0, 1])?;
        // decay = exp(-k * (wx^2 + wy^2)), diffusion time fixed at 1
        let kw2 = g.mul(k, omega_sq)?;
        let neg = g.scale(kw2, -1.0);
        let decay = g.exp(neg);
        let mixed = g.hco(x_cf, decay)?;
        Ok((mixed, k))
    }

    /// The paired heat-conduction layer: both modalities mixed with their own
    /// predicted diffusivities.
    pub fn heat_layer_pair<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_r: Var,
        x_e: Var,
        fve_r: Var,
        fve_e: Var,
        omega_sq: Var,
    ) -> TensorResult<(Var, Var)> {
        if g.value(x_r).shape() != g.value(x_e).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "heat_layer_pair",
                left: g.value(x_r).shape().to_vec(),
                right: g.value(x_e).shape().to_vec(),
            });
        }
        let (r, _) = self.heat_layer(g, store, x_r, fve_r, omega_sq, Modality::Rgb)?;
        let (e, _) = self.heat_layer(g, store, x_e, fve_e, omega_sq, Modality::Event)?;
        Ok((r, e))
    }

    fn forward_one<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
        fve: Var,
        omega_sq: Var,
        modality: Modality,
        residual: bool,
    ) -> TensorResult<Var> {
        let c = self.channels;
        let m = &self.mods[modality.idx()];
        let dw_w = g.param(store, self.dw_w);
        let dw_b = g.param(store, self.dw_b);
        let y = g.depthwise_conv2d(input, dw_w, 1, 1)?;
        let y = g.add_channel_bias(y, dw_b)?;
        let y = g.permute(y, &[0, 2, 3, 1])?;
        let in_w = g.param(store, m.in_w);
        let in_b = g.param(store, m.in_b);
        let y = g.linear(y, in_w, in_b)?;
        let state = split_channels(g, y)?;
        let x_cf = g.permute(state.x, &[0, 3, 1, 2])?;
        let (mixed, _k) = self.heat_layer(g, store, x_cf, fve, omega_sq, modality)?;
        let mixed_cl = g.permute(mixed, &[0, 2, 3, 1])?;
        let ln_g = g.param(store, m.ln_g);
        let ln_b = g.param(store, m.ln_b);
        let x_norm = g.layernorm(mixed_cl, ln_g, ln_b, LN_EPS)?;
        let gate_w = g.param(store, m.gate_w);
        let gate_b = g.param(store, m.gate_b);
        let gate = g.linear(state.z, gate_w, gate_b)?;
        let gate = g.silu(gate);
        let prod = g.mul(x_norm, gate)?;
        let out_w = g.param(store, m.out_w);
        let out_b = g.param(store, m.out_b);
        let out = g.linear(prod, out_w, out_b)?;
        let out_cf = g.permute(out, &[0, 3, 1, 2])?;
        debug_assert_eq!(g.value(out_cf).dim(1), c);
        if residual {
            g.add(out_cf, input)
        } else {
            Ok(out_cf)
        }
    }

    /// Both modality streams through one block. Input and output layout is
    /// [B,C,H,W]; shapes must match across modalities.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        in_r: Var,
        in_e: Var,
        fve_r: Var,
        fve_e: Var,
        omega_sq: Var,
        residual: bool,
    ) -> TensorResult<(Var, Var)> {
        if g.value(in_r).shape() != g.value(in_e).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "block",
                left: g.value(in_r).shape().to_vec(),
                right: g.value(in_e).shape().to_vec(),
            });
        }
        let r = self.forward_one(g, store, in_r, fve_r, omega_sq, Modality::Rgb, residual)?;
        let e = self.forward_one(g, store, in_e, fve_e, omega_sq, Modality::Event, residual)?;
        Ok((r, e))
    }
}

/// Stride-2 stage transition: conv C -> 2C plus channels-last layer norm.
struct DownsampleParams {
    conv_w: ParamId,
    conv_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl DownsampleParams {
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        DownsampleParams {
            conv_w: store.add_param(
                &format!("{name}.conv.w"),
                trunc_normal(rng, &[c_out, c_in, 3, 3], conv_init_std(c_in * 9)),
                true,
            ),
            conv_b: store.add_param(&format!("{name}.conv.b"), Tensor::zeros(&[c_out]), true),
            ln_g: store.add_param(&format!("{name}.ln.g"), Tensor::ones(&[c_out]), true),
            ln_b: store.add_param(&format!("{name}.ln.b"), Tensor::zeros(&[c_out]), true),
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let w = g.param(store, self.conv_w);
        let b = g.param(store, self.conv_b);
        let y = g.conv2d(x, w, b, 2, 1)?;
        let y = g.permute(y, &[0, 2, 3, 1])?;
        let ln_g = g.param(store, self.ln_g);
        let ln_b = g.param(store, self.ln_b);
        let y = g.layernorm(y, ln_g, ln_b, LN_EPS)?;
        g.permute(y, &[0, 3, 1, 2])
    }
}

/// Modality-specific frequency value embeddings with cross-stage projection.
pub struct FveParams {
    /// Stage-1 tables, one per modality, shape [H1,W1,D].
    tables: [ParamId; 2],
    /// Strided depthwise projections between consecutive stages, per modality.
    proj: Vec<[(ParamId, ParamId); 2]>,
}

impl FveParams {
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        spec: &ModelSpec,
    ) -> Self {
        let res = spec.stage_resolutions();
        let d = spec.fve_dim;
        let tables = [
            store.add_param("fve.rgb.table", trunc_normal(rng, &[res[0], res[0], d], INIT_STD), true),
            store.add_param("fve.event.table", trunc_normal(rng, &[res[0], res[0], d], INIT_STD), true),
        ];
        let mut proj = Vec::new();
        for s in 1..spec.num_stages() {
            let mut pair = Vec::new();
            for m in Modality::ALL {
                let w = store.add_param(
                    &format!("fve.{}.proj{}.w", m.tag(), s),
                    trunc_normal(rng, &[d, 3, 3], INIT_STD),
                    true,
                );
                let b = store.add_param(&format!("fve.{}.proj{}.b", m.tag(), s), Tensor::zeros(&[d]), true);
                pair.push((w, b));
            }
            proj.push([pair[0], pair[1]]);
        }
        FveParams { tables, proj }
    }

    /// Embeddings for every stage, derived in-graph so gradients reach both
    /// the stage-1 tables and the projection weights.
    pub fn stage_vars<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        modality: Modality,
    ) -> TensorResult<Vec<Var>> {
        let mi = modality.idx();
        let mut vars = Vec::with_capacity(self.proj.len() + 1);
        let mut cur = g.param(store, self.tables[mi]);
        vars.push(cur);
        for pair in &self.proj {
            let (w, b) = pair[mi];
            let shape = g.value(cur).shape().to_vec(); // [H,W,D]
            let (h, wd, d) = (shape[0], shape[1], shape[2]);
            let cf = g.permute(cur, &[2, 0, 1])?;
            let cf = g.reshape(cf, &[1, d, h, wd])?;
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.depthwise_conv2d(cf, wv, 2, 1)?;
            let y = g.add_channel_bias(y, bv)?;
            let oshape = g.value(y).shape().to_vec();
            let y = g.reshape(y, &[d, oshape[2], oshape[3]])?;
            cur = g.permute(y, &[1, 2, 0])?;
            vars.push(cur);
        }
        Ok(vars)
    }
}

/// All backbone parameters for both streams.
pub struct Backbone {
    pub spec: ModelSpec,
    stems: [StemParams; 2],
    stages: Vec<Vec<BlockParams>>,
    downs: Vec<[DownsampleParams; 2]>,
    pub fve: FveParams,
}

/// Extracts frame `t` of a [B,T,C,H,W] tensor as [B,C,H,W].
pub fn select_frame<T: Element>(x: &Tensor<T>, t: usize) -> Tensor<T> {
    let (b, frames) = (x.dim(0), x.dim(1));
    assert!(t < frames);
    let chunk: usize = x.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(b * chunk);
    for bi in 0..b {
        let base = (bi * frames + t) * chunk;
        out.extend_from_slice(&x.data()[base..base + chunk]);
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&x.shape()[2..]);
    Tensor::new(shape, out).unwrap()
}

impl Backbone {
    pub fn build<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, spec: &ModelSpec) -> TensorResult<Self> {
        spec.validate()?;
        let channels = spec.stage_channels();
        let stems = [
            StemParams::build(store, rng, "stem.rgb", spec.in_channels, channels[0]),
            StemParams::build(store, rng, "stem.event", spec.in_channels, channels[0]),
        ];
        let mut stages = Vec::new();
        for (s, (&depth, &c)) in spec.stage_depths.iter().zip(&channels).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..depth {
                blocks.push(BlockParams::build(
                    store,
                    rng,
                    &format!("stage{}.block{}", s + 1, b),
                    c,
                    spec.fve_dim,
                ));
            }
            stages.push(blocks);
        }
        let mut downs = Vec::new();
        for s in 1..spec.num_stages() {
            let d = [
                DownsampleParams::build(store, rng, &format!("down{}.rgb", s), channels[s - 1], channels[s]),
                DownsampleParams::build(store, rng, &format!("down{}.event", s), channels[s - 1], channels[s]),
            ];
            downs.push(d);
        }
        let fve = FveParams::build(store, rng, spec);
        Ok(Backbone {
            spec: spec.clone(),
            stems,
            stages,
            downs,
            fve,
        })
    }

    pub fn block(&self, stage: usize, idx: usize) -> &BlockParams {
        &self.stages[stage][idx]
    }

    pub fn stem(&self, modality: Modality) -> &StemParams {
        &self.stems[modality.idx()]
    }

    /// Constant omega^2 grids per stage, expanded to [C,H,W].
    fn omega_vars<T: Element>(&self, g: &mut Graph<T>) -> Vec<Var> {
        let channels = self.spec.stage_channels();
        self.spec
            .stage_resolutions()
            .iter()
            .zip(&channels)
            .map(|(&r, &c)| {
                let grid = FrequencyGrid::new(r, r);
                let plane: Tensor<T> = grid.omega_sq();
                let mut data = Vec::with_capacity(c * r * r);
                for _ in 0..c {
                    data.extend_from_slice(plane.data());
                }
                g.leaf(Tensor::new(vec![c, r, r], data).unwrap())
            })
            .collect()
    }

    /// Runs both streams over all frames and returns per-modality pooled
    /// features [B, feature_dim]. `zero` flags blank out a stream's input,
    /// which is how the unimodal ablations are produced.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        rgb: &Tensor<T>,
        evt: &Tensor<T>,
        train: bool,
        bn_out: &mut Vec<BnUpdate<T>>,
        zero_rgb: bool,
        zero_event: bool,
    ) -> TensorResult<(Var, Var)> {
        if rgb.rank() != 5 || evt.rank() != 5 || rgb.shape() != evt.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backbone",
                left: rgb.shape().to_vec(),
                right: evt.shape().to_vec(),
            });
        }
        let frames = rgb.dim(1);
        if frames == 0 {
            return Err(TensorError::InvalidArgument {
                op: "backbone",
                reason: "need at least one frame".into(),
            });
        }
        let fve_r = self.fve.stage_vars(g, store, Modality::Rgb)?;
        let fve_e = self.fve.stage_vars(g, store, Modality::Event)?;
        let omegas = self.omega_vars(g);
        let mut acc: Option<(Var, Var)> = None;
        for t in 0..frames {
            let frame_r = if zero_rgb {
                Tensor::zeros(select_frame(rgb, t).shape())
            } else {
                select_frame(rgb, t)
            };
            let frame_e = if zero_event {
                Tensor::zeros(select_frame(evt, t).shape())
            } else {
                select_frame(evt, t)
            };
            let in_r = g.leaf(frame_r);
            let in_e = g.leaf(frame_e);
            let mut xr = self.stems[0].forward(g, store, in_r, train, bn_out)?;
            let mut xe = self.stems[1].forward(g, store, in_e, train, bn_out)?;
            for (s, blocks) in self.stages.iter().enumerate() {
                if s > 0 {
                    xr = self.downs[s - 1][0].forward(g, store, xr)?;
                    xe = self.downs[s - 1][1].forward(g, store, xe)?;
                }
                for block in blocks {
                    let (r, e) = block.forward(
                        g,
                        store,
                        xr,
                        xe,
                        fve_r[s],
                        fve_e[s],
                        omegas[s],
                        self.spec.residual,
                    )?;
                    xr = r;
                    xe = e;
                }
            }
            // spatial average pool
            let pr = g.permute(xr, &[0, 2, 3, 1])?;
            let pe = g.permute(xe, &[0, 2, 3, 1])?;
            let fr = g.mean_axes(pr, &[1, 2])?;
            let fe = g.mean_axes(pe, &[1, 2])?;
            acc = Some(match acc {
                None => (fr, fe),
                Some((ar, ae)) => (g.add(ar, fr)?, g.add(ae, fe)?),
            });
        }
        let (ar, ae) = acc.unwrap();
        let inv = 1.0 / frames as f64;
        Ok((g.scale(ar, inv), g.scale(ae, inv)))
    }
}

/// Copies every `rgb`-suffixed parameter value onto its `event` counterpart;
/// used to construct exactly tied streams in tests.
pub fn tie_modalities<T: Element>(store: &mut ParamStore<T>) {
    let pairs: Vec<(ParamId, ParamId)> = store
        .iter()
        .filter_map(|(id, p)| {
            if p.name.contains(".rgb.") || p.name.starts_with("fve.rgb") {
                let other = p.name.replacen("rgb", "event", 1);
                store.id_of(&other).map(|oid| (id, oid))
            } else {
                None
            }
        })
        .collect();
    for (src, dst) in pairs {
        let v = store.value(src).clone();
        *store.value_mut(dst) = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seeded(n: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(n)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        use rand::Rng;
        Tensor::from_fn(shape, |_| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn stage_resolutions_divide_down() {
        let spec = ModelSpec::desk(4);
        assert_eq!(spec.stage_resolutions(), vec![16, 8, 4, 2]);
        assert_eq!(ModelSpec::mini(4).stage_resolutions(), vec![4, 2, 1, 1]);
    }

    #[test]
    fn stem_output_shapes() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(1);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let mut g = Graph::new();
        let x = rand_tensor(&mut rng, &[2, 3, 16, 16]);
        let xv = g.leaf(x);
        let mut bn = Vec::new();
        let y = bb.stems[0].forward(&mut g, &store, xv, true, &mut bn).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8, 4, 4]);
        // 32x32 -> 8x8
        let x2 = rand_tensor(&mut rng, &[1, 3, 32, 32]);
        let xv2 = g.leaf(x2);
        let y2 = bb.stems[0].forward(&mut g, &store, xv2, true, &mut bn).unwrap();
        assert_eq!(g.value(y2).shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn stem_rejects_indivisible_dims() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(1);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::zeros(&[1, 3, 15, 16]));
        let mut bn = Vec::new();
        assert!(bb.stems[0].forward(&mut g, &store, xv, true, &mut bn).is_err());
    }

    #[test]
    fn stem_zero_input_deterministic() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(3);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::zeros(&[1, 3, 16, 16]));
            let mut bn = Vec::new();
            let y = bb.stems[0].forward(&mut g, &store, xv, false, &mut bn).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn block_is_identity_with_zeroed_weights() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(5);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        // zero every trainable weight of stage1.block0
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with("stage1.block0"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let z = Tensor::zeros(store.value(id).shape());
            *store.value_mut(id) = z;
        }
        let mut g = Graph::new();
        let x = rand_tensor(&mut rng, &[2, 8, 4, 4]);
        let xr = g.leaf(x.clone());
        let xe = g.leaf(x.clone());
        let fve_r = bb.fve.stage_vars(&mut g, &store, Modality::Rgb).unwrap();
        let fve_e = bb.fve.stage_vars(&mut g, &store, Modality::Event).unwrap();
        let om = bb.omega_vars(&mut g);
        let (r, e) = bb.stages[0][0]
            .forward(&mut g, &store, xr, xe, fve_r[0], fve_e[0], om[0], true)
            .unwrap();
        assert!(g.value(r).max_abs_diff(&x) < 1e-12);
        assert!(g.value(e).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn block_preserves_shape() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(7);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let mut g = Graph::new();
        let x = rand_tensor(&mut rng, &[3, 8, 4, 4]);
        let xr = g.leaf(x.clone());
        let xe = g.leaf(rand_tensor(&mut rng, &[3, 8, 4, 4]));
        let fve_r = bb.fve.stage_vars(&mut g, &store, Modality::Rgb).unwrap();
        let fve_e = bb.fve.stage_vars(&mut g, &store, Modality::Event).unwrap();
        let om = bb.omega_vars(&mut g);
        let (r, e) = bb.stages[0][0]
            .forward(&mut g, &store, xr, xe, fve_r[0], fve_e[0], om[0], true)
            .unwrap();
        assert_eq!(g.value(r).shape(), x.shape());
        assert_eq!(g.value(e).shape(), x.shape());
    }

    #[test]
    fn modality_symmetry_with_tied_weights() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(11);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        tie_modalities(&mut store);
        let mut g = Graph::new();
        let frames = rand_tensor(&mut rng, &[2, 1, 3, 16, 16]);
        let mut bn = Vec::new();
        let (fr, fe) = bb
            .forward(&mut g, &store, &frames, &frames.clone(), false, &mut bn, false, false)
            .unwrap();
        assert_eq!(g.value(fr), g.value(fe));
    }

    #[test]
    fn fve_continuity_rederivable() {
        let spec = ModelSpec::desk(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(13);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let mut g = Graph::new();
        let vars = bb.fve.stage_vars(&mut g, &store, Modality::Rgb).unwrap();
        // re-derive stage-2 by hand: permute -> dwconv s2 -> bias -> permute
        let table = store.value(bb.fve.tables[0]);
        let (w, b) = bb.fve.proj[0][0];
        let cf = table.permute(&[2, 0, 1]).unwrap();
        let d = cf.dim(0);
        let cf = cf.reshape(&[1, d, table.dim(0), table.dim(1)]).unwrap();
        let y = crate::ops::depthwise_conv2d(&cf, store.value(w), 2, 1).unwrap();
        let y = crate::ops::add_channel_bias(&y, store.value(b)).unwrap();
        let y = y
            .reshape(&[d, y.dim(2), y.dim(3)])
            .unwrap()
            .permute(&[1, 2, 0])
            .unwrap();
        assert_eq!(g.value(vars[1]), &y);
    }

    #[test]
    fn heat_layer_zeroed_predictor_gives_uniform_log2_k() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(17);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let block = &bb.stages[0][0];
        for m in &block.mods {
            *store.value_mut(m.k_w) = Tensor::zeros(store.value(m.k_w).shape());
            *store.value_mut(m.k_b) = Tensor::zeros(store.value(m.k_b).shape());
        }
        let mut g = Graph::new();
        let x = rand_tensor(&mut rng, &[1, 8, 4, 4]);
        let xv = g.leaf(x.clone());
        let fve = bb.fve.stage_vars(&mut g, &store, Modality::Rgb).unwrap();
        let om = bb.omega_vars(&mut g);
        let (mixed, k) = block
            .heat_layer(&mut g, &store, xv, fve[0], om[0], Modality::Rgb)
            .unwrap();
        let ln2 = std::f64::consts::LN_2;
        for &kv in g.value(k).data() {
            assert!((kv - ln2).abs() < 1e-12);
        }
        // energy non-expansion still holds
        assert!(g.value(mixed).l2_norm() <= x.l2_norm());
    }

    #[test]
    fn heat_layer_matches_raw_composition() {
        use crate::spectral::{build_decay, hco_forward, FrequencyGrid};
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(19);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let block = &bb.stages[0][0];
        let mut g = Graph::new();
        let x = rand_tensor(&mut rng, &[2, 8, 4, 4]);
        let xv = g.leaf(x.clone());
        let fve = bb.fve.stage_vars(&mut g, &store, Modality::Rgb).unwrap();
        let om = bb.omega_vars(&mut g);
        let (mixed, k) = block
            .heat_layer(&mut g, &store, xv, fve[0], om[0], Modality::Rgb)
            .unwrap();
        // manual path through the raw spectral API with the same k
        let grid = FrequencyGrid::new(4, 4);
        let decay = build_decay(&grid, g.value(k), 1.0).unwrap();
        let manual = hco_forward(&x, &decay).unwrap();
        assert!(g.value(mixed).max_abs_diff(&manual) < 1e-10);
    }

    #[test]
    fn identical_streams_and_fves_give_identical_outputs() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(23);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let block = &bb.stages[0][0];
        let mut g = Graph::new();
        let x = rand_tensor(&mut rng, &[1, 8, 4, 4]);
        let xv = g.leaf(x);
        let fve = bb.fve.stage_vars(&mut g, &store, Modality::Rgb).unwrap();
        let om = bb.omega_vars(&mut g);
        // same inputs, same fve, same modality params on both calls
        let (a, _) = block.heat_layer(&mut g, &store, xv, fve[0], om[0], Modality::Rgb).unwrap();
        let (b, _) = block.heat_layer(&mut g, &store, xv, fve[0], om[0], Modality::Rgb).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn backbone_feature_dim_and_temporal_mean() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(29);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        let frame = rand_tensor(&mut rng, &[1, 1, 3, 16, 16]);
        // repeat the same frame 3 times
        let mut rep = Vec::new();
        for _ in 0..3 {
            rep.extend_from_slice(frame.data());
        }
        let repeated = Tensor::new(vec![1, 3, 3, 16, 16], rep).unwrap();
        let run = |frames: &Tensor<f64>| {
            let mut g = Graph::new();
            let mut bn = Vec::new();
            let (fr, _) = bb
                .forward(&mut g, &store, frames, frames, false, &mut bn, false, false)
                .unwrap();
            g.value(fr).clone()
        };
        let single = run(&frame);
        let triple = run(&repeated);
        assert_eq!(single.shape(), &[1, spec.feature_dim()]);
        assert!(single.max_abs_diff(&triple) < 1e-9);
    }

    #[test]
    fn backbone_rejects_zero_frames() {
        let spec = ModelSpec::mini(4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(31);
        let bb = Backbone::build(&mut store, &mut rng, &spec).unwrap();
        // can't build a zero-frame tensor; shape validation catches mismatch instead
        let mut g = Graph::new();
        let mut bn = Vec::new();
        let a = Tensor::<f64>::zeros(&[1, 1, 3, 16, 16]);
        let b = Tensor::<f64>::zeros(&[1, 2, 3, 16, 16]);
        assert!(bb.forward(&mut g, &store, &a, &b, false, &mut bn, false, false).is_err());
    }
}
