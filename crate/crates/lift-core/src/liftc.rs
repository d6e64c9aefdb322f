//! Supervised volume-to-volume translation with depth-context mixing.
//!
//! A slice-wise encoder-decoder translates each source slice on its own;
//! a bidirectional recurrent mixer reads the pooled bottleneck of every
//! slice in the stack and hands each depth a context vector, injected at
//! the bottleneck, so the per-slice decoder can see the rest of the
//! volume. Training decodes only a sampled subset of depths per step.

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::kernels::{conv2d_fwd, gap2d, tconv2d_fwd};
use crate::autodiff::params::{Init, OptimConfig, ParamStore};
use crate::autodiff::recurrent::{register_bigru, BiGru};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::liftu::{matvec, DEPTH_FREQS};
use crate::metrics::{gaussian_taps, msssim_block, msssim_scales, MSSSIM_FLOOR, MSSSIM_WEIGHTS};
use crate::phantom::PairedSample;
use crate::rng::{derive_seed, derive_seed_index, Stream};
use crate::volume::{fourier_encode, ValueRange, Volume};

pub const ENC1_CH: usize = 16;
pub const ENC2_CH: usize = 32;
pub const BOTTLENECK_CH: usize = 64;
/// Width of the per-depth context vector handed to the decoder.
pub const CONTEXT_DIM: usize = 32;
pub const MIXER_HIDDEN: usize = 64;
/// Optimizer group of the injection weights. They start at zero and
/// would otherwise crawl at the translator rate, starving the mixer of
/// gradient; training drives this group at the mixer rate instead.
pub const INJECT_GROUP: u8 = 1;

/// Headroom on the bounded head. Background voxels sit exactly at the
/// range floor, which a bare tanh only reaches with infinite weights;
/// long before that its gradient dies and the pixels freeze. Scaling
/// the squashed output slightly past the range keeps the endpoints
/// reachable at finite pre-activation. Inference clamps back into
/// range when it materializes a volume.
pub const TANH_GAIN: f64 = 1.05;

/// Variance floor for the per-channel standardization between stages.
pub const NORM_EPS: f64 = 1e-5;

/// Final nonlinearity of the translator head. Direct translation maps
/// into the unit intensity range; the residual refinement stage leaves
/// its output unsquashed so corrections can point either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Identity,
}

impl OutputActivation {
    fn apply_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            OutputActivation::Tanh => {
                let t = g.tanh(x)?;
                g.scale(t, TANH_GAIN)
            }
            OutputActivation::Identity => Ok(x),
        }
    }

    fn apply_eval(&self, x: &mut [f64]) {
        if let OutputActivation::Tanh = self {
            for v in x.iter_mut() {
                *v = TANH_GAIN * v.tanh();
            }
        }
    }
}

/// Slice translator: three-level encoder with skip connections and a
/// context injection point at the bottleneck. The injection bias starts
/// at zero, so a zero context vector leaves the decoder untouched; its
/// weights start small but nonzero, since a zero matrix would block all
/// gradient from ever reaching the mixer behind it.
///
/// Every convolution except the head is followed by per-channel
/// standardization over the spatial plane. Without it the unbounded
/// relu stack drifts in scale until the output tanh pins at the range
/// floor, where its derivative rounds to zero and training freezes.
/// The standardization cancels any bias added before it, so only the
/// head and the injection carry bias terms.
pub struct Translator {
    pub store: ParamStore,
    pub c_in: usize,
    pub c_out: usize,
    pub out_act: OutputActivation,
}

fn uniform_fan(c_in: usize, kh: usize, kw: usize) -> Init {
    Init::Uniform(1.0 / ((c_in * kh * kw) as f64).sqrt())
}

impl Translator {
    pub fn new(seed: u64, c_in: usize, c_out: usize, out_act: OutputActivation) -> Result<Translator> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid("translator needs at least one channel each way"));
        }
        let mut store = ParamStore::new("liftc.translator", seed);
        store.add("enc1.w", vec![ENC1_CH, c_in, 3, 3], uniform_fan(c_in, 3, 3))?;
        store.add("enc2.w", vec![ENC2_CH, ENC1_CH, 4, 4], uniform_fan(ENC1_CH, 4, 4))?;
        store.add("enc3.w", vec![BOTTLENECK_CH, ENC2_CH, 4, 4], uniform_fan(ENC2_CH, 4, 4))?;
        store.add_grouped("inject.w", vec![BOTTLENECK_CH, CONTEXT_DIM], Init::Uniform(0.1), INJECT_GROUP)?;
        store.add_grouped("inject.b", vec![BOTTLENECK_CH], Init::Zeros, INJECT_GROUP)?;
        store.add("dec3.w", vec![BOTTLENECK_CH, ENC2_CH, 4, 4], uniform_fan(BOTTLENECK_CH, 4, 4))?;
        store.add("dec2.w", vec![ENC2_CH, 2 * ENC2_CH, 3, 3], uniform_fan(2 * ENC2_CH, 3, 3))?;
        store.add("dec1t.w", vec![ENC2_CH, ENC1_CH, 4, 4], uniform_fan(ENC2_CH, 4, 4))?;
        store.add("dec1.w", vec![ENC1_CH, 2 * ENC1_CH, 3, 3], uniform_fan(2 * ENC1_CH, 3, 3))?;
        store.add("head.w", vec![c_out, ENC1_CH, 3, 3], uniform_fan(ENC1_CH, 3, 3))?;
        store.add("head.b", vec![c_out], Init::Zeros)?;
        Ok(Translator { store, c_in, c_out, out_act })
    }

    /// Zeroes the output head so the translator maps everything to zero.
    /// The residual stage starts from here, making refinement a no-op at
    /// initialization.
    pub fn zero_head(&mut self) -> Result<()> {
        for name in ["head.w", "head.b"] {
            for v in self.store.get_mut(name)?.value.iter_mut() {
                *v = 0.0;
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        self.store.digest()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<TransBind> {
        Ok(TransBind {
            e1w: self.store.bind(g, "enc1.w")?,
            e2w: self.store.bind(g, "enc2.w")?,
            e3w: self.store.bind(g, "enc3.w")?,
            injw: self.store.bind(g, "inject.w")?,
            injb: self.store.bind(g, "inject.b")?,
            d3w: self.store.bind(g, "dec3.w")?,
            d2w: self.store.bind(g, "dec2.w")?,
            u1w: self.store.bind(g, "dec1t.w")?,
            d1w: self.store.bind(g, "dec1.w")?,
            hw: self.store.bind(g, "head.w")?,
            hb: self.store.bind(g, "head.b")?,
            out_act: self.out_act,
        })
    }

    fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::shape(
                "translator",
                format!("slice {h}x{w} must have both sides a positive multiple of 4"),
            ));
        }
        Ok(())
    }

    fn value(&self, name: &str) -> Result<&[f64]> {
        Ok(self.store.get(name)?.value.as_slice())
    }

    /// Kernel-level encoder, used at inference. Matches the graph path
    /// bitwise since both run the same convolution kernels in the same
    /// order.
    pub fn encode_eval(&self, x: &[f64], h: usize, w: usize) -> Result<EncActs> {
        self.check_grid(h, w)?;
        if x.len() != self.c_in * h * w {
            return Err(Error::shape(
                "translator",
                format!("input {} vs {}x{h}x{w}", x.len(), self.c_in),
            ));
        }
        let mut e1 = conv2d_fwd(x, self.c_in, h, w, self.value("enc1.w")?, ENC1_CH, 3, 3, None, 1, 1)?;
        chan_norm_vec(&mut e1, ENC1_CH, h, w);
        relu_vec(&mut e1);
        let mut e2 = conv2d_fwd(&e1, ENC1_CH, h, w, self.value("enc2.w")?, ENC2_CH, 4, 4, None, 2, 1)?;
        chan_norm_vec(&mut e2, ENC2_CH, h / 2, w / 2);
        relu_vec(&mut e2);
        let mut h3 = conv2d_fwd(&e2, ENC2_CH, h / 2, w / 2, self.value("enc3.w")?, BOTTLENECK_CH, 4, 4, None, 2, 1)?;
        chan_norm_vec(&mut h3, BOTTLENECK_CH, h / 4, w / 4);
        relu_vec(&mut h3);
        Ok(EncActs { e1, e2, h3, h, w })
    }

    pub fn pool_eval(&self, acts: &EncActs) -> Vec<f64> {
        gap2d(&acts.h3, BOTTLENECK_CH, acts.h / 4, acts.w / 4)
    }

    pub fn decode_eval(&self, acts: &EncActs, ctx: &[f64]) -> Result<Vec<f64>> {
        if ctx.len() != CONTEXT_DIM {
            return Err(Error::shape(
                "translator",
                format!("context has {} entries, want {CONTEXT_DIM}", ctx.len()),
            ));
        }
        let (h, w) = (acts.h, acts.w);
        let proj = matvec(self.value("inject.w")?, self.value("inject.b")?, ctx);
        let area4 = (h / 4) * (w / 4);
        let mut inj = acts.h3.clone();
        for c in 0..BOTTLENECK_CH {
            for i in 0..area4 {
                inj[c * area4 + i] += proj[c];
            }
        }
        let mut d3 = tconv2d_fwd(&inj, BOTTLENECK_CH, h / 4, w / 4, self.value("dec3.w")?, ENC2_CH, 4, 4, None, 2, 1)?;
        chan_norm_vec(&mut d3, ENC2_CH, h / 2, w / 2);
        relu_vec(&mut d3);
        let mut cat2 = d3;
        cat2.extend_from_slice(&acts.e2);
        let mut d2 = conv2d_fwd(&cat2, 2 * ENC2_CH, h / 2, w / 2, self.value("dec2.w")?, ENC2_CH, 3, 3, None, 1, 1)?;
        chan_norm_vec(&mut d2, ENC2_CH, h / 2, w / 2);
        relu_vec(&mut d2);
        let mut u1 = tconv2d_fwd(&d2, ENC2_CH, h / 2, w / 2, self.value("dec1t.w")?, ENC1_CH, 4, 4, None, 2, 1)?;
        chan_norm_vec(&mut u1, ENC1_CH, h, w);
        relu_vec(&mut u1);
        let mut cat1 = u1;
        cat1.extend_from_slice(&acts.e1);
        let mut d1 = conv2d_fwd(&cat1, 2 * ENC1_CH, h, w, self.value("dec1.w")?, ENC1_CH, 3, 3, None, 1, 1)?;
        chan_norm_vec(&mut d1, ENC1_CH, h, w);
        relu_vec(&mut d1);
        let mut out = conv2d_fwd(&d1, ENC1_CH, h, w, self.value("head.w")?, self.c_out, 3, 3, Some(self.value("head.b")?), 1, 1)?;
        self.out_act.apply_eval(&mut out);
        Ok(out)
    }
}

fn relu_vec(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.max(0.0);
    }
}

/// Kernel-side twin of [`chan_norm_node`]: standardizes each channel of
/// a [C,H,W] map over its spatial plane. Mirrors the graph composite
/// operation for operation so both paths round identically.
fn chan_norm_vec(x: &mut [f64], c: usize, h: usize, w: usize) {
    let area = h * w;
    let mu = gap2d(x, c, h, w);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let m2 = gap2d(&sq, c, h, w);
    for ic in 0..c {
        let inv = (m2[ic] - mu[ic] * mu[ic] + NORM_EPS).powf(-0.5);
        let neg = -mu[ic];
        for i in 0..area {
            x[ic * area + i] = (x[ic * area + i] + neg) * inv;
        }
    }
}

/// Translator parameters bound into one graph.
pub struct TransBind {
    e1w: NodeId,
    e2w: NodeId,
    e3w: NodeId,
    injw: NodeId,
    injb: NodeId,
    d3w: NodeId,
    d2w: NodeId,
    u1w: NodeId,
    d1w: NodeId,
    hw: NodeId,
    hb: NodeId,
    out_act: OutputActivation,
}

/// Encoder activations for one slice, graph-side.
pub struct EncNodes {
    pub e1: NodeId,
    pub e2: NodeId,
    pub h3: NodeId,
}

/// Encoder activations for one slice, kernel-side. These are what a
/// naive single-pass inference would have to keep per slice.
pub struct EncActs {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub h3: Vec<f64>,
    h: usize,
    w: usize,
}

impl EncActs {
    pub fn elems(&self) -> usize {
        self.e1.len() + self.e2.len() + self.h3.len()
    }
}

/// Standardizes each channel of a [C,H,W] node over its spatial plane.
/// Composed from primitive ops so the backward pass needs nothing new;
/// [`chan_norm_vec`] mirrors the exact sequence kernel-side.
fn chan_norm_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let mu = g.gap2d(x)?;
    let x2 = g.mul(x, x)?;
    let m2 = g.gap2d(x2)?;
    let mu2 = g.mul(mu, mu)?;
    let var = g.sub(m2, mu2)?;
    let inv = {
        let shifted = g.shift(var, NORM_EPS)?;
        g.pow_scalar(shifted, -0.5)?
    };
    let neg = g.scale(mu, -1.0)?;
    let centered = g.add_chan_bias(x, neg)?;
    g.mul_chan_gain(centered, inv)
}

pub fn encode_node(g: &mut Graph, t: &TransBind, x: NodeId) -> Result<EncNodes> {
    let c1 = g.conv2d(x, t.e1w, None, 1, 1)?;
    let n1 = chan_norm_node(g, c1)?;
    let e1 = g.relu(n1)?;
    let c2 = g.conv2d(e1, t.e2w, None, 2, 1)?;
    let n2 = chan_norm_node(g, c2)?;
    let e2 = g.relu(n2)?;
    let c3 = g.conv2d(e2, t.e3w, None, 2, 1)?;
    let n3 = chan_norm_node(g, c3)?;
    let h3 = g.relu(n3)?;
    Ok(EncNodes { e1, e2, h3 })
}

pub fn decode_node(g: &mut Graph, t: &TransBind, enc: &EncNodes, ctx: NodeId) -> Result<NodeId> {
    let proj = g.linear(ctx, t.injw, Some(t.injb))?;
    let inj = g.add_chan_bias(enc.h3, proj)?;
    let t3 = g.tconv2d(inj, t.d3w, None, 2, 1)?;
    let n3 = chan_norm_node(g, t3)?;
    let d3 = g.relu(n3)?;
    let cat2 = g.concat(&[d3, enc.e2])?;
    let c2 = g.conv2d(cat2, t.d2w, None, 1, 1)?;
    let n2 = chan_norm_node(g, c2)?;
    let d2 = g.relu(n2)?;
    let t1 = g.tconv2d(d2, t.u1w, None, 2, 1)?;
    let nu = chan_norm_node(g, t1)?;
    let u1 = g.relu(nu)?;
    let cat1 = g.concat(&[u1, enc.e1])?;
    let c1 = g.conv2d(cat1, t.d1w, None, 1, 1)?;
    let n1 = chan_norm_node(g, c1)?;
    let d1 = g.relu(n1)?;
    let pre = g.conv2d(d1, t.hw, Some(t.hb), 1, 1)?;
    t.out_act.apply_node(g, pre)
}

/// Bidirectional recurrent mixer over the pooled per-slice descriptors.
/// Each step sees the descriptor plus a Fourier encoding of its depth;
/// the head emits one context vector per depth.
pub struct ContextMixer {
    pub store: ParamStore,
}

impl ContextMixer {
    pub fn new(seed: u64) -> Result<ContextMixer> {
        let mut store = ParamStore::new("liftc.mixer", seed);
        register_bigru(
            &mut store,
            "mix",
            BOTTLENECK_CH + 2 * DEPTH_FREQS,
            MIXER_HIDDEN,
            CONTEXT_DIM,
            0,
        )?;
        Ok(ContextMixer { store })
    }

    pub fn digest(&self) -> u64 {
        self.store.digest()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BiGru> {
        BiGru::bind(g, &self.store, "mix")
    }

    /// Runs the mixer outside any training graph. Identical arithmetic
    /// to the graph path, so two-pass inference stays bit-exact.
    pub fn eval_contexts(&self, descriptors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let gru = self.bind(&mut g)?;
        let mut pooled = Vec::with_capacity(descriptors.len());
        for d in descriptors {
            pooled.push(g.constant(Tensor::new(vec![d.len()], d.clone())?)?);
        }
        let ctx = mix_context(&mut g, &gru, &pooled, descriptors.len())?;
        Ok(ctx.iter().map(|&n| g.value(n).data.clone()).collect())
    }
}

/// Concatenates each pooled descriptor with its depth encoding, runs
/// the bidirectional mixer over the full stack, and centers every
/// context against the stack mean. The centering means a depth-constant
/// context collapses to zero, so the injection cannot be co-opted as a
/// global decoder bias and only per-slice structure passes through.
pub fn mix_context(
    g: &mut Graph,
    gru: &BiGru,
    pooled: &[NodeId],
    total_depth: usize,
) -> Result<Vec<NodeId>> {
    if pooled.is_empty() || pooled.len() != total_depth {
        return Err(Error::shape(
            "mix_context",
            format!("{} descriptors for depth {total_depth}", pooled.len()),
        ));
    }
    let mut inputs = Vec::with_capacity(pooled.len());
    for (i, &p) in pooled.iter().enumerate() {
        let enc = fourier_encode(i + 1, total_depth, DEPTH_FREQS)?;
        let e = g.constant(Tensor::new(vec![enc.values.len()], enc.values)?)?;
        inputs.push(g.concat(&[p, e])?);
    }
    let raw = gru.run(g, &inputs)?;
    let mut sum = raw[0];
    for &r in &raw[1..] {
        sum = g.add(sum, r)?;
    }
    let mean = g.scale(sum, 1.0 / total_depth as f64)?;
    raw.iter().map(|&r| g.sub(r, mean)).collect()
}

/// Pixel-wise data term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelKind {
    L1,
    Charbonnier { eps: f64 },
}

/// Structural term. The multi-scale similarity needs single-channel
/// blocks at least one window wide per axis; the residual-magnitude
/// variant regularizes the refinement delta instead and needs that
/// delta passed alongside the prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimilarityKind {
    OneMinusMsssim,
    ResidualMagnitude,
}

/// Through-plane term: either the depth-derivative mismatch alone or
/// the forward-difference mismatch along all three axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialKind {
    DzL1,
    Grad3L1,
}

/// Weighted three-term translation loss. Terms with zero weight are
/// skipped entirely and reported as zero, so a configuration may use
/// blocks too small for the similarity window by turning it off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_z: f64,
    pub pixel: PixelKind,
    pub similarity: SimilarityKind,
    pub spatial: SpatialKind,
}

impl LossWeights {
    /// Absolute error, multi-scale similarity, depth-derivative match.
    pub fn missing_mr() -> LossWeights {
        LossWeights {
            lambda_p: 1.0,
            lambda_s: 0.2,
            lambda_z: 0.5,
            pixel: PixelKind::L1,
            similarity: SimilarityKind::OneMinusMsssim,
            spatial: SpatialKind::DzL1,
        }
    }

    /// Charbonnier error, residual-magnitude regularizer, full 3-D
    /// gradient match. Suited to the residual refinement stage.
    pub fn mr_to_ct() -> LossWeights {
        LossWeights {
            lambda_p: 1.0,
            lambda_s: 0.2,
            lambda_z: 0.5,
            pixel: PixelKind::Charbonnier { eps: 1e-3 },
            similarity: SimilarityKind::ResidualMagnitude,
            spatial: SpatialKind::Grad3L1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_p, self.lambda_s, self.lambda_z];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if ls.iter().all(|l| *l == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        if let PixelKind::Charbonnier { eps } = self.pixel {
            if !(eps > 0.0) {
                return Err(Error::invalid("charbonnier eps must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::missing_mr()
    }
}

/// Raw term values plus the weighted total. The identity
/// `lambda_p*pixel + lambda_s*similarity + lambda_z*spatial == total`
/// holds to within accumulation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermBreakdown {
    pub pixel: f64,
    pub similarity: f64,
    pub spatial: f64,
    pub total: f64,
}

struct MaskView<'a> {
    mask: Option<&'a [bool]>,
}

impl MaskView<'_> {
    fn keep(&self, vox: usize) -> bool {
        self.mask.map(|m| m[vox]).unwrap_or(true)
    }
}

/// Translation loss on matching volumes. A mask (one flag per voxel of
/// a channel, shared across channels) removes voxels from the pixel and
/// spatial terms and from the residual-magnitude regularizer; the
/// windowed similarity term always sees the full block. Pass the
/// refinement delta as `residual` when the similarity kind needs it.
pub fn liftc_loss(
    pred: &Volume,
    target: &Volume,
    w: &LossWeights,
    mask: Option<&[bool]>,
    residual: Option<&Volume>,
) -> Result<TermBreakdown> {
    w.validate()?;
    if pred.channels() != target.channels()
        || pred.height() != target.height()
        || pred.width() != target.width()
        || pred.depth() != target.depth()
    {
        return Err(Error::shape("liftc_loss", "prediction and target shapes differ".to_string()));
    }
    let vpc = pred.voxels_per_channel();
    if let Some(m) = mask {
        if m.len() != vpc {
            return Err(Error::shape(
                "liftc_loss",
                format!("mask has {} entries for {vpc} voxels", m.len()),
            ));
        }
    }
    let mv = MaskView { mask };

    let pixel = if w.lambda_p > 0.0 {
        pixel_term(pred, target, w.pixel, &mv)?
    } else {
        0.0
    };
    let similarity = if w.lambda_s > 0.0 {
        match w.similarity {
            SimilarityKind::OneMinusMsssim => {
                if pred.channels() != 1 {
                    return Err(Error::shape(
                        "liftc_loss",
                        "similarity term needs single-channel volumes".to_string(),
                    ));
                }
                let dims = [1, pred.height(), pred.width(), pred.depth()];
                let span = target.value_range().span();
                let ms = msssim_block(pred.data(), target.data(), dims, 7, 1.5, &MSSSIM_WEIGHTS, span)?;
                1.0 - ms
            }
            SimilarityKind::ResidualMagnitude => {
                let r = residual.ok_or_else(|| {
                    Error::invalid("residual-magnitude similarity needs the residual volume")
                })?;
                if r.data().len() != pred.data().len() {
                    return Err(Error::shape("liftc_loss", "residual shape differs from prediction".to_string()));
                }
                masked_mean_abs(r.data(), vpc, &mv)?
            }
        }
    } else {
        0.0
    };
    let spatial = if w.lambda_z > 0.0 {
        match w.spatial {
            SpatialKind::DzL1 => dz_term(pred, target, &mv)?,
            SpatialKind::Grad3L1 => grad3_term(pred, target, &mv)?,
        }
    } else {
        0.0
    };

    let mut total = None;
    for (lambda, term) in [(w.lambda_p, pixel), (w.lambda_s, similarity), (w.lambda_z, spatial)] {
        if lambda > 0.0 {
            let wt = lambda * term;
            total = Some(match total {
                None => wt,
                Some(t) => t + wt,
            });
        }
    }
    Ok(TermBreakdown {
        pixel,
        similarity,
        spatial,
        total: total.expect("validate guarantees a positive weight"),
    })
}

fn pixel_term(pred: &Volume, target: &Volume, kind: PixelKind, mv: &MaskView) -> Result<f64> {
    let vpc = pred.voxels_per_channel();
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, (p, t)) in pred.data().iter().zip(target.data().iter()).enumerate() {
        if !mv.keep(i % vpc) {
            continue;
        }
        let d = p - t;
        acc += match kind {
            PixelKind::L1 => d.abs(),
            PixelKind::Charbonnier { eps } => (d * d + eps * eps).sqrt() - eps,
        };
        count += 1;
    }
    if count == 0 {
        return Err(Error::degenerate("liftc_loss", "mask excludes every voxel".to_string()));
    }
    Ok(acc / count as f64)
}

fn masked_mean_abs(data: &[f64], vpc: usize, mv: &MaskView) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, v) in data.iter().enumerate() {
        if !mv.keep(i % vpc) {
            continue;
        }
        acc += v.abs();
        count += 1;
    }
    if count == 0 {
        return Err(Error::degenerate("liftc_loss", "mask excludes every voxel".to_string()));
    }
    Ok(acc / count as f64)
}

fn dz_term(pred: &Volume, target: &Volume, mv: &MaskView) -> Result<f64> {
    let (c, h, w, d) = (pred.channels(), pred.height(), pred.width(), pred.depth());
    if d < 2 {
        return Err(Error::shape("liftc_loss", "depth term needs depth >= 2".to_string()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let vox = (i * w + j) * d;
                for k in 0..d - 1 {
                    if !(mv.keep(vox + k) && mv.keep(vox + k + 1)) {
                        continue;
                    }
                    let dp = pred.at(ch, i, j, k + 1) - pred.at(ch, i, j, k);
                    let dt = target.at(ch, i, j, k + 1) - target.at(ch, i, j, k);
                    acc += (dp - dt).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::degenerate("liftc_loss", "mask excludes every depth pair".to_string()));
    }
    Ok(acc / count as f64)
}

fn grad3_term(pred: &Volume, target: &Volume, mv: &MaskView) -> Result<f64> {
    let (c, h, w, d) = (pred.channels(), pred.height(), pred.width(), pred.depth());
    if h < 2 || w < 2 || d < 2 {
        return Err(Error::shape(
            "liftc_loss",
            "gradient term needs every spatial axis >= 2".to_string(),
        ));
    }
    let vox = |i: usize, j: usize, k: usize| (i * w + j) * d + k;
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 0..h - 1 {
            for j in 0..w {
                for k in 0..d {
                    if !(mv.keep(vox(i, j, k)) && mv.keep(vox(i + 1, j, k))) {
                        continue;
                    }
                    let dp = pred.at(ch, i + 1, j, k) - pred.at(ch, i, j, k);
                    let dt = target.at(ch, i + 1, j, k) - target.at(ch, i, j, k);
                    acc += (dp - dt).abs();
                    count += 1;
                }
            }
        }
    }
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w - 1 {
                for k in 0..d {
                    if !(mv.keep(vox(i, j, k)) && mv.keep(vox(i, j + 1, k))) {
                        continue;
                    }
                    let dp = pred.at(ch, i, j + 1, k) - pred.at(ch, i, j, k);
                    let dt = target.at(ch, i, j + 1, k) - target.at(ch, i, j, k);
                    acc += (dp - dt).abs();
                    count += 1;
                }
            }
        }
    }
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                for k in 0..d - 1 {
                    if !(mv.keep(vox(i, j, k)) && mv.keep(vox(i, j, k + 1))) {
                        continue;
                    }
                    let dp = pred.at(ch, i, j, k + 1) - pred.at(ch, i, j, k);
                    let dt = target.at(ch, i, j, k + 1) - target.at(ch, i, j, k);
                    acc += (dp - dt).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::degenerate("liftc_loss", "mask excludes every neighbor pair".to_string()));
    }
    Ok(acc / count as f64)
}

/// Graph-side loss terms. `total` is always present; a term node is
/// absent exactly when its weight is zero.
pub struct LossNodes {
    pub total: NodeId,
    pub pixel: Option<NodeId>,
    pub similarity: Option<NodeId>,
    pub spatial: Option<NodeId>,
}

/// Differentiable twin of [`liftc_loss`] without masking, matching it
/// bitwise on full volumes. `span` is the target intensity span used by
/// the similarity stabilizers.
pub fn liftc_loss_node(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    w: &LossWeights,
    residual: Option<NodeId>,
    span: f64,
) -> Result<LossNodes> {
    w.validate()?;
    let dims_vec = g.value(pred).shape.clone();
    if dims_vec.len() != 4 || g.value(target).shape != dims_vec {
        return Err(Error::shape(
            "liftc_loss",
            format!("want matching [C,H,W,D] blocks, got {dims_vec:?}"),
        ));
    }
    let dims = [dims_vec[0], dims_vec[1], dims_vec[2], dims_vec[3]];

    let pixel = if w.lambda_p > 0.0 {
        let d = g.sub(pred, target)?;
        Some(match w.pixel {
            PixelKind::L1 => {
                let a = g.abs(d)?;
                g.mean(a)?
            }
            PixelKind::Charbonnier { eps } => {
                let dd = g.mul(d, d)?;
                let s = g.shift(dd, eps * eps)?;
                let r = g.sqrt(s)?;
                let rm = g.shift(r, -eps)?;
                g.mean(rm)?
            }
        })
    } else {
        None
    };

    let similarity = if w.lambda_s > 0.0 {
        Some(match w.similarity {
            SimilarityKind::OneMinusMsssim => {
                if dims[0] != 1 {
                    return Err(Error::shape(
                        "liftc_loss",
                        "similarity term needs single-channel blocks".to_string(),
                    ));
                }
                let ms = msssim_node(g, pred, target, dims, 7, 1.5, &MSSSIM_WEIGHTS, span)?;
                let neg = g.scale(ms, -1.0)?;
                g.shift(neg, 1.0)?
            }
            SimilarityKind::ResidualMagnitude => {
                let r = residual.ok_or_else(|| {
                    Error::invalid("residual-magnitude similarity needs the residual node")
                })?;
                let a = g.abs(r)?;
                g.mean(a)?
            }
        })
    } else {
        None
    };

    let spatial = if w.lambda_z > 0.0 {
        Some(match w.spatial {
            SpatialKind::DzL1 => {
                let dp = g.delta_axis(pred, 3)?;
                let dt = g.delta_axis(target, 3)?;
                let d = g.sub(dp, dt)?;
                let a = g.abs(d)?;
                g.mean(a)?
            }
            SpatialKind::Grad3L1 => {
                let mut parts = Vec::with_capacity(3);
                for axis in 1..=3 {
                    let dp = g.delta_axis(pred, axis)?;
                    let dt = g.delta_axis(target, axis)?;
                    let d = g.sub(dp, dt)?;
                    let a = g.abs(d)?;
                    let n = g.value(a).numel();
                    parts.push(g.reshape(a, vec![n])?);
                }
                let cat = g.concat(&parts)?;
                g.mean(cat)?
            }
        })
    } else {
        None
    };

    let mut total = None;
    for (lambda, term) in [(w.lambda_p, pixel), (w.lambda_s, similarity), (w.lambda_z, spatial)] {
        if let Some(t) = term {
            let wt = g.scale(t, lambda)?;
            total = Some(match total {
                None => wt,
                Some(acc) => g.add(acc, wt)?,
            });
        }
    }
    Ok(LossNodes {
        total: total.expect("validate guarantees a positive weight"),
        pixel,
        similarity,
        spatial,
    })
}

/// Graph twin of the kernel-side multi-scale similarity, mirroring its
/// arithmetic operation for operation so values agree bitwise.
fn msssim_node(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    dims: [usize; 4],
    window: usize,
    sigma: f64,
    weights: &[f64],
    max: f64,
) -> Result<NodeId> {
    let m = msssim_scales(dims, window, weights.len());
    if m == 0 {
        return Err(Error::shape(
            "msssim",
            format!("block {dims:?} smaller than window {window}"),
        ));
    }
    let wsum: f64 = weights[..m].iter().sum();
    let taps = gaussian_taps(window, sigma);
    let c1 = (0.01 * max) * (0.01 * max);
    let c2 = (0.03 * max) * (0.03 * max);
    let (mut cur_x, mut cur_y) = (x, y);
    let mut out: Option<NodeId> = None;
    for scale in 0..m {
        let xx = g.mul(cur_x, cur_x)?;
        let yy = g.mul(cur_y, cur_y)?;
        let xy = g.mul(cur_x, cur_y)?;
        let mx = g.gauss_blur3(cur_x, &taps)?;
        let my = g.gauss_blur3(cur_y, &taps)?;
        let mxx = g.gauss_blur3(xx, &taps)?;
        let myy = g.gauss_blur3(yy, &taps)?;
        let mxy = g.gauss_blur3(xy, &taps)?;
        let mx2 = g.mul(mx, mx)?;
        let my2 = g.mul(my, my)?;
        let vx = g.sub(mxx, mx2)?;
        let vy = g.sub(myy, my2)?;
        let mxmy = g.mul(mx, my)?;
        let cxy = g.sub(mxy, mxmy)?;
        let cs_num = {
            let t = g.scale(cxy, 2.0)?;
            g.shift(t, c2)?
        };
        let cs_den = {
            let t = g.add(vx, vy)?;
            g.shift(t, c2)?
        };
        let ratio = if scale + 1 == m {
            let two_mx = g.scale(mx, 2.0)?;
            let l_num = {
                let t = g.mul(two_mx, my)?;
                g.shift(t, c1)?
            };
            let l_den = {
                let t = g.add(mx2, my2)?;
                g.shift(t, c1)?
            };
            let num = g.mul(l_num, cs_num)?;
            let den = g.mul(l_den, cs_den)?;
            g.div(num, den)?
        } else {
            g.div(cs_num, cs_den)?
        };
        let term = g.mean(ratio)?;
        let clamped = g.clamp_min(term, MSSSIM_FLOOR)?;
        let p = g.pow_scalar(clamped, weights[scale] / wsum)?;
        out = Some(match out {
            None => p,
            Some(o) => g.mul(o, p)?,
        });
        if scale + 1 < m {
            cur_x = g.avgpool3d_half(cur_x)?;
            cur_y = g.avgpool3d_half(cur_y)?;
        }
    }
    Ok(out.expect("at least one scale"))
}

/// Which depths get decoded in a training step. Context is always mixed
/// over the full stack; only the decode and loss run on the subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodedSubset {
    /// One contiguous block of slices, placed uniformly at random.
    Block { len: usize },
    /// Several independently placed short windows; they may overlap.
    Windows { count: usize, len: usize },
}

impl DecodedSubset {
    pub fn sample(&self, depth: usize, s: &mut Stream) -> Vec<(usize, usize)> {
        let pick = |len: usize, s: &mut Stream| {
            let eff = len.max(1).min(depth);
            let start = s.below(depth - eff + 1);
            (start, eff)
        };
        match *self {
            DecodedSubset::Block { len } => vec![pick(len, s)],
            DecodedSubset::Windows { count, len } => {
                (0..count.max(1)).map(|_| pick(len, s)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Translate source to target directly.
    Direct,
    /// Train a zero-context base first, freeze it, then train a
    /// refinement translator plus mixer to predict a residual on top.
    Residual,
}

#[derive(Debug, Clone)]
pub struct TrainLiftcConfig {
    pub steps: usize,
    pub seed: u64,
    /// Translator rate; the mixer runs an order of magnitude hotter
    /// since its gradient arrives attenuated through the injection.
    pub lr_translator: f64,
    pub lr_mixer: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub subset: DecodedSubset,
    /// Off switches the mixer for the zero-context ablation.
    pub use_mixer: bool,
    pub out_act: OutputActivation,
    /// Validation cadence in steps; 0 validates only at the end.
    pub val_every: usize,
    /// Steps for the frozen base stage in residual mode.
    pub stage1_steps: usize,
}

impl Default for TrainLiftcConfig {
    fn default() -> Self {
        TrainLiftcConfig {
            steps: 400,
            seed: 2026,
            lr_translator: 1e-3,
            lr_mixer: 1e-2,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            subset: DecodedSubset::Block { len: 8 },
            use_mixer: true,
            out_act: OutputActivation::Tanh,
            val_every: 100,
            stage1_steps: 400,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ValRecord {
    pub step: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub val: Vec<ValRecord>,
}

/// A trained translator with its optional mixer, plus the frozen base
/// stage when refinement was trained in residual mode.
pub struct LiftcModel {
    pub translator: Translator,
    pub mixer: Option<ContextMixer>,
    pub residual_base: Option<Translator>,
}

impl LiftcModel {
    pub fn infer(&self, x: &Volume) -> Result<Volume> {
        match &self.residual_base {
            None => Ok(two_pass_infer(x, &self.translator, self.mixer.as_ref())?.0),
            Some(base) => Ok(residual_infer(x, base, &self.translator, self.mixer.as_ref(), ValueRange::UNIT)?.0),
        }
    }
}

fn slice_feed(v: &Volume, d: usize) -> Vec<f64> {
    let (c, h, w) = (v.channels(), v.height(), v.width());
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out.push(v.at(ch, i, j, d));
            }
        }
    }
    out
}

fn block_data(v: &Volume, start: usize, len: usize) -> Vec<f64> {
    let (c, h, w) = (v.channels(), v.height(), v.width());
    let mut out = Vec::with_capacity(c * h * w * len);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                for k in 0..len {
                    out.push(v.at(ch, i, j, start + k));
                }
            }
        }
    }
    out
}

fn check_pairs(pairs: &[PairedSample]) -> Result<()> {
    let first = pairs.first().ok_or_else(|| Error::invalid("no training pairs"))?;
    let dims = |v: &Volume| (v.channels(), v.height(), v.width(), v.depth());
    let (sc, h, w, d) = dims(&first.source);
    let tc = first.target.channels();
    for p in pairs {
        if dims(&p.source) != (sc, h, w, d) || dims(&p.target) != (tc, h, w, d) {
            return Err(Error::shape(
                "train_liftc",
                format!("subject {} has mismatched dimensions", p.subject_id),
            ));
        }
    }
    if d < 2 {
        return Err(Error::shape("train_liftc", "training needs depth >= 2".to_string()));
    }
    Ok(())
}

/// Trains the translator (and mixer) on paired volumes. Every step
/// encodes all slices of one subject, mixes context over the full
/// stack, decodes a sampled subset of depths, and applies the weighted
/// loss there. The translator and mixer sit in separate stores stepped
/// with their own learning rates. Any non-finite loss aborts. In
/// residual mode the frozen base stage trains first with the
/// residual-magnitude term switched off, since no delta exists yet.
pub fn train_liftc(
    train: &[PairedSample],
    val: &[PairedSample],
    mode: TrainMode,
    cfg: &TrainLiftcConfig,
) -> Result<(LiftcModel, TrainTrace)> {
    check_pairs(train)?;
    cfg.weights.validate()?;
    match mode {
        TrainMode::Direct => train_direct(train, val, cfg),
        TrainMode::Residual => {
            let mut base_weights = cfg.weights;
            if base_weights.similarity == SimilarityKind::ResidualMagnitude {
                base_weights.lambda_s = 0.0;
            }
            let base_cfg = TrainLiftcConfig {
                steps: cfg.stage1_steps,
                seed: derive_seed(cfg.seed, "liftc.base"),
                use_mixer: false,
                out_act: OutputActivation::Tanh,
                weights: base_weights,
                ..cfg.clone()
            };
            let (base_model, _) = train_direct(train, val, &base_cfg)?;
            let mut base = base_model.translator;
            base.store.freeze();
            train_residual(train, val, cfg, base)
        }
    }
}

fn val_mae(
    val: &[PairedSample],
    translator: &Translator,
    mixer: Option<&ContextMixer>,
    base: Option<&Translator>,
) -> Result<f64> {
    let mut acc = 0.0;
    for pair in val {
        let pred = match base {
            None => two_pass_infer(&pair.source, translator, mixer)?.0,
            Some(b) => residual_infer(&pair.source, b, translator, mixer, ValueRange::UNIT)?.0,
        };
        let n = pred.data().len() as f64;
        let mut sum = 0.0;
        for (p, t) in pred.data().iter().zip(pair.target.data().iter()) {
            sum += (p - t).abs();
        }
        acc += sum / n;
    }
    Ok(acc / val.len() as f64)
}

fn train_direct(
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &TrainLiftcConfig,
) -> Result<(LiftcModel, TrainTrace)> {
    let c_in = train[0].source.channels();
    let c_out = train[0].target.channels();
    let span = train[0].target.value_range().span();
    let mut translator = Translator::new(derive_seed(cfg.seed, "liftc.translator"), c_in, c_out, cfg.out_act)?;
    let mut mixer = if cfg.use_mixer {
        Some(ContextMixer::new(derive_seed(cfg.seed, "liftc.mixer"))?)
    } else {
        None
    };
    let opt_t = OptimConfig::adamw(cfg.lr_translator, cfg.weight_decay)
        .with_group_lr(INJECT_GROUP, cfg.lr_mixer);
    let opt_m = OptimConfig::adamw(cfg.lr_mixer, cfg.weight_decay);
    let mut trace = TrainTrace::default();

    for t in 0..cfg.steps {
        let mut s = Stream::new(derive_seed_index(cfg.seed, "liftc.step", t as u64));
        let pair = &train[s.below(train.len())];
        let (h, w, depth) = (pair.source.height(), pair.source.width(), pair.source.depth());

        let mut g = Graph::new();
        let tb = translator.bind(&mut g)?;
        let gru = match &mixer {
            Some(m) => Some(m.bind(&mut g)?),
            None => None,
        };

        let mut encs = Vec::with_capacity(depth);
        let mut pooled = Vec::with_capacity(depth);
        for d in 0..depth {
            let xd = g.constant(Tensor::new(vec![c_in, h, w], slice_feed(&pair.source, d))?)?;
            let enc = encode_node(&mut g, &tb, xd)?;
            pooled.push(g.gap2d(enc.h3)?);
            encs.push(enc);
        }
        let contexts = match &gru {
            Some(gr) => mix_context(&mut g, gr, &pooled, depth)?,
            None => {
                let mut zs = Vec::with_capacity(depth);
                for _ in 0..depth {
                    zs.push(g.constant(Tensor::new(vec![CONTEXT_DIM], vec![0.0; CONTEXT_DIM])?)?);
                }
                zs
            }
        };

        let mut totals = Vec::new();
        for (start, len) in cfg.subset.sample(depth, &mut s) {
            let mut parts = Vec::with_capacity(len);
            for d in start..start + len {
                parts.push(decode_node(&mut g, &tb, &encs[d], contexts[d])?);
            }
            let block = g.stack_last(&parts)?;
            let tgt = g.constant(Tensor::new(vec![c_out, h, w, len], block_data(&pair.target, start, len))?)?;
            let ln = liftc_loss_node(&mut g, block, tgt, &cfg.weights, None, span)?;
            totals.push(ln.total);
        }
        let loss = if totals.len() == 1 {
            totals[0]
        } else {
            let cat = g.concat(&totals)?;
            g.mean(cat)?
        };
        let lv = g.item(loss)?;
        if !lv.is_finite() {
            return Err(Error::NonFinite { node: format!("training loss at step {t}") });
        }
        let grads = g.backward(loss)?;
        translator.store.accumulate(&g, &grads)?;
        translator.store.adam_step(&opt_t)?;
        translator.store.zero_grads();
        if let Some(m) = &mut mixer {
            m.store.accumulate(&g, &grads)?;
            m.store.adam_step(&opt_m)?;
            m.store.zero_grads();
        }
        trace.steps.push(StepRecord { step: t, loss: lv });

        let last = t + 1 == cfg.steps;
        if !val.is_empty() && (last || (cfg.val_every > 0 && (t + 1) % cfg.val_every == 0)) {
            let mae = val_mae(val, &translator, mixer.as_ref(), None)?;
            trace.val.push(ValRecord { step: t + 1, mae });
        }
    }
    Ok((LiftcModel { translator, mixer, residual_base: None }, trace))
}

fn train_residual(
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &TrainLiftcConfig,
    base: Translator,
) -> Result<(LiftcModel, TrainTrace)> {
    let c_in = train[0].source.channels();
    let c_out = train[0].target.channels();
    let span = train[0].target.value_range().span();
    let mut refine = Translator::new(
        derive_seed(cfg.seed, "liftc.refine"),
        c_in,
        c_out,
        OutputActivation::Identity,
    )?;
    refine.zero_head()?;
    let mut mixer = ContextMixer::new(derive_seed(cfg.seed, "liftc.mixer"))?;
    let opt_t = OptimConfig::adamw(cfg.lr_translator, cfg.weight_decay)
        .with_group_lr(INJECT_GROUP, cfg.lr_mixer);
    let opt_m = OptimConfig::adamw(cfg.lr_mixer, cfg.weight_decay);
    let base_digest = base.digest();
    let mut base_preds: Vec<Option<Volume>> = vec![None; train.len()];
    let mut trace = TrainTrace::default();

    for t in 0..cfg.steps {
        let mut s = Stream::new(derive_seed_index(cfg.seed, "liftc.step", t as u64));
        let idx = s.below(train.len());
        let pair = &train[idx];
        let (h, w, depth) = (pair.source.height(), pair.source.width(), pair.source.depth());
        if base_preds[idx].is_none() {
            base_preds[idx] = Some(two_pass_infer(&pair.source, &base, None)?.0);
        }
        let base_pred = base_preds[idx].as_ref().expect("cached above");

        let mut g = Graph::new();
        let tb = refine.bind(&mut g)?;
        let gru = mixer.bind(&mut g)?;
        let mut encs = Vec::with_capacity(depth);
        let mut pooled = Vec::with_capacity(depth);
        for d in 0..depth {
            let xd = g.constant(Tensor::new(vec![c_in, h, w], slice_feed(&pair.source, d))?)?;
            let enc = encode_node(&mut g, &tb, xd)?;
            pooled.push(g.gap2d(enc.h3)?);
            encs.push(enc);
        }
        let contexts = mix_context(&mut g, &gru, &pooled, depth)?;

        let mut totals = Vec::new();
        for (start, len) in cfg.subset.sample(depth, &mut s) {
            let mut parts = Vec::with_capacity(len);
            for d in start..start + len {
                parts.push(decode_node(&mut g, &tb, &encs[d], contexts[d])?);
            }
            let delta = g.stack_last(&parts)?;
            let base_block = g.constant(Tensor::new(vec![c_out, h, w, len], block_data(base_pred, start, len))?)?;
            let pred = g.add(delta, base_block)?;
            let tgt = g.constant(Tensor::new(vec![c_out, h, w, len], block_data(&pair.target, start, len))?)?;
            let ln = liftc_loss_node(&mut g, pred, tgt, &cfg.weights, Some(delta), span)?;
            totals.push(ln.total);
        }
        let loss = if totals.len() == 1 {
            totals[0]
        } else {
            let cat = g.concat(&totals)?;
            g.mean(cat)?
        };
        let lv = g.item(loss)?;
        if !lv.is_finite() {
            return Err(Error::NonFinite { node: format!("training loss at step {t}") });
        }
        let grads = g.backward(loss)?;
        refine.store.accumulate(&g, &grads)?;
        refine.store.adam_step(&opt_t)?;
        refine.store.zero_grads();
        mixer.store.accumulate(&g, &grads)?;
        mixer.store.adam_step(&opt_m)?;
        mixer.store.zero_grads();
        trace.steps.push(StepRecord { step: t, loss: lv });

        let last = t + 1 == cfg.steps;
        if last || (cfg.val_every > 0 && (t + 1) % cfg.val_every == 0) {
            if base.digest() != base_digest {
                return Err(Error::Frozen { label: "liftc.base".to_string() });
            }
            if !val.is_empty() {
                let mae = val_mae(val, &refine, Some(&mixer), Some(&base))?;
                trace.val.push(ValRecord { step: t + 1, mae });
            }
        }
    }
    Ok((LiftcModel { translator: refine, mixer: Some(mixer), residual_base: Some(base) }, trace))
}

#[derive(Debug, Default, Clone, Copy)]
struct ActCounter {
    current: usize,
    peak: usize,
}

impl ActCounter {
    fn alloc(&mut self, n: usize) {
        self.current += n;
        self.peak = self.peak.max(self.current);
    }

    fn free(&mut self, n: usize) {
        self.current -= n;
    }
}

/// Retained-activation accounting for the two inference passes. Peaks
/// count floats held across slices, not transient convolution buffers:
/// the first pass keeps at most one slice's encoder activations plus
/// the pooled descriptors gathered so far.
#[derive(Debug, Clone, Copy)]
pub struct PassStats {
    pub pass1_peak: usize,
    pub pass2_peak: usize,
    pub slice_act_elems: usize,
    pub descriptor_total: usize,
}

/// Memory-lean inference: a first pass over the stack keeps only each
/// slice's pooled descriptor, the mixer turns those into contexts, and
/// a second pass re-encodes each slice to decode it. Output is
/// bit-identical to keeping every activation alive.
pub fn two_pass_infer(
    x: &Volume,
    translator: &Translator,
    mixer: Option<&ContextMixer>,
) -> Result<(Volume, PassStats)> {
    let (h, w, depth) = (x.height(), x.width(), x.depth());
    if x.channels() != translator.c_in {
        return Err(Error::shape(
            "two_pass_infer",
            format!("{} input channels, translator wants {}", x.channels(), translator.c_in),
        ));
    }
    let mut pass1 = ActCounter::default();
    let mut slice_act_elems = 0;
    let mut descriptors = Vec::with_capacity(depth);
    for d in 0..depth {
        let acts = translator.encode_eval(&slice_feed(x, d), h, w)?;
        slice_act_elems = acts.elems();
        pass1.alloc(acts.elems());
        let pooled = translator.pool_eval(&acts);
        pass1.free(acts.elems());
        pass1.alloc(pooled.len());
        descriptors.push(pooled);
    }
    let contexts = match mixer {
        Some(m) => m.eval_contexts(&descriptors)?,
        None => vec![vec![0.0; CONTEXT_DIM]; depth],
    };

    let mut pass2 = ActCounter::default();
    let c_out = translator.c_out;
    let mut data = vec![0.0; c_out * h * w * depth];
    for d in 0..depth {
        let acts = translator.encode_eval(&slice_feed(x, d), h, w)?;
        pass2.alloc(acts.elems());
        let slice = translator.decode_eval(&acts, &contexts[d])?;
        pass2.free(acts.elems());
        for ch in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    data[((ch * h + i) * w + j) * depth + d] =
                        slice[(ch * h + i) * w + j].clamp(-1.0, 1.0);
                }
            }
        }
    }
    let out = Volume::new(c_out, h, w, depth, data, ValueRange::UNIT)?;
    let stats = PassStats {
        pass1_peak: pass1.peak,
        pass2_peak: pass2.peak,
        slice_act_elems,
        descriptor_total: depth * BOTTLENECK_CH,
    };
    Ok((out, stats))
}

/// Naive single-pass inference keeping every slice's encoder
/// activations alive at once. Exists to pin down what the two-pass
/// path saves and to prove both produce identical bits.
pub fn single_pass_reference(
    x: &Volume,
    translator: &Translator,
    mixer: Option<&ContextMixer>,
) -> Result<(Volume, usize)> {
    let (h, w, depth) = (x.height(), x.width(), x.depth());
    let mut counter = ActCounter::default();
    let mut all_acts = Vec::with_capacity(depth);
    let mut descriptors = Vec::with_capacity(depth);
    for d in 0..depth {
        let acts = translator.encode_eval(&slice_feed(x, d), h, w)?;
        counter.alloc(acts.elems());
        let pooled = translator.pool_eval(&acts);
        counter.alloc(pooled.len());
        descriptors.push(pooled);
        all_acts.push(acts);
    }
    let contexts = match mixer {
        Some(m) => m.eval_contexts(&descriptors)?,
        None => vec![vec![0.0; CONTEXT_DIM]; depth],
    };
    let c_out = translator.c_out;
    let mut data = vec![0.0; c_out * h * w * depth];
    for (d, acts) in all_acts.iter().enumerate() {
        let slice = translator.decode_eval(acts, &contexts[d])?;
        for ch in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    data[((ch * h + i) * w + j) * depth + d] =
                        slice[(ch * h + i) * w + j].clamp(-1.0, 1.0);
                }
            }
        }
    }
    let out = Volume::new(c_out, h, w, depth, data, ValueRange::UNIT)?;
    Ok((out, counter.peak))
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualStats {
    /// Euclidean norm of the refinement delta over the whole volume.
    pub delta_l2: f64,
    pub delta_mean_abs: f64,
}

/// Residual inference: frozen base prediction plus refinement delta,
/// clamped into the output range.
pub fn residual_infer(
    x: &Volume,
    base: &Translator,
    refine: &Translator,
    mixer: Option<&ContextMixer>,
    out_range: ValueRange,
) -> Result<(Volume, ResidualStats)> {
    let (base_out, _) = two_pass_infer(x, base, None)?;
    let (delta, _) = two_pass_infer(x, refine, mixer)?;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut data = Vec::with_capacity(base_out.data().len());
    for (b, d) in base_out.data().iter().zip(delta.data().iter()) {
        sq += d * d;
        abs += d.abs();
        data.push((b + d).clamp(out_range.lo, out_range.hi));
    }
    let n = delta.data().len() as f64;
    let out = Volume::new(
        base_out.channels(),
        base_out.height(),
        base_out.width(),
        base_out.depth(),
        data,
        out_range,
    )?;
    Ok((out, ResidualStats { delta_l2: sq.sqrt(), delta_mean_abs: abs / n }))
}


#[cfg(test)]
mod pilot {
    //! Desk-budget sizing runs, excluded from the default suite. Run
    //! with --ignored --nocapture to print timings and margins.
    use super::*;
    use crate::metrics::dz_metrics;
    use crate::phantom::{context_probe_pair, render_pair, sample_phantom, PhantomSpec};
    use crate::rng::derive_seed_index;
    use std::time::Instant;

    fn pairs_at(seed: u64, grid: usize, eta: f64, n: usize, tag: &str) -> Vec<PairedSample> {
        let spec = PhantomSpec { grid, eta, ..PhantomSpec::default() };
        (0..n)
            .map(|i| {
                let params =
                    sample_phantom(derive_seed_index(seed, tag, i as u64), &spec).unwrap();
                render_pair(&format!("{tag}{i:03}"), &params).unwrap()
            })
            .collect()
    }

    fn slice_l1(model: &LiftcModel, pair: &PairedSample, d: usize) -> f64 {
        let pred = model.infer(&pair.source).unwrap();
        let (h, w) = (pred.height(), pred.width());
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += (pred.at(0, i, j, d) - pair.target.at(0, i, j, d)).abs();
            }
        }
        acc / (h * w) as f64
    }

    #[test]
    #[ignore]
    fn context_gain_pilot() {
        let grid = 16;
        let eta = 0.5;
        let train = pairs_at(401, grid, eta, 12, "train");
        let test = pairs_at(402, grid, eta, 20, "test");
        let steps = 600;
        let base_cfg = TrainLiftcConfig {
            steps,
            seed: 515,
            val_every: 0,
            subset: DecodedSubset::Block { len: 8 },
            ..TrainLiftcConfig::default()
        };

        let t0 = Instant::now();
        let (mixer_model, _) = train_liftc(&train, &[], TrainMode::Direct, &base_cfg).unwrap();
        let t_mix = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let zc_cfg = TrainLiftcConfig { use_mixer: false, ..base_cfg.clone() };
        let (zc_model, _) = train_liftc(&train, &[], TrainMode::Direct, &zc_cfg).unwrap();
        let t_zc = t0.elapsed().as_secs_f64();
        println!("train {steps} steps grid {grid}: mixer {t_mix:.1}s, zero-context {t_zc:.1}s");

        let mut mae_wins = 0;
        let mut corr_wins = 0;
        let mut mae_diffs = Vec::new();
        let mut corr_diffs = Vec::new();
        let t0 = Instant::now();
        for pair in &test {
            let pm = mixer_model.infer(&pair.source).unwrap();
            let pz = zc_model.infer(&pair.source).unwrap();
            let dm = dz_metrics(&pm, &pair.target, None).unwrap();
            let dz = dz_metrics(&pz, &pair.target, None).unwrap();
            let (m_mae, z_mae) = (dm.mae["full"], dz.mae["full"]);
            if m_mae < z_mae {
                mae_wins += 1;
            }
            if dm.corr > dz.corr {
                corr_wins += 1;
            }
            mae_diffs.push(z_mae - m_mae);
            corr_diffs.push(dm.corr - dz.corr);
        }
        let t_eval = t0.elapsed().as_secs_f64();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "eval {:.1}s: dz-mae wins {mae_wins}/20 (mean gain {:.6}), corr wins {corr_wins}/20 (mean gain {:.6})",
            t_eval,
            mean(&mae_diffs),
            mean(&corr_diffs)
        );
    }

    #[test]
    #[ignore]
    fn context_pathway_diagnostic() {
        let grid = 16;
        let spec = PhantomSpec { grid, eta: 0.5, ..PhantomSpec::default() };
        let (pa, pb, d1) = context_probe_pair(&spec).unwrap();
        let d_star = d1 - 1;
        let a = render_pair("probe_a", &pa).unwrap();
        let b = render_pair("probe_b", &pb).unwrap();
        let depth = a.source.depth();

        let vol_gap = |x: &Volume, y: &Volume, d: usize| {
            let mut acc = 0.0;
            for i in 0..grid {
                for j in 0..grid {
                    acc += (x.at(0, i, j, d) - y.at(0, i, j, d)).abs();
                }
            }
            acc / (grid * grid) as f64
        };
        println!("source gap at d*: {:.3e}", vol_gap(&a.source, &b.source, d_star));
        let total: f64 = (0..depth).map(|d| vol_gap(&a.source, &b.source, d)).sum();
        println!("source gap sum over depth: {:.3e}", total);
        println!("target gap at d*: {:.3e}", vol_gap(&a.target, &b.target, d_star));

        let probe = |label: &str, model: &LiftcModel| {
            let tr = &model.translator;
            let mx = model.mixer.as_ref().unwrap();
            let desc = |v: &Volume| -> Vec<Vec<f64>> {
                (0..depth)
                    .map(|d| {
                        let acts = tr.encode_eval(&slice_feed(v, d), grid, grid).unwrap();
                        tr.pool_eval(&acts)
                    })
                    .collect()
            };
            let da = desc(&a.source);
            let db = desc(&b.source);
            let h3_mag: f64 = da.iter().flatten().map(|v| v.abs()).sum::<f64>()
                / (depth * BOTTLENECK_CH) as f64;
            let dgap: f64 = da
                .iter()
                .zip(&db)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
                .sum();
            let ca = mx.eval_contexts(&da).unwrap();
            let cb = mx.eval_contexts(&db).unwrap();
            let cgap: f64 = ca[d_star]
                .iter()
                .zip(&cb[d_star])
                .map(|(p, q)| (p - q).abs())
                .sum();
            let ctx_mag: f64 = ca[d_star].iter().map(|v| v.abs()).sum::<f64>() / CONTEXT_DIM as f64;
            let pa_pred = model.infer(&a.source).unwrap();
            let pb_pred = model.infer(&b.source).unwrap();
            let split = vol_gap(&pa_pred, &pb_pred, d_star);
            let inj: f64 = tr.store.get("inject.w").unwrap().value.iter().map(|v| v * v).sum::<f64>();
            println!(
                "{label}: mean|h3| {h3_mag:.3e}, desc gap {dgap:.3e}, |ctx| {ctx_mag:.3e}, ctx gap at d* {cgap:.3e}, pred split at d* {split:.3e}, ||inject.w|| {:.3e}",
                inj.sqrt()
            );
        };

        let cfg = TrainLiftcConfig {
            steps: 1,
            seed: 516,
            val_every: 0,
            subset: DecodedSubset::Block { len: 8 },
            ..TrainLiftcConfig::default()
        };
        let corpus = vec![a.clone(), b.clone()];
        let (m1, _) = train_liftc(&corpus, &[], TrainMode::Direct, &cfg).unwrap();
        probe("after 1 step", &m1);
        let cfg600 = TrainLiftcConfig { steps: 600, ..cfg };
        let (m600, trace) = train_liftc(&corpus, &[], TrainMode::Direct, &cfg600).unwrap();
        probe("after 600 steps", &m600);

        let losses: Vec<f64> = trace.steps.iter().map(|r| r.loss).collect();
        println!(
            "loss: first {:?} last {:?}",
            &losses[..3].iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
            &losses[losses.len() - 3..].iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
        let pred_a = m600.infer(&a.source).unwrap();
        let per_slice: Vec<f64> = (0..depth)
            .map(|d| (vol_gap(&pred_a, &a.target, d) * 1e3).round() / 1e3)
            .collect();
        println!("per-slice err (subject a): {per_slice:?}");

        let tr = &m600.translator;
        let mx = m600.mixer.as_ref().unwrap();
        let descs: Vec<Vec<f64>> = (0..depth)
            .map(|d| tr.pool_eval(&tr.encode_eval(&slice_feed(&a.source, d), grid, grid).unwrap()))
            .collect();
        let ctxs = mx.eval_contexts(&descs).unwrap();
        for d in [3usize, d_star] {
            let acts = tr.encode_eval(&slice_feed(&a.source, d), grid, grid).unwrap();
            let out = tr.decode_eval(&acts, &ctxs[d]).unwrap();
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for &v in &out {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            println!(
                "unclamped decode slice {d}: min {lo:.4} max {hi:.4} mean {:.4}",
                sum / out.len() as f64
            );
        }
    }

    #[test]
    #[ignore]
    fn context_necessity_pilot() {
        let grid = 16;
        let spec = PhantomSpec { grid, eta: 0.5, ..PhantomSpec::default() };
        let (pa, pb, d1) = context_probe_pair(&spec).unwrap();
        let d_star = d1 - 1;
        let corpus = vec![
            render_pair("probe_a", &pa).unwrap(),
            render_pair("probe_b", &pb).unwrap(),
        ];
        for steps in [300usize, 600] {
            let cfg = TrainLiftcConfig {
                steps,
                seed: 516,
                val_every: 0,
                subset: DecodedSubset::Block { len: 8 },
                ..TrainLiftcConfig::default()
            };
            let t0 = Instant::now();
            let (mx, _) = train_liftc(&corpus, &[], TrainMode::Direct, &cfg).unwrap();
            let zc_cfg = TrainLiftcConfig { use_mixer: false, ..cfg };
            let (zc, _) = train_liftc(&corpus, &[], TrainMode::Direct, &zc_cfg).unwrap();
            let t = t0.elapsed().as_secs_f64();

            let zc_err = (slice_l1(&zc, &corpus[0], d_star) + slice_l1(&zc, &corpus[1], d_star)) / 2.0;
            let mx_err = (slice_l1(&mx, &corpus[0], d_star) + slice_l1(&mx, &corpus[1], d_star)) / 2.0;
            // How far apart the mixer pushes its two predictions at the
            // colliding slice; the zero-context model is pinned to zero.
            let pa_pred = mx.infer(&corpus[0].source).unwrap();
            let pb_pred = mx.infer(&corpus[1].source).unwrap();
            let mut gap = 0.0;
            for i in 0..grid {
                for j in 0..grid {
                    gap += (pa_pred.at(0, i, j, d_star) - pb_pred.at(0, i, j, d_star)).abs();
                }
            }
            gap /= (grid * grid) as f64;
            println!(
                "necessity {steps} steps ({t:.1}s both): zc {zc_err:.6}, mixer {mx_err:.6}, margin {:.6}, mixer a/b split {gap:.6}",
                zc_err - mx_err
            );
        }
    }
}
