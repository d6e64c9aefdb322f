//! Frozen slice features, tri-planar feature banks, and the drifting
//! objective that pulls generated slice features toward kernel-weighted
//! local targets in the banks.
//!
//! The feature map is a seeded, frozen two-layer conv net with global
//! pooling and a linear head. A fixed random embedding is informative
//! enough to separate phantom slices, keeps every run deterministic, and
//! needs no pretrained weights.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{kernels, Graph, Init, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::threads;
use crate::volume::{slice_extract, PlaneSelector, Slice2, ValueRange, Volume, ALL_PLANES};

pub const DEFAULT_FEATURE_DIM: usize = 128;

/// Frozen conv embedding of single-channel slices.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    store: ParamStore,
    pub d_f: usize,
    /// Values are affinely mapped from this range into [-1, 1] before
    /// the convolutions.
    pub input_range: ValueRange,
}

const C1: usize = 16;
const C2: usize = 32;

impl FeatureExtractor {
    pub fn new(seed: u64, d_f: usize) -> Result<FeatureExtractor> {
        if d_f == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut store = ParamStore::new("feat", seed);
        store.add("c1.w", vec![C1, 1, 3, 3], Init::Uniform(1.0 / 3.0))?;
        store.add("c1.b", vec![C1], Init::Uniform(1.0 / 3.0))?;
        let b2 = 1.0 / ((C1 * 9) as f64).sqrt();
        store.add("c2.w", vec![C2, C1, 3, 3], Init::Uniform(b2))?;
        store.add("c2.b", vec![C2], Init::Uniform(b2))?;
        let bh = 1.0 / (C2 as f64).sqrt();
        store.add("head.w", vec![d_f, C2], Init::Uniform(bh))?;
        store.add("head.b", vec![d_f], Init::Uniform(bh))?;
        store.freeze();
        Ok(FeatureExtractor {
            store,
            d_f,
            input_range: ValueRange::UNIT,
        })
    }

    fn affine(&self) -> (f64, f64) {
        let span = self.input_range.span();
        let s = 2.0 / span;
        (s, -1.0 - s * self.input_range.lo)
    }

    /// Plain-buffer feature of one slice.
    pub fn extract(&self, slice: &Slice2) -> Result<Vec<f64>> {
        let (s, t) = self.affine();
        let x: Vec<f64> = slice.data.iter().map(|&v| v * s + t).collect();
        let (h, w) = (slice.rows, slice.cols);
        let mut a = kernels::conv2d_fwd(
            &x,
            1,
            h,
            w,
            &self.store.get("c1.w")?.value,
            C1,
            3,
            3,
            Some(&self.store.get("c1.b")?.value),
            2,
            1,
        )?;
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        let (h1, w1) = (kernels::conv_out(h, 3, 2, 1)?, kernels::conv_out(w, 3, 2, 1)?);
        let mut b = kernels::conv2d_fwd(
            &a,
            C1,
            h1,
            w1,
            &self.store.get("c2.w")?.value,
            C2,
            3,
            3,
            Some(&self.store.get("c2.b")?.value),
            2,
            1,
        )?;
        b.iter_mut().for_each(|v| *v = v.max(0.0));
        let (h2, w2) = (kernels::conv_out(h1, 3, 2, 1)?, kernels::conv_out(w1, 3, 2, 1)?);
        let pooled = kernels::gap2d(&b, C2, h2, w2);
        let hw = self.store.get("head.w")?;
        let hb = self.store.get("head.b")?;
        let mut out = vec![0.0; self.d_f];
        for o in 0..self.d_f {
            let row = &hw.value[o * C2..(o + 1) * C2];
            let mut acc = hb.value[o];
            for j in 0..C2 {
                acc += row[j] * pooled[j];
            }
            out[o] = acc;
        }
        Ok(out)
    }

    /// Graph version of `extract`; input is a 2-D [rows, cols] node.
    /// The same kernels run underneath, so values match the plain path
    /// bit for bit.
    pub fn extract_node(&self, g: &mut Graph, slice: NodeId) -> Result<NodeId> {
        let shape = g.value(slice).shape.clone();
        if shape.len() != 2 {
            return Err(Error::shape(
                "feat_extract",
                format!("want 2-D slice, got {shape:?}"),
            ));
        }
        let (s, t) = self.affine();
        let scaled = g.scale(slice, s)?;
        let shifted = g.shift(scaled, t)?;
        let x = g.reshape(shifted, vec![1, shape[0], shape[1]])?;
        let w1 = self.store.bind(g, "c1.w")?;
        let b1 = self.store.bind(g, "c1.b")?;
        let c1 = g.conv2d(x, w1, Some(b1), 2, 1)?;
        let r1 = g.relu(c1)?;
        let w2 = self.store.bind(g, "c2.w")?;
        let b2 = self.store.bind(g, "c2.b")?;
        let c2 = g.conv2d(r1, w2, Some(b2), 2, 1)?;
        let r2 = g.relu(c2)?;
        let pooled = g.gap2d(r2)?;
        let hw = self.store.bind(g, "head.w")?;
        let hb = self.store.bind(g, "head.b")?;
        g.linear(pooled, hw, Some(hb))
    }

    pub fn digest(&self) -> u64 {
        self.store.digest()
    }
}

/// Features of real slices for one projection plane.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub plane: PlaneSelector,
    pub d_f: usize,
    features: Vec<f64>,
    provenance: Vec<(String, usize)>,
}

impl FeatureBank {
    pub fn new(plane: PlaneSelector, d_f: usize) -> FeatureBank {
        FeatureBank {
            plane,
            d_f,
            features: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn push(&mut self, feature: Vec<f64>, volume_id: &str, slice: usize) -> Result<()> {
        if feature.len() != self.d_f {
            return Err(Error::shape(
                "bank",
                format!("feature length {} vs d_f {}", feature.len(), self.d_f),
            ));
        }
        if !feature.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                node: format!("bank feature from {volume_id} slice {slice}"),
            });
        }
        self.features.extend(feature);
        self.provenance.push((volume_id.to_string(), slice));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.d_f..(i + 1) * self.d_f]
    }

    pub fn provenance(&self, i: usize) -> (&str, usize) {
        let (id, s) = &self.provenance[i];
        (id, *s)
    }

    /// Unweighted mean of all entries.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d_f];
        for i in 0..self.len() {
            for (o, &v) in out.iter_mut().zip(self.feature(i).iter()) {
                *o += v;
            }
        }
        let n = self.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Bank over every slice of every volume for one plane.
pub fn build_bank(
    volumes: &[(String, &Volume)],
    plane: PlaneSelector,
    e: &FeatureExtractor,
) -> Result<FeatureBank> {
    if volumes.is_empty() {
        return Err(Error::invalid("bank needs at least one volume"));
    }
    let per_volume = threads::par_map(volumes.len(), |i| -> Result<Vec<(Vec<f64>, usize)>> {
        let (_, v) = &volumes[i];
        let mut out = Vec::with_capacity(plane.slice_count(v));
        for s in 1..=plane.slice_count(v) {
            let slice = slice_extract(v, plane, s, 0)?;
            out.push((e.extract(&slice)?, s));
        }
        Ok(out)
    });
    let mut bank = FeatureBank::new(plane, e.d_f);
    for (i, entry) in per_volume.into_iter().enumerate() {
        for (feat, s) in entry? {
            bank.push(feat, &volumes[i].0, s)?;
        }
    }
    Ok(bank)
}

/// Minibatch bank: one uniformly sampled slice per volume.
pub fn build_bank_sampled(
    volumes: &[(String, &Volume)],
    plane: PlaneSelector,
    e: &FeatureExtractor,
    rng: &mut Stream,
) -> Result<FeatureBank> {
    if volumes.is_empty() {
        return Err(Error::invalid("bank needs at least one volume"));
    }
    let mut bank = FeatureBank::new(plane, e.d_f);
    for (id, v) in volumes {
        let s = 1 + rng.below(plane.slice_count(v));
        let slice = slice_extract(v, plane, s, 0)?;
        bank.push(e.extract(&slice)?, id, s)?;
    }
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median of pairwise bank distances, resolved per bank.
    Median,
}

#[derive(Debug, Clone)]
pub struct DriftConfig {
    pub bandwidth: Bandwidth,
    /// Multiplier on the resolved bandwidth. Values below one tighten
    /// the kernel so targets stay local and distinct latents keep
    /// distinct attractors; one leaves the median heuristic untouched.
    pub bandwidth_scale: f64,
    /// Treat the kernel-weighted target as a constant during backprop.
    pub stop_gradient_target: bool,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            bandwidth: Bandwidth::Median,
            bandwidth_scale: 1.0,
            stop_gradient_target: true,
        }
    }
}

impl DriftConfig {
    /// Bandwidth for one bank. Median mode falls back where the median
    /// is undefined or zero: with fewer than two entries, or all entries
    /// identical, the drift target does not depend on R at all and any
    /// positive value serves; with a zero median but some spread, the
    /// smallest positive sampled distance keeps the kernel local.
    pub fn resolve_bandwidth(&self, bank: &FeatureBank) -> Result<f64> {
        if !(self.bandwidth_scale > 0.0) || !self.bandwidth_scale.is_finite() {
            return Err(Error::invalid(format!(
                "bandwidth scale must be positive, got {}",
                self.bandwidth_scale
            )));
        }
        let base = match self.bandwidth {
            Bandwidth::Fixed(r) => {
                if r > 0.0 && r.is_finite() {
                    r
                } else {
                    return Err(Error::invalid(format!("bandwidth must be positive, got {r}")));
                }
            }
            Bandwidth::Median => {
                if bank.len() < 2 {
                    1.0
                } else {
                    let dists = sampled_pair_distances(bank);
                    let median = median_of(&dists);
                    if median > 0.0 {
                        median
                    } else {
                        let smallest = dists
                            .iter()
                            .copied()
                            .filter(|d| *d > 0.0)
                            .fold(f64::INFINITY, f64::min);
                        if smallest.is_finite() {
                            smallest
                        } else {
                            1.0
                        }
                    }
                }
            }
        };
        Ok(base * self.bandwidth_scale)
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise distances, exhaustive up to 512 pairs and a seeded sample
/// beyond that.
fn sampled_pair_distances(bank: &FeatureBank) -> Vec<f64> {
    let n = bank.len();
    const CAP: usize = 512;
    let total = n * (n - 1) / 2;
    if total <= CAP {
        let mut dists = Vec::with_capacity(total);
        for i in 0..n {
            for j in i + 1..n {
                dists.push(l2(bank.feature(i), bank.feature(j)));
            }
        }
        dists
    } else {
        let mut s = Stream::derived(n as u64, "bandwidth_pairs");
        let mut dists = Vec::with_capacity(CAP);
        for _ in 0..CAP {
            let i = s.below(n);
            let mut j = s.below(n - 1);
            if j >= i {
                j += 1;
            }
            dists.push(l2(bank.feature(i), bank.feature(j)));
        }
        dists
    }
}

fn median_of(dists: &[f64]) -> f64 {
    let mut sorted = dists.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Median pairwise distance over at most 512 seeded pairs.
pub fn median_bandwidth(bank: &FeatureBank) -> Result<f64> {
    let n = bank.len();
    if n < 2 {
        return Err(Error::degenerate(
            "bandwidth",
            format!("need at least 2 bank entries, have {n}"),
        ));
    }
    let median = median_of(&sampled_pair_distances(bank));
    if median <= 0.0 {
        return Err(Error::degenerate(
            "bandwidth",
            "all bank entries identical, median distance is zero".to_string(),
        ));
    }
    Ok(median)
}

/// Index of the nearest bank entry (first index wins ties).
pub fn nearest_index(g: &[f64], bank: &FeatureBank) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..bank.len() {
        let d = l2(g, bank.feature(i));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Kernel-weighted local target: Laplacian weights over the normalized
/// distances, combined with a max shift so the largest weight is exactly
/// one. Should the weight sum still degenerate, the nearest bank entry
/// is returned.
pub fn drift_target(g: &[f64], bank: &FeatureBank, r: f64) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::invalid("drift target over an empty bank"));
    }
    if g.len() != bank.d_f {
        return Err(Error::shape(
            "drift",
            format!("query length {} vs d_f {}", g.len(), bank.d_f),
        ));
    }
    let n = bank.len();
    let mut t = vec![0.0; n];
    let mut t_min = f64::INFINITY;
    for i in 0..n {
        t[i] = l2(g, bank.feature(i)) / r;
        t_min = t_min.min(t[i]);
    }
    let mut wsum = 0.0;
    let mut mu = vec![0.0; bank.d_f];
    for i in 0..n {
        let w = (-(t[i] - t_min)).exp();
        wsum += w;
        for (m, &v) in mu.iter_mut().zip(bank.feature(i).iter()) {
            *m += w * v;
        }
    }
    if !wsum.is_finite() || wsum <= 0.0 {
        return Ok(bank.feature(nearest_index(g, bank)).to_vec());
    }
    mu.iter_mut().for_each(|v| *v /= wsum);
    Ok(mu)
}

/// Squared distance between a feature and its drift target.
pub fn drift_loss(g: &[f64], bank: &FeatureBank, r: f64) -> Result<f64> {
    let mu = drift_target(g, bank, r)?;
    Ok(g.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Graph node for the drift loss of a feature node. With the
/// stop-gradient default the target is computed from the node's current
/// value and inserted as a constant, so backprop sees 2(g - mu). The
/// differentiable variant routes gradient through the kernel weights.
pub fn drift_loss_node(
    g: &mut Graph,
    feat: NodeId,
    bank: &FeatureBank,
    r: f64,
    stop_gradient_target: bool,
) -> Result<NodeId> {
    if bank.is_empty() {
        return Err(Error::invalid("drift loss over an empty bank"));
    }
    let d_f = bank.d_f;
    if g.value(feat).shape != vec![d_f] {
        return Err(Error::shape(
            "drift",
            format!("feature node shape {:?} vs d_f {d_f}", g.value(feat).shape),
        ));
    }
    let mu = if stop_gradient_target {
        let target = drift_target(&g.value(feat).data.clone(), bank, r)?;
        g.constant(Tensor::new(vec![d_f], target)?)?
    } else {
        let n = bank.len();
        let bank_rows = g.constant(Tensor::new(vec![n, d_f], bank_matrix(bank))?)?;
        let gb = g.row_broadcast(feat, n)?;
        let diff = g.sub(bank_rows, gb)?;
        let sq = g.pow_scalar(diff, 2.0)?;
        let ssq = g.row_sum(sq)?;
        let guarded = g.clamp_min(ssq, 1e-30)?;
        let dist = g.sqrt(guarded)?;
        let logits = g.scale(dist, -1.0 / r)?;
        let w = g.softmax(logits)?;
        let bank_cols = g.constant(Tensor::new(vec![d_f, n], bank_matrix_t(bank))?)?;
        g.linear(w, bank_cols, None)?
    };
    let diff = g.sub(feat, mu)?;
    let sq = g.pow_scalar(diff, 2.0)?;
    g.sum(sq)
}

fn bank_matrix(bank: &FeatureBank) -> Vec<f64> {
    let mut out = Vec::with_capacity(bank.len() * bank.d_f);
    for i in 0..bank.len() {
        out.extend_from_slice(bank.feature(i));
    }
    out
}

fn bank_matrix_t(bank: &FeatureBank) -> Vec<f64> {
    let (n, d) = (bank.len(), bank.d_f);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[j * n + i] = bank.feature(i)[j];
        }
    }
    out
}

/// Coverage pull: one real feature attracts the generated batch,
/// weighted by kernel proximity. Softmax weights over the negative
/// normalized distances are computed from current values and held
/// constant during backprop, so generated feature i receives the
/// gradient 2 w_i (g_i - r). Every real feature recruits its nearest
/// generated neighbors, which keeps a batch from collapsing onto a
/// single bank mode.
pub fn coverage_weights(real: &[f64], gen_feats: &[Vec<f64>], r: f64) -> Vec<f64> {
    let n = gen_feats.len();
    let mut t: Vec<f64> = gen_feats.iter().map(|g| l2(real, g) / r).collect();
    let m = t.iter().copied().fold(f64::INFINITY, f64::min);
    t.iter_mut().for_each(|v| *v = (-(*v - m)).exp());
    let sum: f64 = t.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        let mut w = vec![0.0; n];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, g) in gen_feats.iter().enumerate() {
            let d = l2(real, g);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        w[best] = 1.0;
        return w;
    }
    t.iter_mut().for_each(|v| *v /= sum);
    t
}

/// Graph node for the coverage loss of one real feature against the
/// generated batch: sum_i w_i ||g_i - r||^2 with frozen weights.
pub fn coverage_loss_node(
    g: &mut Graph,
    real: &[f64],
    gen_feats: &[NodeId],
    r_bandwidth: f64,
) -> Result<NodeId> {
    if gen_feats.is_empty() {
        return Err(Error::invalid("coverage loss needs generated features"));
    }
    let values: Vec<Vec<f64>> = gen_feats.iter().map(|&n| g.value(n).data.clone()).collect();
    let w = coverage_weights(real, &values, r_bandwidth);
    let rc = g.constant(Tensor::new(vec![real.len()], real.to_vec())?)?;
    let mut terms = Vec::with_capacity(gen_feats.len());
    for (i, &gf) in gen_feats.iter().enumerate() {
        let diff = g.sub(gf, rc)?;
        let sq = g.pow_scalar(diff, 2.0)?;
        let ssq = g.sum(sq)?;
        terms.push(g.scale(ssq, w[i])?);
    }
    let cat = g.concat(&terms)?;
    let total = g.sum(cat)?;
    Ok(total)
}

/// Numeric twin of the coverage loss.
pub fn coverage_loss(real: &[f64], gen_feats: &[Vec<f64>], r: f64) -> f64 {
    let w = coverage_weights(real, gen_feats, r);
    gen_feats
        .iter()
        .zip(w.iter())
        .map(|(g, wi)| wi * g.iter().zip(real.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSampling {
    /// One uniformly sampled slice per volume per plane, as in minibatch
    /// training; banks are likewise one sampled slice per real volume.
    SampleOne { seed: u64 },
    /// Full banks and every generated slice; deterministic, for tests.
    Exhaustive,
}

#[derive(Debug, Clone)]
pub struct TriplanarBreakdown {
    pub per_plane: [f64; 3],
    pub total: f64,
    pub bandwidths: [f64; 3],
}

/// Drift averaged over the three projection planes.
pub fn triplanar_loss(
    generated: &[(String, &Volume)],
    real: &[(String, &Volume)],
    e: &FeatureExtractor,
    cfg: &DriftConfig,
    sampling: SliceSampling,
) -> Result<TriplanarBreakdown> {
    if generated.is_empty() || real.is_empty() {
        return Err(Error::invalid("triplanar loss needs nonempty batches"));
    }
    let mut per_plane = [0.0; 3];
    let mut bandwidths = [0.0; 3];
    for (pi, plane) in ALL_PLANES.iter().enumerate() {
        let (bank, terms) = match sampling {
            SliceSampling::Exhaustive => {
                let bank = build_bank(real, *plane, e)?;
                let mut terms = Vec::new();
                for (_, v) in generated {
                    for s in 1..=plane.slice_count(v) {
                        terms.push(e.extract(&slice_extract(v, *plane, s, 0)?)?);
                    }
                }
                (bank, terms)
            }
            SliceSampling::SampleOne { seed } => {
                let mut bank_rng = Stream::derived(seed, &format!("bank.{}", plane.name()));
                let bank = build_bank_sampled(real, *plane, e, &mut bank_rng)?;
                let mut gen_rng = Stream::derived(seed, &format!("gen.{}", plane.name()));
                let mut terms = Vec::new();
                for (_, v) in generated {
                    let s = 1 + gen_rng.below(plane.slice_count(v));
                    terms.push(e.extract(&slice_extract(v, *plane, s, 0)?)?);
                }
                (bank, terms)
            }
        };
        let r = cfg.resolve_bandwidth(&bank)?;
        bandwidths[pi] = r;
        let mut acc = 0.0;
        for g in &terms {
            acc += drift_loss(g, &bank, r)?;
        }
        per_plane[pi] = acc / terms.len() as f64;
    }
    let total = per_plane.iter().sum::<f64>() / 3.0;
    Ok(TriplanarBreakdown {
        per_plane,
        total,
        bandwidths,
    })
}

pub const BANK_MAGIC: &[u8; 4] = b"LFB1";
pub const BANK_VERSION: u32 = 1;

pub fn write_bank(path: &Path, bank: &FeatureBank) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.push(match bank.plane {
        PlaneSelector::Axial => 0,
        PlaneSelector::Coronal => 1,
        PlaneSelector::Sagittal => 2,
    });
    out.extend_from_slice(&(bank.d_f as u32).to_le_bytes());
    out.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    for &v in &bank.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (id, s) in &bank.provenance {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(*s as u32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<FeatureBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    let need = |pos: usize, n: usize, what: &'static str| -> Result<()> {
        if pos + n > bytes.len() {
            return Err(Error::Truncated {
                path: origin.clone(),
                what,
                needed: n,
                had: bytes.len().saturating_sub(pos),
            });
        }
        Ok(())
    };
    need(0, 13, "header")?;
    if &bytes[0..4] != BANK_MAGIC {
        return Err(Error::BadMagic {
            path: origin,
            expected: "LFB1".to_string(),
            found: format!("{:?}", &bytes[0..4]),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BANK_VERSION {
        return Err(Error::BadVersion {
            path: origin,
            what: "bank",
            found: version,
            expected: BANK_VERSION,
        });
    }
    let plane = match bytes[8] {
        0 => PlaneSelector::Axial,
        1 => PlaneSelector::Coronal,
        2 => PlaneSelector::Sagittal,
        other => return Err(Error::invalid(format!("unknown plane tag {other}"))),
    };
    let d_f = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    need(13, 4, "count")?;
    let n = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let mut pos = 17;
    need(pos, n * d_f * 8, "features")?;
    let mut bank = FeatureBank::new(plane, d_f);
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut f = Vec::with_capacity(d_f);
        for _ in 0..d_f {
            f.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        features.push(f);
    }
    for f in features {
        need(pos, 4, "provenance id length")?;
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, len + 4, "provenance entry")?;
        let id = String::from_utf8(bytes[pos..pos + len].to_vec())
            .map_err(|_| Error::invalid("bank provenance id: bad utf-8"))?;
        pos += len;
        let s = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        bank.push(f, &id, s)?;
    }
    Ok(bank)
}
