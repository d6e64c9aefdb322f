//! Volume container, tri-planar slicing, depth encodings, and range maps.
//!
//! Volumes are dense f64 arrays in row-major `(c, h, w, d)` order (depth
//! fastest). Slice indices in the public API are 1-based, matching the
//! slice index sets used throughout the pipeline; internal storage is
//! 0-based.

use serde::{Deserialize, Serialize};

use crate::detmath::{cos_tau, sin_tau};
use crate::error::{Error, Result};

/// Declared nominal intensity range of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub const UNIT: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
    /// Clipped CT range in Hounsfield units.
    pub const HU: ValueRange = ValueRange {
        lo: -1000.0,
        hi: 2000.0,
    };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("bad value range [{lo}, {hi}]")));
        }
        Ok(ValueRange { lo, hi })
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Dense multi-channel volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
    value_range: ValueRange,
}

/// One of the three orthogonal slicing directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlaneSelector {
    /// Fixes the depth axis; slices are H x W.
    Axial,
    /// Fixes the height axis; slices are W x D.
    Coronal,
    /// Fixes the width axis; slices are H x D.
    Sagittal,
}

pub const ALL_PLANES: [PlaneSelector; 3] = [
    PlaneSelector::Axial,
    PlaneSelector::Coronal,
    PlaneSelector::Sagittal,
];

impl PlaneSelector {
    pub fn name(&self) -> &'static str {
        match self {
            PlaneSelector::Axial => "axial",
            PlaneSelector::Coronal => "coronal",
            PlaneSelector::Sagittal => "sagittal",
        }
    }

    /// Number of slices this plane admits in `v`.
    pub fn slice_count(&self, v: &Volume) -> usize {
        match self {
            PlaneSelector::Axial => v.depth,
            PlaneSelector::Coronal => v.height,
            PlaneSelector::Sagittal => v.width,
        }
    }

    /// (rows, cols) of an extracted slice.
    pub fn slice_shape(&self, v: &Volume) -> (usize, usize) {
        match self {
            PlaneSelector::Axial => (v.height, v.width),
            PlaneSelector::Coronal => (v.width, v.depth),
            PlaneSelector::Sagittal => (v.height, v.depth),
        }
    }
}

/// A 2-D slice lifted out of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Slice2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "slice",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Slice2 { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

impl Volume {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        depth: usize,
        data: Vec<f64>,
        value_range: ValueRange,
    ) -> Result<Self> {
        let need = channels * height * width * depth;
        if channels == 0 || height == 0 || width == 0 || depth == 0 {
            return Err(Error::shape(
                "volume",
                format!("zero-sized axis in {channels}x{height}x{width}x{depth}"),
            ));
        }
        if data.len() != need {
            return Err(Error::shape(
                "volume",
                format!(
                    "{channels}x{height}x{width}x{depth} needs {need} values, got {}",
                    data.len()
                ),
            ));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                node: format!("volume data at flat index {bad}"),
            });
        }
        Ok(Volume {
            channels,
            height,
            width,
            depth,
            data,
            value_range,
        })
    }

    pub fn zeros(
        channels: usize,
        height: usize,
        width: usize,
        depth: usize,
        value_range: ValueRange,
    ) -> Result<Self> {
        Volume::new(
            channels,
            height,
            width,
            depth,
            vec![0.0; channels * height * width * depth],
            value_range,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn value_range(&self) -> ValueRange {
        self.value_range
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn voxels_per_channel(&self) -> usize {
        self.height * self.width * self.depth
    }

    #[inline]
    pub fn flat(&self, c: usize, h: usize, w: usize, d: usize) -> usize {
        ((c * self.height + h) * self.width + w) * self.depth + d
    }

    /// 0-based voxel accessor.
    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize, d: usize) -> f64 {
        self.data[self.flat(c, h, w, d)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, d: usize, v: f64) {
        let i = self.flat(c, h, w, d);
        self.data[i] = v;
    }

    /// Contiguous data of one channel.
    pub fn channel_data(&self, c: usize) -> &[f64] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    /// Single-channel view copied out as its own volume.
    pub fn extract_channel(&self, c: usize) -> Result<Volume> {
        if c >= self.channels {
            return Err(Error::index(
                "extract_channel",
                format!("channel {c} of {}", self.channels),
            ));
        }
        Volume::new(
            1,
            self.height,
            self.width,
            self.depth,
            self.channel_data(c).to_vec(),
            self.value_range,
        )
    }
}

/// Extracts the 2-D slice at 1-based index `s` of `plane` from channel `c`.
pub fn slice_extract(v: &Volume, plane: PlaneSelector, s: usize, channel: usize) -> Result<Slice2> {
    let bound = plane.slice_count(v);
    if s < 1 || s > bound {
        return Err(Error::index(
            "slice_extract",
            format!("{} slice {s} outside 1..={bound}", plane.name()),
        ));
    }
    if channel >= v.channels {
        return Err(Error::index(
            "slice_extract",
            format!("channel {channel} of {}", v.channels),
        ));
    }
    let i = s - 1;
    let (rows, cols) = plane.slice_shape(v);
    let mut data = Vec::with_capacity(rows * cols);
    match plane {
        PlaneSelector::Axial => {
            for h in 0..v.height {
                for w in 0..v.width {
                    data.push(v.at(channel, h, w, i));
                }
            }
        }
        PlaneSelector::Coronal => {
            for w in 0..v.width {
                for d in 0..v.depth {
                    data.push(v.at(channel, i, w, d));
                }
            }
        }
        PlaneSelector::Sagittal => {
            for h in 0..v.height {
                for d in 0..v.depth {
                    data.push(v.at(channel, h, i, d));
                }
            }
        }
    }
    Slice2::new(rows, cols, data)
}

/// Inverse of [`slice_extract`] over a full index set: stacks `slices`
/// (ordered by slice index) back into a single-channel volume.
pub fn stack_slices(
    slices: &[Slice2],
    plane: PlaneSelector,
    value_range: ValueRange,
) -> Result<Volume> {
    if slices.is_empty() {
        return Err(Error::shape("stack_slices", "no slices given"));
    }
    let rows = slices[0].rows;
    let cols = slices[0].cols;
    for (i, s) in slices.iter().enumerate() {
        if s.rows != rows || s.cols != cols {
            return Err(Error::shape(
                "stack_slices",
                format!(
                    "slice {i} is {}x{}, expected {rows}x{cols}",
                    s.rows, s.cols
                ),
            ));
        }
    }
    let n = slices.len();
    let (h, w, d) = match plane {
        PlaneSelector::Axial => (rows, cols, n),
        PlaneSelector::Coronal => (n, rows, cols),
        PlaneSelector::Sagittal => (rows, n, cols),
    };
    let mut out = Volume::zeros(1, h, w, d, value_range)?;
    for (i, s) in slices.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                let v = s.at(r, c);
                match plane {
                    PlaneSelector::Axial => out.set(0, r, c, i, v),
                    PlaneSelector::Coronal => out.set(0, i, r, c, v),
                    PlaneSelector::Sagittal => out.set(0, r, i, c, v),
                }
            }
        }
    }
    Ok(out)
}

/// Fourier depth encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEncoding {
    pub values: Vec<f64>,
    pub n_freq: usize,
    pub depth_index: usize,
    pub total_depth: usize,
}

/// Encodes 1-based depth `d` of `total` slices with `n_freq` dyadic
/// frequencies over the normalized coordinate t = (d-1)/D; entry 2k is
/// sin(2*pi*2^k*t) and entry 2k+1 is cos(2*pi*2^k*t).
pub fn fourier_encode(d: usize, total: usize, n_freq: usize) -> Result<DepthEncoding> {
    if total == 0 || d < 1 || d > total {
        return Err(Error::index(
            "fourier_encode",
            format!("depth {d} outside 1..={total}"),
        ));
    }
    if n_freq == 0 {
        return Err(Error::invalid("fourier_encode: n_freq must be >= 1"));
    }
    let t = (d - 1) as f64 / total as f64;
    let mut values = Vec::with_capacity(2 * n_freq);
    for k in 0..n_freq {
        let f = (1u64 << k) as f64;
        values.push(sin_tau(f * t).clamp(-1.0, 1.0));
        values.push(cos_tau(f * t).clamp(-1.0, 1.0));
    }
    Ok(DepthEncoding {
        values,
        n_freq,
        depth_index: d,
        total_depth: total,
    })
}

/// Forward adjacent-slice difference along depth: output depth D-1 with
/// out[.., k] = v[.., k+1] - v[.., k].
pub fn delta_z(v: &Volume) -> Result<Volume> {
    if v.depth < 2 {
        return Err(Error::shape(
            "delta_z",
            format!("needs depth >= 2, got {}", v.depth),
        ));
    }
    let span = v.value_range.span();
    let mut out = Volume::zeros(
        v.channels,
        v.height,
        v.width,
        v.depth - 1,
        ValueRange { lo: -span, hi: span },
    )?;
    for c in 0..v.channels {
        for h in 0..v.height {
            for w in 0..v.width {
                for d in 0..v.depth - 1 {
                    out.set(c, h, w, d, v.at(c, h, w, d + 1) - v.at(c, h, w, d));
                }
            }
        }
    }
    Ok(out)
}

/// Clips into `from` and affinely rescales onto `to`.
pub fn clip_and_scale(v: &Volume, from: ValueRange, to: ValueRange) -> Result<Volume> {
    if from.span() <= 0.0 || !from.span().is_finite() {
        return Err(Error::degenerate(
            "clip_and_scale",
            format!("source range [{}, {}]", from.lo, from.hi),
        ));
    }
    let scale = to.span() / from.span();
    let data = v
        .data
        .iter()
        .map(|&x| (x.clamp(from.lo, from.hi) - from.lo) * scale + to.lo)
        .collect();
    Volume::new(v.channels, v.height, v.width, v.depth, data, to)
}
