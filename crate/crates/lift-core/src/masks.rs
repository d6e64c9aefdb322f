//! HU-threshold region masks for stratified evaluation.
//!
//! Masks are derived from a reference volume expressed in Hounsfield
//! units: soft tissue is -100..=200 HU, bone is > 300 HU, air is < -500
//! HU, the boundary band is the 2-step 6-connected dilation of bone u
//! air, and the body is the largest 6-connected component above -500 HU
//! with interior holes filled.

use crate::error::{Error, Result};
use crate::volume::{clip_and_scale, ValueRange, Volume};

#[derive(Debug, Clone, Copy)]
pub struct MaskThresholds {
    pub soft_lo: f64,
    pub soft_hi: f64,
    pub bone_above: f64,
    pub air_below: f64,
    pub body_above: f64,
    pub boundary_dilation: usize,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        MaskThresholds {
            soft_lo: -100.0,
            soft_hi: 200.0,
            bone_above: 300.0,
            air_below: -500.0,
            body_above: -500.0,
            boundary_dilation: 2,
        }
    }
}

/// Boolean masks over the H x W x D grid of a single-channel reference.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub soft: Vec<bool>,
    pub bone: Vec<bool>,
    pub air: Vec<bool>,
    pub boundary: Vec<bool>,
    pub body: Vec<bool>,
}

impl RegionMasks {
    pub fn voxels(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn by_name(&self, name: &str) -> Option<&[bool]> {
        match name {
            "soft" => Some(&self.soft),
            "bone" => Some(&self.bone),
            "air" => Some(&self.air),
            "boundary" => Some(&self.boundary),
            "body" => Some(&self.body),
            _ => None,
        }
    }
}

const NEIGHBOR_OFFSETS: [(i64, i64, i64); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

struct Grid {
    h: usize,
    w: usize,
    d: usize,
}

impl Grid {
    #[inline]
    fn flat(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.w + w) * self.d + d
    }

    fn neighbors(&self, idx: usize, out: &mut Vec<usize>) {
        out.clear();
        let d = idx % self.d;
        let rest = idx / self.d;
        let w = rest % self.w;
        let h = rest / self.w;
        for (dh, dw, dd) in NEIGHBOR_OFFSETS {
            let nh = h as i64 + dh;
            let nw = w as i64 + dw;
            let nd = d as i64 + dd;
            if nh >= 0
                && nh < self.h as i64
                && nw >= 0
                && nw < self.w as i64
                && nd >= 0
                && nd < self.d as i64
            {
                out.push(self.flat(nh as usize, nw as usize, nd as usize));
            }
        }
    }
}

/// One 6-connected dilation step.
fn dilate_once(grid: &Grid, mask: &[bool]) -> Vec<bool> {
    let mut out = mask.to_vec();
    let mut nb = Vec::with_capacity(6);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        grid.neighbors(i, &mut nb);
        for &j in &nb {
            out[j] = true;
        }
    }
    out
}

/// 6-connected dilation applied `steps` times; `steps = 0` returns the seed.
pub fn dilate(mask: &[bool], height: usize, width: usize, depth: usize, steps: usize) -> Vec<bool> {
    let grid = Grid {
        h: height,
        w: width,
        d: depth,
    };
    let mut cur = mask.to_vec();
    for _ in 0..steps {
        cur = dilate_once(&grid, &cur);
    }
    cur
}

/// Labels the largest 6-connected true component of `mask`.
fn largest_component(grid: &Grid, mask: &[bool]) -> Vec<bool> {
    let n = mask.len();
    let mut seen = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    let mut nb = Vec::with_capacity(6);
    for start in 0..n {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        stack.push(start);
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            grid.neighbors(i, &mut nb);
            for &j in &nb {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut out = vec![false; n];
    for i in best {
        out[i] = true;
    }
    out
}

/// Fills interior holes: any false voxel not 6-connected to the volume
/// border through false voxels becomes true.
fn fill_holes(grid: &Grid, mask: &[bool]) -> Vec<bool> {
    let n = mask.len();
    let mut outside = vec![false; n];
    let mut stack = Vec::new();
    let mut nb = Vec::with_capacity(6);
    for h in 0..grid.h {
        for w in 0..grid.w {
            for d in 0..grid.d {
                if h == 0 || h == grid.h - 1 || w == 0 || w == grid.w - 1 || d == 0 || d == grid.d - 1
                {
                    let i = grid.flat(h, w, d);
                    if !mask[i] && !outside[i] {
                        outside[i] = true;
                        stack.push(i);
                    }
                }
            }
        }
    }
    while let Some(i) = stack.pop() {
        grid.neighbors(i, &mut nb);
        for &j in &nb {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        }
    }
    (0..n).map(|i| mask[i] || !outside[i]).collect()
}

/// Derives region masks from a single-channel reference volume in HU.
/// Values are clipped into the HU range first, so callers may pass
/// unclipped references.
pub fn region_masks(reference: &Volume, thresholds: &MaskThresholds) -> Result<RegionMasks> {
    if reference.channels() != 1 {
        return Err(Error::shape(
            "region_masks",
            format!("expected single channel, got {}", reference.channels()),
        ));
    }
    let clipped = clip_and_scale(reference, ValueRange::HU, ValueRange::HU)?;
    let hu = clipped.data();
    let (h, w, d) = (reference.height(), reference.width(), reference.depth());
    let grid = Grid { h, w, d };

    let soft: Vec<bool> = hu
        .iter()
        .map(|&x| x >= thresholds.soft_lo && x <= thresholds.soft_hi)
        .collect();
    let bone: Vec<bool> = hu.iter().map(|&x| x > thresholds.bone_above).collect();
    let air: Vec<bool> = hu.iter().map(|&x| x < thresholds.air_below).collect();

    let seed: Vec<bool> = bone.iter().zip(air.iter()).map(|(&b, &a)| b || a).collect();
    let boundary = dilate(&seed, h, w, d, thresholds.boundary_dilation);

    let above: Vec<bool> = hu.iter().map(|&x| x > thresholds.body_above).collect();
    if !above.iter().any(|&x| x) {
        return Err(Error::degenerate(
            "region_masks",
            format!("no voxel above {} HU for the body mask", thresholds.body_above),
        ));
    }
    let body = fill_holes(&grid, &largest_component(&grid, &above));

    Ok(RegionMasks {
        height: h,
        width: w,
        depth: d,
        soft,
        bone,
        air,
        boundary,
        body,
    })
}
