//! Center-aware affine ROI transfer between subjects, plus a deterministic
//! box-constrained threshold segmenter standing in for an external model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::prior::RegionMask;
use crate::volgrid::{LabelMap, Volume3D};

/// Axis-aligned box in float voxel coordinates; corners are `center ± sides/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub center: [f64; 3],
    pub sides: [f64; 3],
}

impl BoundingBox3D {
    pub fn validate(&self) -> Result<()> {
        if self.sides.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.center.iter().all(|c| c.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid box {self:?}")))
        }
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            for axis in 0..3 {
                let sign = if (i >> axis) & 1 == 1 { 0.5 } else { -0.5 };
                corner[axis] = self.center[axis] + sign * self.sides[axis];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalExtent {
    pub center: [f64; 3],
    pub sides: [f64; 3],
}

/// Per-axis scaling plus the two centers: `T(x) = c_tgt + alpha .* (x - c_ref)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoxTransform {
    pub alpha: [f64; 3],
    pub c_ref: [f64; 3],
    pub c_tgt: [f64; 3],
}

fn extent_from_foreground(
    dims: (usize, usize, usize),
    mut is_fg: impl FnMut(usize, usize, usize) -> bool,
) -> Option<GlobalExtent> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if is_fg(x, y, z) {
                    any = true;
                    let p = [x, y, z];
                    for axis in 0..3 {
                        lo[axis] = lo[axis].min(p[axis]);
                        hi[axis] = hi[axis].max(p[axis]);
                    }
                }
            }
        }
    }
    if !any {
        return None;
    }
    let mut center = [0.0; 3];
    let mut sides = [0.0; 3];
    for axis in 0..3 {
        center[axis] = (lo[axis] + hi[axis]) as f64 / 2.0;
        // tightest box over voxel centers, expanded half a voxel per face
        sides[axis] = (hi[axis] - lo[axis]) as f64 + 1.0;
    }
    Some(GlobalExtent { center, sides })
}

/// Tightest axis-aligned box over nonzero labels, expanded by half a voxel
/// per face.
pub fn global_extent(lm: &LabelMap) -> Result<GlobalExtent> {
    extent_from_foreground(lm.dims, |x, y, z| lm.labels[lm.idx(x, y, z)] != 0)
        .ok_or_else(|| Error::EmptyRegion("label map has no foreground".into()))
}

pub fn global_extent_of_mask(m: &RegionMask) -> Result<GlobalExtent> {
    extent_from_foreground(m.dims, |x, y, z| m.mask[m.idx(x, y, z)])
        .ok_or_else(|| Error::EmptyRegion("mask has no foreground".into()))
}

/// Scaling factors are the component-wise target/reference side ratios.
pub fn fit_transform(g_ref: &GlobalExtent, g_tgt: &GlobalExtent) -> Result<BoxTransform> {
    let mut alpha = [0.0; 3];
    for axis in 0..3 {
        if g_ref.sides[axis] <= 0.0 || !g_ref.sides[axis].is_finite() {
            return Err(Error::DegenerateExtent(format!(
                "reference side {axis} = {}",
                g_ref.sides[axis]
            )));
        }
        alpha[axis] = g_tgt.sides[axis] / g_ref.sides[axis];
    }
    Ok(BoxTransform {
        alpha,
        c_ref: g_ref.center,
        c_tgt: g_tgt.center,
    })
}

pub fn transform_point(t: &BoxTransform, x: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for axis in 0..3 {
        out[axis] = t.c_tgt[axis] + t.alpha[axis] * (x[axis] - t.c_ref[axis]);
    }
    out
}

/// Transformed box: center moves through `T`, sides scale component-wise.
/// Equal to the axis-aligned hull of the 8 transformed corners.
pub fn transform_box(t: &BoxTransform, b: &BoundingBox3D) -> BoundingBox3D {
    let mut sides = [0.0; 3];
    for axis in 0..3 {
        sides[axis] = t.alpha[axis] * b.sides[axis];
    }
    BoundingBox3D {
        center: transform_point(t, b.center),
        sides,
    }
}

/// Coarse segmentation inside a box: keep voxels whose intensity reaches the
/// in-box quantile. The mask support never leaves the box.
pub fn coarse_mask_in_box(
    v: &Volume3D,
    b: &BoundingBox3D,
    quantile: f64,
) -> Result<(RegionMask, Vec<Warning>)> {
    b.validate()?;
    if !(0.0..1.0).contains(&quantile) || quantile == 0.0 {
        return Err(Error::Contract(format!(
            "quantile must be in (0, 1), got {quantile}"
        )));
    }
    let dims = v.dims;
    let n = [dims.0, dims.1, dims.2];
    let mut lo_f = [0.0f64; 3];
    let mut hi_f = [0.0f64; 3];
    for axis in 0..3 {
        lo_f[axis] = b.center[axis] - b.sides[axis] / 2.0;
        hi_f[axis] = b.center[axis] + b.sides[axis] / 2.0;
        if hi_f[axis] < -0.5 || lo_f[axis] > n[axis] as f64 - 0.5 {
            return Err(Error::OutOfBounds);
        }
    }
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut empty = false;
    for axis in 0..3 {
        let a = lo_f[axis].ceil().max(0.0) as usize;
        let bz = hi_f[axis].floor().min(n[axis] as f64 - 1.0);
        if bz < 0.0 || a as f64 > bz {
            empty = true;
            break;
        }
        lo[axis] = a;
        hi[axis] = bz as usize;
    }

    let mut mask = vec![false; v.len()];
    if empty {
        return Ok((
            RegionMask {
                dims,
                spacing: v.spacing,
                mask,
                source_label: 0,
            },
            vec![Warning::EmptySegment],
        ));
    }

    let mut in_box = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                in_box.push(v.at(x, y, z));
            }
        }
    }
    let mut sorted = in_box.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((quantile * sorted.len() as f64).ceil() as usize)
        .saturating_sub(1)
        .min(sorted.len() - 1);
    let threshold = sorted[rank];

    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                if v.at(x, y, z) >= threshold {
                    mask[x + dims.0 * (y + dims.1 * z)] = true;
                }
            }
        }
    }
    Ok((
        RegionMask {
            dims,
            spacing: v.spacing,
            mask,
            source_label: 0,
        },
        Vec::new(),
    ))
}
