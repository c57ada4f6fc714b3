//! Volumetric data types, resampling, normalization, and augmentation.

mod augment;
mod io;
mod nifti;

pub use augment::{augment, AugmentSpec};
pub use io::{load_label_map, load_volume, store_label_map, store_volume};
pub use nifti::load_nifti;

use std::collections::BTreeMap;

use crate::error::{Error, Result, Warning};

/// Dense scalar grid. `data` is x-fastest: index = x + nx*(y + ny*z).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: (usize, usize, usize),
    /// Voxel spacing in millimeters, all > 0.
    pub spacing: (f32, f32, f32),
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<f32>) -> Result<Self> {
        validate_dims_spacing(dims, spacing)?;
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel value".into()));
        }
        Ok(Volume3D { dims, spacing, data })
    }

    pub fn filled(dims: (usize, usize, usize), spacing: (f32, f32, f32), value: f32) -> Self {
        Volume3D {
            dims,
            spacing,
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Self {
        Self::filled(dims, spacing, 0.0)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.idx(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Integer atlas grid plus the label registry. Label 0 is background and
/// never appears in the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub labels: Vec<u32>,
    pub registry: BTreeMap<u32, String>,
}

impl LabelMap {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        labels: Vec<u32>,
        registry: BTreeMap<u32, String>,
    ) -> Result<Self> {
        validate_dims_spacing(dims, spacing)?;
        if labels.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::InvalidVolume(format!(
                "label length {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        if registry.contains_key(&0) {
            return Err(Error::InvalidVolume(
                "label 0 is reserved for background".into(),
            ));
        }
        for &l in &labels {
            if l != 0 && !registry.contains_key(&l) {
                return Err(Error::InvalidVolume(format!(
                    "label {l} present in grid but missing from registry"
                )));
            }
        }
        Ok(LabelMap {
            dims,
            spacing,
            labels,
            registry,
        })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }
}

fn validate_dims_spacing(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::InvalidVolume(format!("zero-sized dims {dims:?}")));
    }
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0)
        || !spacing.0.is_finite()
        || !spacing.1.is_finite()
        || !spacing.2.is_finite()
    {
        return Err(Error::InvalidVolume(format!("invalid spacing {spacing:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

/// Corner-aligned source coordinate for target index `i`: the centers of the
/// first and last voxels map onto each other. A single-voxel target maps to
/// the source center.
#[inline]
fn source_coord(i: usize, n_src: usize, n_tgt: usize) -> f64 {
    if n_tgt == 1 {
        (n_src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_src as f64 - 1.0) / (n_tgt as f64 - 1.0)
    }
}

pub fn resample(v: &Volume3D, target_dims: (usize, usize, usize), mode: ResampleMode) -> Result<Volume3D> {
    if v.is_empty() {
        return Err(Error::InvalidVolume("cannot resample empty volume".into()));
    }
    if target_dims.0 == 0 || target_dims.1 == 0 || target_dims.2 == 0 {
        return Err(Error::InvalidVolume(format!(
            "target dims must be >= 1, got {target_dims:?}"
        )));
    }
    if target_dims == v.dims {
        return Ok(v.clone());
    }
    let (nx, ny, nz) = v.dims;
    let (tx, ty, tz) = target_dims;
    let spacing = (
        v.spacing.0 * nx as f32 / tx as f32,
        v.spacing.1 * ny as f32 / ty as f32,
        v.spacing.2 * nz as f32 / tz as f32,
    );
    let mut out = vec![0.0f32; tx * ty * tz];
    for z in 0..tz {
        let sz = source_coord(z, nz, tz);
        for y in 0..ty {
            let sy = source_coord(y, ny, ty);
            for x in 0..tx {
                let sx = source_coord(x, nx, tx);
                let val = match mode {
                    ResampleMode::Trilinear => sample_trilinear(v, sx, sy, sz),
                    ResampleMode::Nearest => {
                        let ix = (sx.round() as usize).min(nx - 1);
                        let iy = (sy.round() as usize).min(ny - 1);
                        let iz = (sz.round() as usize).min(nz - 1);
                        v.at(ix, iy, iz) as f64
                    }
                };
                out[x + tx * (y + ty * z)] = val as f32;
            }
        }
    }
    Volume3D::new(target_dims, spacing, out)
}

/// Nearest-neighbor resampling for label grids; the registry is carried over.
pub fn resample_labels(lm: &LabelMap, target_dims: (usize, usize, usize)) -> Result<LabelMap> {
    if target_dims.0 == 0 || target_dims.1 == 0 || target_dims.2 == 0 {
        return Err(Error::InvalidVolume(format!(
            "target dims must be >= 1, got {target_dims:?}"
        )));
    }
    if target_dims == lm.dims {
        return Ok(lm.clone());
    }
    let (nx, ny, nz) = lm.dims;
    let (tx, ty, tz) = target_dims;
    let spacing = (
        lm.spacing.0 * nx as f32 / tx as f32,
        lm.spacing.1 * ny as f32 / ty as f32,
        lm.spacing.2 * nz as f32 / tz as f32,
    );
    let mut out = vec![0u32; tx * ty * tz];
    for z in 0..tz {
        let iz = (source_coord(z, nz, tz).round() as usize).min(nz - 1);
        for y in 0..ty {
            let iy = (source_coord(y, ny, ty).round() as usize).min(ny - 1);
            for x in 0..tx {
                let ix = (source_coord(x, nx, tx).round() as usize).min(nx - 1);
                out[x + tx * (y + ty * z)] = lm.labels[lm.idx(ix, iy, iz)];
            }
        }
    }
    LabelMap::new(target_dims, spacing, out, lm.registry.clone())
}

fn sample_trilinear(v: &Volume3D, sx: f64, sy: f64, sz: f64) -> f64 {
    let (nx, ny, nz) = v.dims;
    let cl = |c: f64, n: usize| -> (usize, usize, f64) {
        let c = c.clamp(0.0, n as f64 - 1.0);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let (x0, x1, fx) = cl(sx, nx);
    let (y0, y1, fy) = cl(sy, ny);
    let (z0, z1, fz) = cl(sz, nz);
    let mut acc = 0.0f64;
    for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * v.at(xi, yi, zi) as f64;
            }
        }
    }
    acc
}

/// Normalize to zero mean and unit population variance. Constant input
/// (stddev < 1e-12) yields an all-zero volume and a `DegenerateIntensity`
/// warning.
pub fn zscore_normalize(v: &Volume3D) -> Result<(Volume3D, Option<Warning>)> {
    if v.len() < 2 {
        return Err(Error::InvalidVolume(
            "zscore_normalize needs at least 2 voxels".into(),
        ));
    }
    let n = v.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Ok((
            Volume3D::zeros(v.dims, v.spacing),
            Some(Warning::DegenerateIntensity),
        ));
    }
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect();
    Ok((
        Volume3D {
            dims: v.dims,
            spacing: v.spacing,
            data,
        },
        None,
    ))
}
