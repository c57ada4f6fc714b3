//! Gaussian-smoothed anatomical prior channels built from signed distance
//! transforms of region masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::volgrid::{LabelMap, Volume3D};

/// Binary region mask over the same grid as its source volume.
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub mask: Vec<bool>,
    pub source_label: u32,
}

impl RegionMask {
    pub fn from_label(lm: &LabelMap, label: u32) -> Self {
        RegionMask {
            dims: lm.dims,
            spacing: lm.spacing,
            mask: lm.labels.iter().map(|&l| l == label).collect(),
            source_label: label,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Signed distances: negative strictly inside the region, zero on boundary
/// voxels, positive outside.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub d: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Max,
    SumClamped,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorParams {
    /// Smoothing scale in the same units as the distance field (voxels for
    /// unit spacing).
    pub sigma: f64,
    pub fusion: Fusion,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            sigma: 3.0,
            fusion: Fusion::Max,
        }
    }
}

impl PriorParams {
    fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Contract(format!("sigma must be > 0, got {}", self.sigma)))
        }
    }
}

/// Voxels of the mask with at least one 6-connected neighbor outside it;
/// grid faces count as outside. Returned as flat indices in grid order.
pub fn boundary_voxels(m: &RegionMask) -> Result<Vec<usize>> {
    if m.count() == 0 {
        return Err(Error::EmptyRegion(format!("label {}", m.source_label)));
    }
    let (nx, ny, nz) = m.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = m.idx(x, y, z);
                if !m.mask[i] {
                    continue;
                }
                let exposed = x == 0
                    || !m.mask[i - 1]
                    || x == nx - 1
                    || !m.mask[i + 1]
                    || y == 0
                    || !m.mask[i - nx]
                    || y == ny - 1
                    || !m.mask[i + nx]
                    || z == 0
                    || !m.mask[i - nx * ny]
                    || z == nz - 1
                    || !m.mask[i + nx * ny];
                if exposed {
                    out.push(i);
                }
            }
        }
    }
    Ok(out)
}

/// Exact Euclidean signed distance transform, with per-axis offsets scaled
/// by voxel spacing.
pub fn signed_distance_transform(m: &RegionMask) -> Result<DistanceField> {
    signed_distance_transform_opts(m, true)
}

/// `use_spacing = false` measures distances in index units regardless of the
/// grid's physical spacing.
pub fn signed_distance_transform_opts(m: &RegionMask, use_spacing: bool) -> Result<DistanceField> {
    let boundary = boundary_voxels(m)?;
    let (nx, ny, nz) = m.dims;
    let steps: [f64; 3] = if use_spacing {
        [m.spacing.0 as f64, m.spacing.1 as f64, m.spacing.2 as f64]
    } else {
        [1.0, 1.0, 1.0]
    };

    // Squared distances to the boundary seed set, one separable pass per axis.
    let mut sq = vec![f64::INFINITY; nx * ny * nz];
    for &i in &boundary {
        sq[i] = 0.0;
    }

    let mut line = vec![0.0f64; nx.max(ny).max(nz)];
    let mut out_line = vec![0.0f64; line.len()];

    // x axis
    for z in 0..nz {
        for y in 0..ny {
            let base = nx * (y + ny * z);
            line[..nx].copy_from_slice(&sq[base..base + nx]);
            dt_1d(&line[..nx], steps[0], &mut out_line[..nx]);
            sq[base..base + nx].copy_from_slice(&out_line[..nx]);
        }
    }
    // y axis
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = sq[x + nx * (y + ny * z)];
            }
            dt_1d(&line[..ny], steps[1], &mut out_line[..ny]);
            for y in 0..ny {
                sq[x + nx * (y + ny * z)] = out_line[y];
            }
        }
    }
    // z axis
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = sq[x + nx * (y + ny * z)];
            }
            dt_1d(&line[..nz], steps[2], &mut out_line[..nz]);
            for z in 0..nz {
                sq[x + nx * (y + ny * z)] = out_line[z];
            }
        }
    }

    let d = sq
        .iter()
        .zip(&m.mask)
        .map(|(&s, &inside)| {
            let dist = s.sqrt();
            if inside {
                (-dist) as f32
            } else {
                dist as f32
            }
        })
        .collect();
    Ok(DistanceField {
        dims: m.dims,
        spacing: m.spacing,
        d,
    })
}

/// 1D squared-distance transform over parabolas at positions `j * step`
/// (lower-envelope method). Sites with infinite values are skipped.
fn dt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    if n == 0 {
        return;
    }
    let pos = |j: usize| j as f64 * step;

    let mut sites = vec![0usize; n];
    let mut bounds = vec![0.0f64; n + 1];
    let mut k = 0usize;
    sites[0] = 0;
    bounds[0] = f64::NEG_INFINITY;
    bounds[1] = f64::INFINITY;

    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[sites[k]] == f64::INFINITY {
            // replace a leading infinite site
            sites[k] = q;
            bounds[k] = f64::NEG_INFINITY;
            bounds[k + 1] = f64::INFINITY;
            continue;
        }
        loop {
            let p = sites[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                / (2.0 * pos(q) - 2.0 * pos(p));
            if s <= bounds[k] {
                if k == 0 {
                    sites[0] = q;
                    bounds[0] = f64::NEG_INFINITY;
                    bounds[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            sites[k] = q;
            bounds[k] = s;
            bounds[k + 1] = f64::INFINITY;
            break;
        }
    }

    if f[sites[0]] == f64::INFINITY {
        out[..n].copy_from_slice(&f[..n]);
        return;
    }

    let mut j = 0usize;
    for q in 0..n {
        let x = pos(q);
        while bounds[j + 1] < x {
            j += 1;
        }
        let p = sites[j];
        let dx = x - pos(p);
        out[q] = dx * dx + f[p];
    }
}

/// Center-emphasizing weight map: `W = 1 - exp(-d_in^2 / (2 sigma^2))` with
/// `d_in = max(0, -D)`. Values are in [0, 1), zero outside the region and on
/// its boundary.
pub fn gaussian_prior(dfield: &DistanceField, params: &PriorParams) -> Result<Volume3D> {
    params.validate()?;
    let inv = 1.0 / (2.0 * params.sigma * params.sigma);
    let below_one = f32::from_bits(0x3f7f_ffff);
    let data = dfield
        .d
        .iter()
        .map(|&d| {
            if d >= 0.0 {
                0.0
            } else {
                let din = -(d as f64);
                let w = (1.0 - (-din * din * inv).exp()) as f32;
                w.min(below_one)
            }
        })
        .collect();
    Ok(Volume3D {
        dims: dfield.dims,
        spacing: dfield.spacing,
        data,
    })
}

pub fn fuse_region_priors(priors: &[Volume3D], params: &PriorParams) -> Result<Volume3D> {
    params.validate()?;
    let first = priors
        .first()
        .ok_or_else(|| Error::Contract("fuse_region_priors needs at least one prior".into()))?;
    for (i, p) in priors.iter().enumerate() {
        if p.dims != first.dims {
            return Err(Error::shape(
                "fuse_region_priors",
                format!("prior {i} has dims {:?}, expected {:?}", p.dims, first.dims),
            ));
        }
    }
    let mut out = vec![0.0f32; first.len()];
    match params.fusion {
        Fusion::Max => {
            for p in priors {
                for (o, &v) in out.iter_mut().zip(&p.data) {
                    *o = o.max(v);
                }
            }
        }
        Fusion::SumClamped => {
            for p in priors {
                for (o, &v) in out.iter_mut().zip(&p.data) {
                    *o = (*o + v).min(1.0);
                }
            }
        }
    }
    Ok(Volume3D {
        dims: first.dims,
        spacing: first.spacing,
        data: out,
    })
}

/// Build the channel-2 prior for a set of selected labels. Labels absent
/// from the voxel grid contribute an all-zero prior and a `MissingRegion`
/// warning; an empty selection yields an all-zero channel.
pub fn build_prior_channel(
    lm: &LabelMap,
    selected_labels: &[u32],
    params: &PriorParams,
) -> Result<(Volume3D, Vec<Warning>)> {
    params.validate()?;
    for &id in selected_labels {
        if !lm.registry.contains_key(&id) {
            return Err(Error::UnknownLabel(id));
        }
    }
    if selected_labels.is_empty() {
        return Ok((Volume3D::zeros(lm.dims, lm.spacing), Vec::new()));
    }

    let per_region: Vec<Option<Volume3D>> = selected_labels
        .par_iter()
        .map(|&id| {
            let mask = RegionMask::from_label(lm, id);
            if mask.count() == 0 {
                return Ok(None);
            }
            let df = signed_distance_transform(&mask)?;
            gaussian_prior(&df, params).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let mut priors = Vec::new();
    for (prior, &id) in per_region.into_iter().zip(selected_labels) {
        match prior {
            Some(p) => priors.push(p),
            None => warnings.push(Warning::MissingRegion(id)),
        }
    }
    if priors.is_empty() {
        return Ok((Volume3D::zeros(lm.dims, lm.spacing), warnings));
    }
    let fused = fuse_region_priors(&priors, params)?;
    Ok((fused, warnings))
}
