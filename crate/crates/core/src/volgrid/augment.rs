//! Random affine + elastic + intensity augmentation.

use serde::{Deserialize, Serialize};

use super::Volume3D;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// All ranges are symmetric about the identity: rotation in ±`rotation_deg`,
/// translation in ±`translation_vox`, scale in 1±`scale_delta`, and so on.
/// The seed fully determines the sampled transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: [f64; 3],
    pub translation_vox: [f64; 3],
    pub scale_delta: f64,
    pub elastic_magnitude_vox: f64,
    pub elastic_grid_spacing_vox: f64,
    pub noise_stddev: f64,
    pub intensity_shift: f64,
    pub intensity_scale_delta: f64,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn identity(seed: u64) -> Self {
        AugmentSpec {
            rotation_deg: [0.0; 3],
            translation_vox: [0.0; 3],
            scale_delta: 0.0,
            elastic_magnitude_vox: 0.0,
            elastic_grid_spacing_vox: 8.0,
            noise_stddev: 0.0,
            intensity_shift: 0.0,
            intensity_scale_delta: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg.iter().all(|r| r.is_finite() && *r >= 0.0)
            && self.translation_vox.iter().all(|t| t.is_finite() && *t >= 0.0)
            && self.scale_delta.is_finite()
            && (0.0..1.0).contains(&self.scale_delta)
            && self.elastic_magnitude_vox >= 0.0
            && self.elastic_grid_spacing_vox >= 1.0
            && self.noise_stddev >= 0.0
            && self.intensity_shift >= 0.0
            && (0.0..1.0).contains(&self.intensity_scale_delta);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid augment spec {self:?}")))
        }
    }
}

struct SampledTransform {
    rot_inv: [[f64; 3]; 3],
    translation: [f64; 3],
    inv_scale: f64,
    elastic: Option<ElasticField>,
    intensity_scale: f64,
    intensity_shift: f64,
}

struct ElasticField {
    grid_dims: (usize, usize, usize),
    spacing: f64,
    // displacement per control point, x-fastest, 3 components each
    disp: Vec<[f64; 3]>,
}

impl ElasticField {
    fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let (gx, gy, gz) = self.grid_dims;
        let cl = |c: f64, n: usize| -> (usize, usize, f64) {
            let c = (c / self.spacing).clamp(0.0, n as f64 - 1.0);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, c - i0 as f64)
        };
        let (x0, x1, fx) = cl(p[0], gx);
        let (y0, y1, fy) = cl(p[1], gy);
        let (z0, z1, fz) = cl(p[2], gz);
        let mut acc = [0.0f64; 3];
        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wz * wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let d = self.disp[xi + gx * (yi + gy * zi)];
                    acc[0] += w * d[0];
                    acc[1] += w * d[1];
                    acc[2] += w * d[2];
                }
            }
        }
        acc
    }
}

fn rotation_matrix(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn sample_transform(v: &Volume3D, spec: &AugmentSpec, rng: &mut Rng) -> SampledTransform {
    let deg = std::f64::consts::PI / 180.0;
    let ax = rng.uniform(-spec.rotation_deg[0], spec.rotation_deg[0]) * deg;
    let ay = rng.uniform(-spec.rotation_deg[1], spec.rotation_deg[1]) * deg;
    let az = rng.uniform(-spec.rotation_deg[2], spec.rotation_deg[2]) * deg;
    let translation = [
        rng.uniform(-spec.translation_vox[0], spec.translation_vox[0]),
        rng.uniform(-spec.translation_vox[1], spec.translation_vox[1]),
        rng.uniform(-spec.translation_vox[2], spec.translation_vox[2]),
    ];
    let scale = 1.0 + rng.uniform(-spec.scale_delta, spec.scale_delta);

    let elastic = if spec.elastic_magnitude_vox > 0.0 {
        let g = spec.elastic_grid_spacing_vox;
        let dims = (
            (v.dims.0 as f64 / g).ceil() as usize + 1,
            (v.dims.1 as f64 / g).ceil() as usize + 1,
            (v.dims.2 as f64 / g).ceil() as usize + 1,
        );
        let m = spec.elastic_magnitude_vox;
        let disp = (0..dims.0 * dims.1 * dims.2)
            .map(|_| {
                [
                    rng.uniform(-m, m),
                    rng.uniform(-m, m),
                    rng.uniform(-m, m),
                ]
            })
            .collect();
        Some(ElasticField {
            grid_dims: dims,
            spacing: g,
            disp,
        })
    } else {
        None
    };

    let intensity_scale = 1.0 + rng.uniform(-spec.intensity_scale_delta, spec.intensity_scale_delta);
    let intensity_shift = rng.uniform(-spec.intensity_shift, spec.intensity_shift);

    SampledTransform {
        rot_inv: transpose(&rotation_matrix(ax, ay, az)),
        translation,
        inv_scale: 1.0 / scale,
        elastic,
        intensity_scale,
        intensity_shift,
    }
}

/// Apply the augmentation sampled from `spec`. Output dims equal input dims;
/// identical (input, seed) pairs produce bitwise-identical outputs.
pub fn augment(v: &Volume3D, spec: &AugmentSpec) -> Result<Volume3D> {
    if v.is_empty() {
        return Err(Error::InvalidVolume("cannot augment empty volume".into()));
    }
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let t = sample_transform(v, spec, &mut rng);

    let geometric_identity = spec.rotation_deg == [0.0; 3]
        && spec.translation_vox == [0.0; 3]
        && spec.scale_delta == 0.0
        && spec.elastic_magnitude_vox == 0.0;

    let (nx, ny, nz) = v.dims;
    let center = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];

    let mut out = Vec::with_capacity(v.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let val = if geometric_identity {
                    v.at(x, y, z) as f64
                } else {
                    let p = [x as f64, y as f64, z as f64];
                    let mut q = [
                        (p[0] - center[0] - t.translation[0]) * t.inv_scale,
                        (p[1] - center[1] - t.translation[1]) * t.inv_scale,
                        (p[2] - center[2] - t.translation[2]) * t.inv_scale,
                    ];
                    q = [
                        t.rot_inv[0][0] * q[0] + t.rot_inv[0][1] * q[1] + t.rot_inv[0][2] * q[2],
                        t.rot_inv[1][0] * q[0] + t.rot_inv[1][1] * q[1] + t.rot_inv[1][2] * q[2],
                        t.rot_inv[2][0] * q[0] + t.rot_inv[2][1] * q[1] + t.rot_inv[2][2] * q[2],
                    ];
                    let mut src = [q[0] + center[0], q[1] + center[1], q[2] + center[2]];
                    if let Some(el) = &t.elastic {
                        let d = el.displacement(p);
                        src = [src[0] + d[0], src[1] + d[1], src[2] + d[2]];
                    }
                    super::sample_trilinear(v, src[0], src[1], src[2])
                };
                out.push(val);
            }
        }
    }

    // Intensity pipeline after geometry; noise draws run in x-fastest order.
    let mut data = Vec::with_capacity(out.len());
    for val in out {
        let mut x = val * t.intensity_scale + t.intensity_shift;
        if spec.noise_stddev > 0.0 {
            x += spec.noise_stddev * rng.normal();
        }
        data.push(x as f32);
    }
    Volume3D::new(v.dims, v.spacing, data)
}
