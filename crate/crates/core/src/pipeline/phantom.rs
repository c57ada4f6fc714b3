//! Synthetic phantom cohort: per-patient atlas geometry (non-overlapping
//! spherical regions on shuffled anchor sites), per-scan lesions, and the
//! suspicion phrase that drives the prior channel.
//!
//! Every scan emits the designated region's name as its phrase, so channel 2
//! carries no label information by itself. Positives implant a hyperintense
//! blob strictly inside that region; negatives either stay clean or carry a
//! distractor blob in some other region. Region sites are permuted per
//! patient, which makes the atlas (and hence the prior channel) the only way
//! to tell which blob location matters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volgrid::{LabelMap, Volume3D};

pub const REGION_NAME_POOL: [&str; 16] = [
    "hippocampus",
    "thalamus",
    "putamen",
    "caudate",
    "amygdala",
    "insula",
    "precuneus",
    "brainstem",
    "cerebellum",
    "fornix",
    "claustrum",
    "pallidum",
    "pons",
    "cuneus",
    "operculum",
    "pulvinar",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub num_regions: usize,
    /// Radius of every atlas region, in voxels.
    pub region_radius: f64,
    /// Index of the designated lesion-prone region (its name is the phrase).
    pub lesion_region: usize,
    /// Intensity added inside lesion blobs; zero makes classes
    /// indistinguishable.
    pub lesion_delta: f32,
    pub lesion_radius: (f64, f64),
    pub positive_prob: f64,
    /// Probability that a negative scan carries a distractor blob in a
    /// non-designated region.
    pub negative_blob_prob: f64,
    pub noise_stddev: f32,
    pub patients: usize,
    pub scans_per_patient: (usize, usize),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: (64, 64, 32),
            num_regions: 8,
            region_radius: 5.0,
            lesion_region: 0,
            lesion_delta: 3.0,
            lesion_radius: (2.0, 3.5),
            positive_prob: 0.5,
            negative_blob_prob: 1.0,
            noise_stddev: 1.0,
            patients: 150,
            scans_per_patient: (1, 2),
            seed: 2024,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Contract("phantom dims must be >= 1".into()));
        }
        if self.num_regions == 0 || self.num_regions > REGION_NAME_POOL.len() {
            return Err(Error::Contract(format!(
                "num_regions must be in 1..={}, got {}",
                REGION_NAME_POOL.len(),
                self.num_regions
            )));
        }
        if self.lesion_region >= self.num_regions {
            return Err(Error::Contract(format!(
                "lesion_region {} out of range for {} regions",
                self.lesion_region, self.num_regions
            )));
        }
        if !(self.region_radius > 0.0)
            || !(self.lesion_radius.0 > 0.0)
            || self.lesion_radius.1 < self.lesion_radius.0
        {
            return Err(Error::Contract("invalid radii".into()));
        }
        if self.lesion_radius.1 >= self.region_radius {
            return Err(Error::Contract(
                "lesion radius must be strictly smaller than the region radius".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_prob)
            || !(0.0..=1.0).contains(&self.negative_blob_prob)
        {
            return Err(Error::Contract("probabilities must be in [0, 1]".into()));
        }
        if self.noise_stddev < 0.0 {
            return Err(Error::Contract("noise stddev must be >= 0".into()));
        }
        if self.patients == 0
            || self.scans_per_patient.0 == 0
            || self.scans_per_patient.1 < self.scans_per_patient.0
        {
            return Err(Error::Contract("invalid patient/scan counts".into()));
        }
        Ok(())
    }

    pub fn region_names(&self) -> Vec<String> {
        REGION_NAME_POOL[..self.num_regions]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PhantomScan {
    pub mri: Volume3D,
    pub labels: LabelMap,
    pub phrases: Vec<String>,
    pub label: bool,
    pub patient: String,
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub scans: Vec<PhantomScan>,
    pub region_names: Vec<String>,
}

/// Anchor sites: cells of the smallest grid that fits `num_regions`,
/// guaranteeing disjoint regions when the radius fits in a cell.
fn anchor_sites(dims: (usize, usize, usize), n: usize) -> Vec<(f64, f64, f64)> {
    let mut split = (1usize, 1usize, 1usize);
    while split.0 * split.1 * split.2 < n {
        // grow the largest physical extent first
        let ex = dims.0 as f64 / split.0 as f64;
        let ey = dims.1 as f64 / split.1 as f64;
        let ez = dims.2 as f64 / split.2 as f64;
        if ex >= ey && ex >= ez {
            split.0 += 1;
        } else if ey >= ez {
            split.1 += 1;
        } else {
            split.2 += 1;
        }
    }
    let mut sites = Vec::new();
    for cz in 0..split.2 {
        for cy in 0..split.1 {
            for cx in 0..split.0 {
                sites.push((
                    (cx as f64 + 0.5) * dims.0 as f64 / split.0 as f64,
                    (cy as f64 + 0.5) * dims.1 as f64 / split.1 as f64,
                    (cz as f64 + 0.5) * dims.2 as f64 / split.2 as f64,
                ));
            }
        }
    }
    sites.truncate(n);
    sites
}

fn cell_half_extents(dims: (usize, usize, usize), n: usize) -> (f64, f64, f64) {
    let mut split = (1usize, 1usize, 1usize);
    while split.0 * split.1 * split.2 < n {
        let ex = dims.0 as f64 / split.0 as f64;
        let ey = dims.1 as f64 / split.1 as f64;
        let ez = dims.2 as f64 / split.2 as f64;
        if ex >= ey && ex >= ez {
            split.0 += 1;
        } else if ey >= ez {
            split.1 += 1;
        } else {
            split.2 += 1;
        }
    }
    (
        dims.0 as f64 / split.0 as f64 / 2.0,
        dims.1 as f64 / split.1 as f64 / 2.0,
        dims.2 as f64 / split.2 as f64 / 2.0,
    )
}

fn fill_sphere_labels(
    labels: &mut [u32],
    dims: (usize, usize, usize),
    center: (f64, f64, f64),
    radius: f64,
    id: u32,
) {
    let (nx, ny, nz) = dims;
    let lo = |c: f64| ((c - radius).floor().max(0.0)) as usize;
    let hi = |c: f64, n: usize| ((c + radius).ceil().min(n as f64 - 1.0)) as usize;
    for z in lo(center.2)..=hi(center.2, nz) {
        for y in lo(center.1)..=hi(center.1, ny) {
            for x in lo(center.0)..=hi(center.0, nx) {
                let dx = x as f64 - center.0;
                let dy = y as f64 - center.1;
                let dz = z as f64 - center.2;
                if dx * dx + dy * dy + dz * dz <= radius * radius {
                    labels[x + nx * (y + ny * z)] = id;
                }
            }
        }
    }
}

fn add_sphere_intensity(
    v: &mut Volume3D,
    center: (f64, f64, f64),
    radius: f64,
    delta: f32,
) {
    let (nx, ny, nz) = v.dims;
    let lo = |c: f64| ((c - radius).floor().max(0.0)) as usize;
    let hi = |c: f64, n: usize| ((c + radius).ceil().min(n as f64 - 1.0)) as usize;
    for z in lo(center.2)..=hi(center.2, nz) {
        for y in lo(center.1)..=hi(center.1, ny) {
            for x in lo(center.0)..=hi(center.0, nx) {
                let dx = x as f64 - center.0;
                let dy = y as f64 - center.1;
                let dz = z as f64 - center.2;
                if dx * dx + dy * dy + dz * dz <= radius * radius {
                    v.data[x + nx * (y + ny * z)] += delta;
                }
            }
        }
    }
}

/// Sample a blob center so the blob stays strictly inside the region sphere.
fn sample_blob(rng: &mut Rng, region_center: (f64, f64, f64), region_radius: f64, blob_radius: f64) -> (f64, f64, f64) {
    let margin = region_radius - blob_radius - 0.5;
    loop {
        let dx = rng.uniform(-margin, margin);
        let dy = rng.uniform(-margin, margin);
        let dz = rng.uniform(-margin, margin);
        if dx * dx + dy * dy + dz * dz <= margin * margin {
            return (
                region_center.0 + dx,
                region_center.1 + dy,
                region_center.2 + dz,
            );
        }
    }
}

pub fn generate_phantoms(spec: &PhantomSpec) -> Result<PhantomDataset> {
    spec.validate()?;
    let names = spec.region_names();
    let sites = anchor_sites(spec.dims, spec.num_regions);
    let half = cell_half_extents(spec.dims, spec.num_regions);
    let min_half = half.0.min(half.1).min(half.2);
    if spec.region_radius + 0.5 > min_half {
        return Err(Error::Placement(format!(
            "region radius {} does not fit the {}-region layout on dims {:?} (cell half-extent {min_half:.2})",
            spec.region_radius, spec.num_regions, spec.dims
        )));
    }
    // jitter head-room keeps shuffled spheres disjoint
    let jitter = (min_half - spec.region_radius - 0.5).min(2.0);

    let master = Rng::new(spec.seed);
    let mut registry = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        registry.insert(i as u32 + 1, name.clone());
    }

    let mut scans = Vec::new();
    for pi in 0..spec.patients {
        let mut patient_rng = master.derive(pi as u64 + 1);
        // per-patient anatomy: shuffled anchor sites plus a small jitter
        let mut site_order: Vec<usize> = (0..spec.num_regions).collect();
        patient_rng.shuffle(&mut site_order);
        let centers: Vec<(f64, f64, f64)> = site_order
            .iter()
            .map(|&si| {
                let (sx, sy, sz) = sites[si];
                (
                    sx + patient_rng.uniform(-jitter, jitter),
                    sy + patient_rng.uniform(-jitter, jitter),
                    sz + patient_rng.uniform(-jitter, jitter),
                )
            })
            .collect();

        let mut labels = vec![0u32; spec.dims.0 * spec.dims.1 * spec.dims.2];
        for (ri, &center) in centers.iter().enumerate() {
            fill_sphere_labels(&mut labels, spec.dims, center, spec.region_radius, ri as u32 + 1);
        }
        let label_map = LabelMap::new(spec.dims, (1.0, 1.0, 1.0), labels, registry.clone())?;

        let n_scans = if spec.scans_per_patient.0 == spec.scans_per_patient.1 {
            spec.scans_per_patient.0
        } else {
            spec.scans_per_patient.0
                + patient_rng.below(spec.scans_per_patient.1 - spec.scans_per_patient.0 + 1)
        };
        for si in 0..n_scans {
            let mut scan_rng = master.derive((pi as u64 + 1) * 1_000_003 + si as u64);
            let positive = scan_rng.bool_with_prob(spec.positive_prob);
            let mut mri = Volume3D::zeros(spec.dims, (1.0, 1.0, 1.0));

            let blob_region = if positive {
                Some(spec.lesion_region)
            } else if spec.num_regions > 1 && scan_rng.bool_with_prob(spec.negative_blob_prob) {
                let mut r = scan_rng.below(spec.num_regions - 1);
                if r >= spec.lesion_region {
                    r += 1;
                }
                Some(r)
            } else {
                None
            };
            if let Some(ri) = blob_region {
                if spec.lesion_delta != 0.0 {
                    let blob_r = scan_rng.uniform(spec.lesion_radius.0, spec.lesion_radius.1);
                    let center = sample_blob(&mut scan_rng, centers[ri], spec.region_radius, blob_r);
                    add_sphere_intensity(&mut mri, center, blob_r, spec.lesion_delta);
                }
            }
            if spec.noise_stddev > 0.0 {
                for v in mri.data.iter_mut() {
                    *v += spec.noise_stddev * scan_rng.normal() as f32;
                }
            }
            scans.push(PhantomScan {
                mri,
                labels: label_map.clone(),
                phrases: vec![names[spec.lesion_region].clone()],
                label: positive,
                patient: format!("P{:04}", pi + 1),
            });
        }
    }
    Ok(PhantomDataset {
        scans,
        region_names: names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: (24, 24, 16),
            num_regions: 4,
            region_radius: 4.0,
            lesion_radius: (1.5, 2.5),
            patients: 6,
            scans_per_patient: (1, 2),
            noise_stddev: 0.5,
            seed: 11,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small_spec();
        let a = generate_phantoms(&spec).unwrap();
        let b = generate_phantoms(&spec).unwrap();
        assert_eq!(a.scans.len(), b.scans.len());
        for (x, y) in a.scans.iter().zip(&b.scans) {
            assert_eq!(x.patient, y.patient);
            assert_eq!(x.label, y.label);
            assert_eq!(x.phrases, y.phrases);
            assert!(x
                .mri
                .data
                .iter()
                .zip(&y.mri.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(x.labels.labels, y.labels.labels);
        }
        let other = PhantomSpec {
            seed: 12,
            ..small_spec()
        };
        let c = generate_phantoms(&other).unwrap();
        assert!(a
            .scans
            .iter()
            .zip(&c.scans)
            .any(|(x, y)| x.mri.data != y.mri.data));
    }

    #[test]
    fn positive_blob_lies_inside_designated_region() {
        let spec = PhantomSpec {
            noise_stddev: 0.0,
            positive_prob: 1.0,
            ..small_spec()
        };
        let ds = generate_phantoms(&spec).unwrap();
        let designated = spec.lesion_region as u32 + 1;
        for scan in &ds.scans {
            assert!(scan.label);
            let mut any = false;
            for (i, &v) in scan.mri.data.iter().enumerate() {
                if v > 0.0 {
                    any = true;
                    assert_eq!(
                        scan.labels.labels[i], designated,
                        "blob voxel {i} outside designated region"
                    );
                }
            }
            assert!(any, "positive scan without a blob");
            assert_eq!(scan.phrases, vec![REGION_NAME_POOL[0].to_string()]);
        }
    }

    #[test]
    fn negative_distractors_avoid_designated_region() {
        let spec = PhantomSpec {
            noise_stddev: 0.0,
            positive_prob: 0.0,
            negative_blob_prob: 1.0,
            ..small_spec()
        };
        let ds = generate_phantoms(&spec).unwrap();
        let designated = spec.lesion_region as u32 + 1;
        for scan in &ds.scans {
            assert!(!scan.label);
            for (i, &v) in scan.mri.data.iter().enumerate() {
                if v > 0.0 {
                    assert_ne!(scan.labels.labels[i], designated);
                    assert_ne!(scan.labels.labels[i], 0, "distractor escaped its region");
                }
            }
        }
    }

    #[test]
    fn regions_do_not_overlap_and_match_registry() {
        let ds = generate_phantoms(&small_spec()).unwrap();
        for scan in &ds.scans {
            let mut counts = BTreeMap::new();
            for &l in &scan.labels.labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            for r in 1..=4u32 {
                assert!(counts.get(&r).copied().unwrap_or(0) > 0, "region {r} missing");
            }
        }
    }

    #[test]
    fn oversized_regions_yield_placement_error() {
        let spec = PhantomSpec {
            region_radius: 20.0,
            lesion_radius: (1.0, 2.0),
            ..small_spec()
        };
        assert!(matches!(
            generate_phantoms(&spec),
            Err(Error::Placement(_))
        ));
    }

    #[test]
    fn patients_share_anatomy_across_scans() {
        let spec = PhantomSpec {
            scans_per_patient: (2, 2),
            ..small_spec()
        };
        let ds = generate_phantoms(&spec).unwrap();
        for pair in ds.scans.chunks(2) {
            assert_eq!(pair[0].patient, pair[1].patient);
            assert_eq!(pair[0].labels.labels, pair[1].labels.labels);
            assert_ne!(pair[0].mri.data, pair[1].mri.data);
        }
    }
}
