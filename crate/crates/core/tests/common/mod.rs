//! Brute-force oracles shared by the integration suites. These reimplement
//! each contract from its definition and never call the production path they
//! are checking.

use aga3d_core::prior::RegionMask;
use aga3d_core::rng::Rng;

/// O(N * |boundary|) signed distance: per voxel, the minimum Euclidean
/// distance to any boundary voxel center, negated inside the mask. The
/// boundary is recomputed here from the 6-neighborhood rule.
pub fn brute_force_sdt(m: &RegionMask) -> Vec<f64> {
    let (nx, ny, nz) = m.dims;
    let at = |x: usize, y: usize, z: usize| m.mask[x + nx * (y + ny * z)];
    let mut boundary = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !at(x, y, z) {
                    continue;
                }
                let exposed = x == 0
                    || y == 0
                    || z == 0
                    || x == nx - 1
                    || y == ny - 1
                    || z == nz - 1
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
                if exposed {
                    boundary.push((x as f64, y as f64, z as f64));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut best = f64::INFINITY;
                for &(bx, by, bz) in &boundary {
                    let d2 = (x as f64 - bx).powi(2)
                        + (y as f64 - by).powi(2)
                        + (z as f64 - bz).powi(2);
                    if d2 < best {
                        best = d2;
                    }
                }
                let d = best.sqrt();
                out.push(if at(x, y, z) { -d } else { d });
            }
        }
    }
    out
}

pub fn random_mask(rng: &mut Rng, max_side: usize) -> RegionMask {
    let dims = (
        2 + rng.below(max_side - 1),
        2 + rng.below(max_side - 1),
        2 + rng.below(max_side - 1),
    );
    let fill = rng.uniform(0.05, 0.9);
    let mut mask: Vec<bool> = (0..dims.0 * dims.1 * dims.2)
        .map(|_| rng.bool_with_prob(fill))
        .collect();
    if !mask.iter().any(|&m| m) {
        let n = mask.len();
        mask[rng.below(n)] = true;
    }
    RegionMask {
        dims,
        spacing: (1.0, 1.0, 1.0),
        mask,
        source_label: 1,
    }
}

/// Full-sort top-k reference with the (score desc, id asc) tie rule.
pub fn brute_top_k(scores: &[(u32, f64)], k: usize) -> Vec<(u32, f64)> {
    let mut all = scores.to_vec();
    all.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    all.truncate(k);
    all
}

/// Literal transcription of the supervised InfoNCE double loop, normalized
/// by the number of contributing anchors.
pub fn brute_supcon(z: &[Vec<f64>], labels: &[bool], tau: f64) -> Option<f64> {
    let n = z.len();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let contributing: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|p| p != i && labels[p] == labels[i]))
        .collect();
    if contributing.is_empty() {
        return None;
    }
    let n_c = contributing.len() as f64;
    let mut loss = 0.0;
    for &i in &contributing {
        let pos: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        for &p in &pos {
            let num = (dot(&z[i], &z[p]) / tau).exp();
            let den: f64 = (0..n)
                .filter(|&a| a != i)
                .map(|a| (dot(&z[i], &z[a]) / tau).exp())
                .sum();
            loss -= (num / den).ln() / (n_c * pos.len() as f64);
        }
    }
    Some(loss)
}

/// O(N^2) concordant/tied pair count.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| !y)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut num = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                num += 1.0;
            } else if p == n {
                num += 0.5;
            }
        }
    }
    Some(num / (pos.len() * neg.len()) as f64)
}

pub fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}
