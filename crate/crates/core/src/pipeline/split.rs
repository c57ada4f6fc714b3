//! Patient-level dataset splitting with largest-remainder apportionment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::phantom::PhantomScan;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn validate_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    Ok(())
}

/// Apportion `total` patients across three splits: floors first, leftover
/// seats by largest fractional remainder (earlier split wins ties).
fn apportion(total: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fr = [fractions.0, fractions.1, fractions.2];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0usize;
    for i in 0..3 {
        let exact = fr[i] * total as f64;
        counts[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        remainders[b]
            .partial_cmp(&remainders[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut left = total - assigned;
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assign whole patients to train/val/test so no patient ID crosses splits.
/// Deterministic for a fixed seed.
pub fn patient_split(
    scans: &[PhantomScan],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    validate_fractions(fractions)?;
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, scan) in scans.iter().enumerate() {
        by_patient.entry(scan.patient.as_str()).or_default().push(i);
    }
    if by_patient.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 patients, got {}",
            by_patient.len()
        )));
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut patients);
    let counts = apportion(patients.len(), fractions);

    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, patient) in patients.iter().enumerate() {
        let bucket = if i < counts[0] {
            &mut out.train
        } else if i < counts[0] + counts[1] {
            &mut out.val
        } else {
            &mut out.test
        };
        bucket.extend_from_slice(&by_patient[patient]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::phantom::{generate_phantoms, PhantomSpec};

    fn dataset(patients: usize, scans: (usize, usize), seed: u64) -> Vec<PhantomScan> {
        let spec = PhantomSpec {
            dims: (16, 16, 12),
            num_regions: 2,
            region_radius: 3.0,
            lesion_radius: (1.0, 1.5),
            patients,
            scans_per_patient: scans,
            noise_stddev: 0.1,
            seed,
            ..PhantomSpec::default()
        };
        generate_phantoms(&spec).unwrap().scans
    }

    fn patients_of(scans: &[PhantomScan], idx: &[usize]) -> std::collections::BTreeSet<String> {
        idx.iter().map(|&i| scans[i].patient.clone()).collect()
    }

    #[test]
    fn ten_patients_split_seven_and_rest() {
        let scans = dataset(10, (1, 1), 3);
        let s = patient_split(&scans, (0.70, 0.15, 0.15), 42).unwrap();
        assert_eq!(s.train.len(), 7);
        assert_eq!(s.val.len() + s.test.len(), 3);
        assert!(s.val.len() >= 1 && s.test.len() >= 1);
        let train_p = patients_of(&scans, &s.train);
        let val_p = patients_of(&scans, &s.val);
        let test_p = patients_of(&scans, &s.test);
        assert!(train_p.is_disjoint(&val_p));
        assert!(train_p.is_disjoint(&test_p));
        assert!(val_p.is_disjoint(&test_p));
    }

    #[test]
    fn patients_never_cross_splits() {
        let scans = dataset(12, (2, 5), 7);
        let s = patient_split(&scans, (0.70, 0.15, 0.15), 1).unwrap();
        let train_p = patients_of(&scans, &s.train);
        let val_p = patients_of(&scans, &s.val);
        let test_p = patients_of(&scans, &s.test);
        assert!(train_p.is_disjoint(&val_p));
        assert!(train_p.is_disjoint(&test_p));
        assert!(val_p.is_disjoint(&test_p));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), scans.len());
        // all scans of one patient land together
        for p in &train_p {
            let total = scans.iter().filter(|s| &s.patient == p).count();
            let in_train = s.train.iter().filter(|&&i| &scans[i].patient == p).count();
            assert_eq!(total, in_train);
        }
    }

    #[test]
    fn deterministic_per_seed_and_varies_across_seeds() {
        let scans = dataset(12, (1, 2), 5);
        let a = patient_split(&scans, (0.70, 0.15, 0.15), 9).unwrap();
        let b = patient_split(&scans, (0.70, 0.15, 0.15), 9).unwrap();
        assert_eq!(a, b);
        let distinct = (0..20u64)
            .map(|s| patient_split(&scans, (0.70, 0.15, 0.15), s).unwrap())
            .collect::<Vec<_>>();
        assert!(distinct.iter().any(|s| s != &a));
    }

    #[test]
    fn too_few_patients_errors() {
        let scans = dataset(2, (1, 1), 5);
        assert!(matches!(
            patient_split(&scans, (0.70, 0.15, 0.15), 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let scans = dataset(5, (1, 1), 5);
        assert!(patient_split(&scans, (0.5, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn apportionment_examples() {
        assert_eq!(apportion(10, (0.70, 0.15, 0.15)), [7, 2, 1]);
        assert_eq!(apportion(3, (0.70, 0.15, 0.15)), [2, 1, 0]);
        assert_eq!(apportion(20, (0.70, 0.15, 0.15)), [14, 3, 3]);
    }
}
