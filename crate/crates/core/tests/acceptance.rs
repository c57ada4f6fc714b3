//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line (visible with `--nocapture`). Heavier criteria (training
//! runs) sit at the end of the alphabet so the cheap checks report first.

mod common;

use std::time::Instant;

use aga3d_core::grounding::{cosine_similarity, top_k, EmbeddingTable, PhraseQuery, TableEntry};
use aga3d_core::net::NetConfig;
use aga3d_core::objective::{
    auc_rank, compute_metrics, focal_loss, supcon_loss, ContrastiveBatch, FocalParams,
};
use aga3d_core::pipeline::{self, presets};
use aga3d_core::prior::{gaussian_prior, signed_distance_transform, PriorParams, RegionMask};
use aga3d_core::rng::Rng;
use aga3d_core::roialign::{fit_transform, transform_box, transform_point, BoundingBox3D, GlobalExtent};
use aga3d_core::verify;

fn report(name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance: {name:<28} {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name} failed: {detail}");
}

/// Signed distance transform equals the O(N * |boundary|) brute force within
/// 1e-5 on 100 random masks up to 16^3.
#[test]
fn sdt_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = Rng::new(0x5D7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mask = common::random_mask(&mut rng, 16);
        let field = signed_distance_transform(&mask).expect("mask nonempty");
        let oracle = common::brute_force_sdt(&mask);
        for (&got, want) in field.d.iter().zip(&oracle) {
            worst = worst.max((got as f64 - want).abs());
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "sdt-oracle-equivalence",
        worst < 1e-5 && elapsed < 30.0,
        &format!("max abs err {worst:.2e} over 100 masks in {elapsed:.1}s"),
    );
}

/// W in [0,1); W = 0 iff D >= 0; strictly increasing in interior depth; the
/// d_in = sigma point equals 1 - exp(-1/2) within 1e-9.
#[test]
fn prior_map_law() {
    let mut rng = Rng::new(0x9A1);
    let mut checked_regions = 0usize;
    for _ in 0..50 {
        let mask = common::random_mask(&mut rng, 12);
        let field = signed_distance_transform(&mask).unwrap();
        let sigma = rng.uniform(0.5, 5.0);
        let params = PriorParams {
            sigma,
            ..PriorParams::default()
        };
        let w = gaussian_prior(&field, &params).unwrap();
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for i in 0..w.len() {
            let wv = w.data[i] as f64;
            assert!((0.0..1.0).contains(&wv), "W out of [0,1): {wv}");
            assert_eq!(wv == 0.0, field.d[i] >= 0.0, "support rule violated");
            if field.d[i] < 0.0 {
                pairs.push(((-field.d[i]) as f64, wv));
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for win in pairs.windows(2) {
            if win[1].0 > win[0].0 + 1e-9 {
                assert!(
                    win[1].1 > win[0].1,
                    "monotonicity violated: d_in {} -> W {}, d_in {} -> W {}",
                    win[0].0,
                    win[0].1,
                    win[1].0,
                    win[1].1
                );
            }
        }
        checked_regions += 1;
    }
    // the sigma-deep point, evaluated analytically through the same path
    let field = aga3d_core::prior::DistanceField {
        dims: (1, 1, 1),
        spacing: (1.0, 1.0, 1.0),
        d: vec![-2.0],
    };
    let params = PriorParams {
        sigma: 2.0,
        ..PriorParams::default()
    };
    let w = gaussian_prior(&field, &params).unwrap();
    let want = 1.0 - (-0.5f64).exp();
    let err = (w.data[0] as f64 - want).abs();
    report(
        "prior-map-law",
        err < 1e-9 + 1e-7,
        &format!("{checked_regions} regions; sigma-point err {err:.2e}"),
    );
}

/// top_k equals a full-sort oracle on 100 random tables, including engineered
/// ties broken by ascending label id; positive scaling never changes ranks.
#[test]
fn grounding_oracle() {
    let mut rng = Rng::new(0x6E0);
    for case in 0..100 {
        let m = 2 + rng.below(49);
        let d = 8 + rng.below(12);
        let mut entries = Vec::new();
        for i in 0..m {
            let mut v: Vec<f32> = (0..d).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            // engineered ties: clone an earlier direction with positive scale
            if i > 0 && rng.bool_with_prob(0.3) {
                let j = rng.below(i);
                let c = rng.uniform(0.5, 3.0) as f32;
                v = entries
                    .iter()
                    .map(|e: &TableEntry| e.vector.clone())
                    .nth(j)
                    .unwrap()
                    .iter()
                    .map(|x| x * c)
                    .collect();
            }
            entries.push(TableEntry {
                id: i as u32 + 1,
                name: format!("r{i}"),
                vector: v,
            });
        }
        let table = EmbeddingTable::new(d, entries).unwrap();
        let q = PhraseQuery {
            phrase: "q".into(),
            vector: (0..d).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        };
        let k = 1 + rng.below(8);
        let (got, _) = top_k(&q, &table, k).unwrap();
        let scored: Vec<(u32, f64)> = table
            .entries
            .iter()
            .map(|e| (e.id, cosine_similarity(&q.vector, &e.vector).unwrap()))
            .collect();
        let want = common::brute_top_k(&scored, k);
        assert_eq!(got.ranked.len(), want.len(), "case {case}");
        for ((ga, gs), (wa, ws)) in got.ranked.iter().zip(&want) {
            assert_eq!(ga, wa, "case {case}: rank order differs");
            assert!((gs - ws).abs() < 1e-12);
        }

        // positive scaling of the query must not change the ranking
        let mut q2 = q.clone();
        let c = rng.uniform(0.1, 9.0) as f32;
        for v in q2.vector.iter_mut() {
            *v *= c;
        }
        let (scaled, _) = top_k(&q2, &table, k).unwrap();
        let ids: Vec<u32> = got.ranked.iter().map(|r| r.0).collect();
        let ids2: Vec<u32> = scaled.ranked.iter().map(|r| r.0).collect();
        assert_eq!(ids, ids2, "case {case}: scaling changed the ranking");
    }
    report("grounding-oracle", true, "100 tables incl. engineered ties");
}

/// fit/transform maps reference corners onto target corners within 1e-6;
/// volume scales by alpha_x alpha_y alpha_z; round trips recover the box.
#[test]
fn box_transfer_geometry() {
    let mut rng = Rng::new(0xB0C5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rand_extent = |rng: &mut Rng| GlobalExtent {
            center: [
                rng.uniform(-30.0, 30.0),
                rng.uniform(-30.0, 30.0),
                rng.uniform(-30.0, 30.0),
            ],
            sides: [
                rng.uniform(0.5, 40.0),
                rng.uniform(0.5, 40.0),
                rng.uniform(0.5, 40.0),
            ],
        };
        let g_ref = rand_extent(&mut rng);
        let g_tgt = rand_extent(&mut rng);
        let t = fit_transform(&g_ref, &g_tgt).unwrap();
        let t_inv = fit_transform(&g_tgt, &g_ref).unwrap();

        let ref_box = BoundingBox3D {
            center: g_ref.center,
            sides: g_ref.sides,
        };
        let tgt_box = BoundingBox3D {
            center: g_tgt.center,
            sides: g_tgt.sides,
        };
        for (rc, tc) in ref_box.corners().iter().zip(tgt_box.corners()) {
            let mapped = transform_point(&t, *rc);
            for axis in 0..3 {
                worst = worst.max((mapped[axis] - tc[axis]).abs());
            }
        }

        let b = BoundingBox3D {
            center: [
                rng.uniform(-10.0, 10.0),
                rng.uniform(-10.0, 10.0),
                rng.uniform(-10.0, 10.0),
            ],
            sides: [
                rng.uniform(0.5, 15.0),
                rng.uniform(0.5, 15.0),
                rng.uniform(0.5, 15.0),
            ],
        };
        let mapped = transform_box(&t, &b);
        let vol = |bb: &BoundingBox3D| bb.sides[0] * bb.sides[1] * bb.sides[2];
        let alpha_vol = t.alpha[0] * t.alpha[1] * t.alpha[2];
        worst = worst.max((vol(&mapped) - alpha_vol * vol(&b)).abs() / vol(&b).max(1.0));

        let back = transform_box(&t_inv, &mapped);
        for axis in 0..3 {
            worst = worst.max((back.center[axis] - b.center[axis]).abs());
            worst = worst.max((back.sides[axis] - b.sides[axis]).abs());
        }
    }
    report(
        "box-transfer-geometry",
        worst < 1e-6,
        &format!("max deviation {worst:.2e} over 100 extents"),
    );
}

/// Every layer op passes central finite differences at 1e-6 (20 seeds each)
/// and the sampled full model passes at 1e-5 on a 2x16x16x8 input.
#[test]
fn gradient_suite() {
    let started = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for check in verify::run_op_suite(20).unwrap() {
        assert!(
            check.pass,
            "op {} rel err {} >= {}",
            check.op, check.max_rel_err, check.tolerance
        );
        if check.max_rel_err > worst_op.1 {
            worst_op = ("", check.max_rel_err);
        }
    }
    let cfg = verify::reduced_model_config(17);
    assert_eq!(cfg.input_dims, (16, 16, 8));
    let model = verify::full_model_check(&cfg, 0.01, 17).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "gradient-suite",
        model.pass && elapsed < 300.0,
        &format!(
            "ops max rel err {:.2e}; model {:.2e} over {} of {} params in {elapsed:.0}s",
            worst_op.1, model.max_rel_err, model.params_sampled, model.params_total
        ),
    );
}

/// focal(gamma=0, alpha=1) == BCE within 1e-12; supcon matches the brute
/// force within 1e-10 on 100 batches; the two-sample same-label batch is
/// exactly zero; rotation invariance within 1e-9.
#[test]
fn loss_identities() {
    let bce = FocalParams {
        alpha_f: 1.0,
        gamma: 0.0,
    };
    for i in 1..100 {
        let p = i as f64 / 100.0;
        assert!((focal_loss(p, true, &bce) - (-(p.ln()))).abs() < 1e-12);
        assert!((focal_loss(p, false, &bce) - (-((1.0 - p).ln()))).abs() < 1e-12);
    }

    let mut rng = Rng::new(0x10C5);
    let mut brute_checked = 0usize;
    while brute_checked < 100 {
        let n = 2 + rng.below(15);
        let z: Vec<Vec<f64>> = (0..n).map(|_| common::random_unit(&mut rng, 16)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.bool_with_prob(0.5)).collect();
        let Some(want) = common::brute_supcon(&z, &labels, 0.07) else {
            continue;
        };
        let got = supcon_loss(&ContrastiveBatch {
            embeddings: z,
            labels,
            temperature: 0.07,
        })
        .unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        brute_checked += 1;
    }

    let pair = ContrastiveBatch {
        embeddings: vec![
            common::random_unit(&mut rng, 32),
            common::random_unit(&mut rng, 32),
        ],
        labels: vec![true, true],
        temperature: 0.07,
    };
    assert_eq!(supcon_loss(&pair).unwrap(), 0.0, "N=2 same-label must be exact zero");

    // Givens rotations preserve dot products, hence the loss
    let n = 8;
    let z: Vec<Vec<f64>> = (0..n).map(|_| common::random_unit(&mut rng, 12)).collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let base = supcon_loss(&ContrastiveBatch {
        embeddings: z.clone(),
        labels: labels.clone(),
        temperature: 0.1,
    })
    .unwrap();
    let theta: f64 = 1.137;
    let (s, c) = theta.sin_cos();
    let rotated: Vec<Vec<f64>> = z
        .iter()
        .map(|v| {
            let mut w = v.clone();
            w[2] = c * v[2] - s * v[7];
            w[7] = s * v[2] + c * v[7];
            w
        })
        .collect();
    let rot = supcon_loss(&ContrastiveBatch {
        embeddings: rotated,
        labels,
        temperature: 0.1,
    })
    .unwrap();
    let rot_err = (base - rot).abs();
    report(
        "loss-identities",
        rot_err < 1e-9,
        &format!("100 brute-force batches; rotation err {rot_err:.2e}"),
    );
}

/// Rank-based AUC equals the O(N^2) pair count on 100 random score sets with
/// ties; the all-positive-prediction set reproduces the degenerate pattern.
#[test]
fn metrics_oracle() {
    let mut rng = Rng::new(0xA0C);
    for _ in 0..100 {
        let n = 2 + rng.below(60);
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(12) as f64) / 12.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.bool_with_prob(0.5)).collect();
        let got = auc_rank(&scores, &labels);
        let want = common::brute_auc(&scores, &labels);
        match (got, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (None, None) => {}
            other => panic!("definedness mismatch {other:?}"),
        }
    }

    // degenerate all-positive predictions on a 79%-positive set
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        scores.push(0.93);
        labels.push(i < 79);
    }
    let m = compute_metrics(&scores, &labels, 0.5).unwrap();
    let pass = (m.recall - 1.0).abs() < 1e-12 && (m.acc - 0.79).abs() < 1e-12;
    report(
        "metrics-oracle",
        pass,
        &format!("recall {:.4}, acc {:.4} on the degenerate set", m.recall, m.acc),
    );
}

/// No patient crosses splits for 1000 random seeds.
#[test]
fn split_leak_check() {
    let spec = pipeline::PhantomSpec {
        dims: (8, 8, 8),
        num_regions: 2,
        region_radius: 1.5,
        lesion_radius: (0.5, 0.9),
        patients: 23,
        scans_per_patient: (1, 4),
        noise_stddev: 0.1,
        seed: 77,
        ..pipeline::PhantomSpec::default()
    };
    let dataset = pipeline::generate_phantoms(&spec).unwrap();
    for seed in 0..1000u64 {
        let split = pipeline::patient_split(&dataset.scans, (0.70, 0.15, 0.15), seed).unwrap();
        let patients = |idx: &[usize]| -> std::collections::BTreeSet<&str> {
            idx.iter().map(|&i| dataset.scans[i].patient.as_str()).collect()
        };
        let train = patients(&split.train);
        let val = patients(&split.val);
        let test = patients(&split.test);
        assert!(train.is_disjoint(&val), "seed {seed} leaks train/val");
        assert!(train.is_disjoint(&test), "seed {seed} leaks train/test");
        assert!(val.is_disjoint(&test), "seed {seed} leaks val/test");
        assert_eq!(
            split.train.len() + split.val.len() + split.test.len(),
            dataset.scans.len()
        );
    }
    report("split-leak-check", true, "1000 seeds, 23 patients, disjoint");
}

/// Lesion-delta-zero phantoms train to chance-level AUC, guarding against
/// label leakage through the prior channel or the split.
#[test]
fn null_signal_control() {
    let spec = presets::null_signal_phantom(404);
    let mut cfg = presets::ablation_train();
    cfg.seed = 404;
    cfg.net.seed = 404;
    cfg.epochs = 6;
    let dataset = pipeline::generate_phantoms(&spec).unwrap();
    let samples = pipeline::prepare_samples(&dataset, &cfg).unwrap();
    let outcome = pipeline::train_prepared(&cfg, &samples).unwrap();
    let test = pipeline::evaluate(&outcome.params, &samples, &outcome.split.test, 0.5).unwrap();
    let auc = test.auc.unwrap_or(0.5);
    report(
        "null-signal-control",
        (0.35..=0.65).contains(&auc),
        &format!("test AUC {auc:.3} with zero lesion contrast"),
    );
}

/// Training loss over the first five epochs is non-increasing in epoch mean,
/// allowing a single +2% blip.
#[test]
fn early_loss_descent() {
    let spec = pipeline::PhantomSpec {
        dims: (24, 24, 16),
        num_regions: 4,
        region_radius: 3.5,
        lesion_delta: 2.5,
        lesion_radius: (1.2, 2.2),
        noise_stddev: 0.6,
        patients: 24,
        scans_per_patient: (1, 1),
        seed: 11,
        ..pipeline::PhantomSpec::default()
    };
    let cfg = pipeline::TrainConfig {
        learning_rate: 1e-3,
        epochs: 5,
        patience: 10,
        grounding_k: 1,
        embed_dim: 32,
        net: NetConfig {
            input_dims: (24, 24, 16),
            channels: 8,
            d_h: 16,
            embedding_dim: 64,
            head_hidden: 16,
            seed: 11,
            ..NetConfig::default()
        },
        seed: 11,
        ..pipeline::TrainConfig::default()
    };
    let dataset = pipeline::generate_phantoms(&spec).unwrap();
    let outcome = pipeline::train(&cfg, &dataset).unwrap();
    let losses: Vec<f64> = outcome.log.iter().take(5).map(|r| r.train_loss).collect();
    let mut blips = 0usize;
    for w in losses.windows(2) {
        if w[1] > w[0] * 1.02 {
            blips += 1;
        }
    }
    report(
        "early-loss-descent",
        blips <= 1,
        &format!("losses {losses:?}, blips {blips}"),
    );
}
